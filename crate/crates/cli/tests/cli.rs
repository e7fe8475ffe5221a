use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vugrade(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vugrade"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VUGRADE_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_kind(dir: &Path) -> String {
    let v: Value = serde_json::from_slice(&fs::read(dir.join("error.json")).unwrap()).unwrap();
    v["kind"].as_str().unwrap().to_string()
}

/// Small corpus and a config that keeps runs fast.
fn setup(dir: &Path, seed: u64, n_vus: usize) {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "k": 3,
        "preprocess": { "target_size": [32, 32] },
        "training": { "epochs": 120 },
        "synth": {
            "n_vus": n_vus,
            "n_patients": n_vus / 5,
            "image_size": [32, 32],
            "prevalence": [0.6, 0.15, 0.15, 0.1]
        }
    });
    fs::write(
        dir.join("cfg.json"),
        serde_json::to_vec_pretty(&cfg).unwrap(),
    )
    .unwrap();
    let s = seed.to_string();
    ok(&vugrade(
        &[
            "synth",
            "--config",
            "cfg.json",
            "--seed",
            &s,
            "--out",
            &format!("corpus{seed}"),
        ],
        dir,
    ));
}

#[test]
fn stage_commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 1, 150);
    assert!(d.join("corpus1/manifest.csv").exists());
    assert!(d.join("corpus1/images/vu00000.png").exists());

    ok(&vugrade(
        &[
            "split",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus1/manifest.csv",
            "--k",
            "2",
            "--out",
            "split",
        ],
        d,
    ));
    let assignment = fs::read_to_string(d.join("split/assignment.csv")).unwrap();
    assert!(
        assignment.starts_with("# k=2,seed=0,stratify=false\npatient_id,fold\n"),
        "{assignment}"
    );

    ok(&vugrade(
        &[
            "train",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus1/manifest.csv",
            "--out",
            "train",
        ],
        d,
    ));
    assert!(d.join("train/model/cascade.json").exists());
    assert!(d.join("train/config.resolved.json").exists());

    ok(&vugrade(
        &[
            "predict",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus1/manifest.csv",
            "--model",
            "train/model",
            "--out",
            "pred",
        ],
        d,
    ));
    let preds = fs::read_to_string(d.join("pred/predictions.csv")).unwrap();
    assert_eq!(
        preds.lines().next(),
        Some("vu_id,site,predicted,p0,p1,p2,p3")
    );
    assert_eq!(preds.lines().count(), 1 + 2 * 150);

    ok(&vugrade(
        &[
            "evaluate",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus1/manifest.csv",
            "--predictions",
            "pred/predictions.csv",
            "--out",
            "eval",
        ],
        d,
    ));
    let report: Value =
        serde_json::from_slice(&fs::read(d.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["balanced_accuracy"].as_f64().unwrap() > 0.8);
    assert!(report["per_class"].as_array().unwrap().len() == 4);
}

#[test]
fn crossval_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 2, 150);
    ok(&vugrade(
        &[
            "crossval",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus2/manifest.csv",
            "--out",
            "cv",
        ],
        d,
    ));
    for f in [
        "assignment.csv",
        "aggregate.csv",
        "aggregate.txt",
        "aggregate.json",
        "config.resolved.json",
    ] {
        assert!(d.join("cv").join(f).exists(), "{f}");
    }
    for fold in 0..3 {
        for f in [
            "model/cascade.json",
            "predictions.csv",
            "report.json",
            "report.txt",
        ] {
            assert!(
                d.join(format!("cv/fold_{fold}/{f}")).exists(),
                "fold {fold} {f}"
            );
        }
    }
    let csv = fs::read_to_string(d.join("cv/aggregate.csv")).unwrap();
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(&labels[..4], ["0", "1", "2", "3"]);
    assert!(
        labels.contains(&"Macro average")
            && labels.contains(&"Weighted average")
            && labels.contains(&"Balanced accuracy")
    );
}

#[test]
fn too_many_folds_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 3, 40);
    let out = vugrade(
        &[
            "crossval",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus3/manifest.csv",
            "--k",
            "50",
            "--out",
            "cv",
        ],
        d,
    );
    assert!(!out.status.success());
    assert_eq!(error_kind(&d.join("cv")), "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"kind\":\"config\""));
}

#[test]
fn cross_study_run_is_reproducible_and_rejects_unlabeled_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 4, 150);
    ok(&vugrade(
        &[
            "synth", "--config", "cfg.json", "--seed", "5", "--out", "corpus5",
        ],
        d,
    ));
    let args = |out: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            "cfg.json".into(),
            "--manifest".into(),
            "corpus4/manifest.csv".into(),
            "--test-manifest".into(),
            "corpus5/manifest.csv".into(),
            "--out".into(),
            out.to_string(),
        ]
    };
    let run = |out: &str| {
        let a = args(out);
        vugrade(&a.iter().map(String::as_str).collect::<Vec<_>>(), d)
    };
    ok(&run("single_a"));
    ok(&run("single_b"));
    assert_eq!(
        fs::read(d.join("single_a/report.json")).unwrap(),
        fs::read(d.join("single_b/report.json")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("single_a/predictions.csv")).unwrap(),
        fs::read(d.join("single_b/predictions.csv")).unwrap()
    );

    let manifest = fs::read_to_string(d.join("corpus5/manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    let mut stripped = vec![lines.next().unwrap().to_string()];
    for l in lines {
        let cols: Vec<&str> = l.split(',').collect();
        stripped.push(format!("{},,", cols[..5].join(",")));
    }
    fs::write(d.join("corpus5/unlabeled.csv"), stripped.join("\n") + "\n").unwrap();
    let out = vugrade(
        &[
            "train",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus4/manifest.csv",
            "--test-manifest",
            "corpus5/unlabeled.csv",
            "--out",
            "single_c",
        ],
        d,
    );
    assert!(!out.status.success());
    assert_eq!(error_kind(&d.join("single_c")), "report");
}

#[test]
fn output_root_and_config_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 6, 40);
    let root = d.join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_vugrade"))
        .args([
            "split",
            "--config",
            "cfg.json",
            "--manifest",
            "corpus6/manifest.csv",
            "--out",
            "runs/s",
        ])
        .current_dir(d)
        .env("VUGRADE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("runs/s/assignment.csv").exists());
    let resolved: Value =
        serde_json::from_slice(&fs::read(root.join("runs/s/config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["config"]["k"], 3);
    assert_eq!(resolved["config"]["schema_version"], 1);

    fs::write(d.join("bad.json"), r#"{"schema_version": 99}"#).unwrap();
    let out = vugrade(
        &[
            "split",
            "--config",
            "bad.json",
            "--manifest",
            "corpus6/manifest.csv",
            "--out",
            "bad",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    let out = vugrade(&["split", "--manifest", "corpus6/manifest.csv"], d);
    assert!(!out.status.success());
}
