//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! Criterion 3 compares support-weighted recall against a published cell
//! that the published per-class values do not reproduce (0.936 rounds to
//! 0.94, the table prints 0.93). It is checked literally and reported as
//! FAIL; it only fails the process when `VUGRADE_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vugrade::{run_crossval, run_single, run_synth, RunConfig};
use vugrade_core::cascade::{fuse_distribution, grade_corners, ScoreDistribution};
use vugrade_core::data::{MsasssScore, PreprocessConfig, VuRecord};
use vugrade_core::metrics::{
    aggregate_report, confusion_matrix, f1_score, per_class_metrics, roc_auc_ovr, ClassMetrics,
};
use vugrade_core::split::{assign_folds, materialize_split};
use vugrade_core::synth::{generate_samples, SyntheticConfig};

/// Criteria whose published reference value is inconsistent with the
/// published data they derive from.
const KNOWN_RED: &[u32] = &[3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Half-up rounding of the decimal a value stands for. The published
/// cells are short decimals, so the value is first cut to 10 places to
/// drop binary representation error (0.5075 is stored as 0.50749999...).
fn round_dp(x: f64, dp: u32) -> f64 {
    let scale = 10f64.powi(dp as i32);
    let scaled = format!("{x:.10}").parse::<f64>().unwrap() * scale;
    (scaled + 0.5 + 1e-9).floor() / scale
}

fn class_metrics(rows: &[(f64, f64, f64, u64)]) -> Vec<ClassMetrics> {
    rows.iter()
        .enumerate()
        .map(|(c, &(p, r, f1, s))| ClassMetrics {
            class: c as u8,
            precision: p,
            recall: r,
            f1,
            auc: None,
            support: s,
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let sets = [
        ([0.918, 0.240, 0.300, 0.800], [1u64, 1, 1, 1], 0.5645, 0.56),
        ([0.95, 0.12, 0.23, 0.73], [15201, 25, 244, 64], 0.5075, 0.51),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (recalls, supports, raw, published) in sets {
        let rows: Vec<_> = recalls
            .iter()
            .zip(supports)
            .map(|(&r, s)| (r, r, r, s))
            .collect();
        let report = aggregate_report(&class_metrics(&rows)).unwrap();
        let ba = report.balanced_accuracy;
        let ok = (ba - raw).abs() < 1e-9 && (round_dp(ba, 2) - published).abs() < 1e-12;
        pass &= ok;
        detail.push(format!(
            "{ba:.6} -> {:.2} (want {published:.2})",
            round_dp(ba, 2)
        ));
    }
    outcome(pass, detail.join(", "))
}

const PER_CLASS_CELLS: [(f64, f64, f64, u64); 4] = [
    (0.99, 0.95, 0.97, 15201),
    (0.01, 0.12, 0.02, 25),
    (0.15, 0.23, 0.18, 244),
    (0.14, 0.73, 0.23, 64),
];

fn criterion_2() -> Outcome {
    // per_class_metrics must compute F1 through the same harmonic mean.
    let t: Vec<MsasssScore> = [0, 0, 0, 1, 1, 2, 3, 3]
        .iter()
        .map(|&v| MsasssScore::new(v).unwrap())
        .collect();
    let p: Vec<MsasssScore> = [0, 1, 0, 1, 2, 2, 3, 0]
        .iter()
        .map(|&v| MsasssScore::new(v).unwrap())
        .collect();
    let consistent = per_class_metrics(&confusion_matrix(&t, &p).unwrap())
        .iter()
        .all(|m| (m.f1 - f1_score(m.precision, m.recall)).abs() < 1e-15);
    let mut pass = consistent;
    let mut detail = Vec::new();
    for (c, &(pr, rc, f1, _)) in PER_CLASS_CELLS.iter().enumerate() {
        let got = f1_score(pr, rc);
        let ok = (round_dp(got, 2) - f1).abs() < 1e-12;
        pass &= ok;
        detail.push(format!(
            "class {c}: {got:.4} -> {:.2} (table {f1:.2})",
            round_dp(got, 2)
        ));
    }
    outcome(pass, detail.join(", "))
}

fn criterion_3() -> Outcome {
    let report = aggregate_report(&class_metrics(&PER_CLASS_CELLS)).unwrap();
    let checks = [
        ("unweighted P", report.macro_avg.precision, 0.32),
        ("unweighted R", report.macro_avg.recall, 0.51),
        ("unweighted F1", report.macro_avg.f1, 0.35),
        ("weighted P", report.weighted_avg.precision, 0.97),
        ("weighted R", report.weighted_avg.recall, 0.93),
        ("weighted F1", report.weighted_avg.f1, 0.95),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, got, printed) in checks {
        let ok = (round_dp(got, 2) - printed).abs() < 1e-12;
        pass &= ok;
        let mark = if ok { "ok" } else { "MISMATCH" };
        detail.push(format!(
            "{name} {got:.4} -> {:.2} vs {printed:.2} {mark}",
            round_dp(got, 2)
        ));
    }
    outcome(pass, detail.join("; "))
}

fn random_dist(rng: &mut ChaCha8Rng) -> ScoreDistribution {
    // Coarse values so that ties occur.
    let w: Vec<f64> = (0..4)
        .map(|_| rng.random_range(0..6) as f64 + 0.5)
        .collect();
    let s: f64 = w.iter().sum();
    ScoreDistribution::new([w[0] / s, w[1] / s, w[2] / s, 1.0 - (w[0] + w[1] + w[2]) / s]).unwrap()
}

fn pairwise_auc(y: &[MsasssScore], d: &[ScoreDistribution], cls: MsasssScore) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, yi) in y.iter().enumerate() {
        for (j, yj) in y.iter().enumerate() {
            if *yi == cls && *yj != cls {
                let (a, b) = (d[i].p()[cls.index()], d[j].p()[cls.index()]);
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut agree = true;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let y: Vec<MsasssScore> = (0..n)
            .map(|_| MsasssScore::from_index(rng.random_range(0..4)))
            .collect();
        let d: Vec<ScoreDistribution> = (0..n).map(|_| random_dist(&mut rng)).collect();
        for cls in MsasssScore::ALL {
            match (roc_auc_ovr(&y, &d, cls), pairwise_auc(&y, &d, cls)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => agree = false,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        agree && worst <= 1e-12 && secs < 1.0,
        format!("max |diff| {worst:.2e}, definedness agrees: {agree}, {secs:.3}s"),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for trial in 0..100 {
        let n_vus = rng.random_range(20..200);
        let cfg = SyntheticConfig {
            n_vus,
            n_patients: rng.random_range(2..=n_vus.min(60)),
            image_size: (32, 32),
            seed: rng.random(),
            ..SyntheticConfig::default()
        };
        let records: Vec<VuRecord> = generate_samples(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| s.record)
            .collect();
        let k = rng.random_range(2..=cfg.n_patients.min(10));
        let seed: u64 = rng.random();
        let stratify = rng.random_bool(0.5);
        let a = assign_folds(&records, k, seed, stratify).unwrap();

        let sizes = a.fold_sizes();
        if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            failures.push(format!("trial {trial}: unbalanced {sizes:?}"));
        }
        for fold in 0..k {
            let (train, test) = materialize_split(&records, &a, fold).unwrap();
            let train_p: std::collections::HashSet<_> =
                train.iter().map(|r| &r.patient_id).collect();
            if test.iter().any(|r| train_p.contains(&r.patient_id)) {
                failures.push(format!("trial {trial}: patient overlap in fold {fold}"));
            }
            if train.len() + test.len() != records.len() {
                failures.push(format!("trial {trial}: split loses VUs"));
            }
        }
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        a.save(&p1).unwrap();
        assign_folds(&records, k, seed, stratify)
            .unwrap()
            .save(&p2)
            .unwrap();
        if fs::read(&p1).unwrap() != fs::read(&p2).unwrap() {
            failures.push(format!("trial {trial}: assignment not reproducible"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    let detail = if failures.is_empty() {
        format!("100 corpora, {secs:.2}s")
    } else {
        format!(
            "{} problems, first: {}; {secs:.2}s",
            failures.len(),
            failures[0]
        )
    };
    outcome(pass, detail)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_sum, mut dominance, mut monotone) = (0.0f64, true, true);
    for i in 0..10_000 {
        let p: f64 = if i < 3 {
            [0.0, 0.5, 1.0][i]
        } else {
            rng.random()
        };
        let heads: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-9).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        let pred = grade_corners(p, &heads, 0.5).unwrap();
        for c in &pred.corners {
            worst_sum = worst_sum.max((c.dist.p().iter().sum::<f64>() - 1.0).abs());
            dominance &= (c.label == MsasssScore::BRIDGE) == (p >= 0.5);
        }
        let higher = p + (1.0 - p) * rng.random_range(0.01..1.0);
        if higher > p {
            monotone &= fuse_distribution(higher, &heads[0]).unwrap().p()[3]
                > fuse_distribution(p, &heads[0]).unwrap().p()[3];
        }
    }
    outcome(
        worst_sum <= 1e-9 && dominance && monotone,
        format!("max |sum-1| {worst_sum:.1e}, gate dominance {dominance}, monotone {monotone}"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn synthetic_config(seed: u64) -> RunConfig {
    RunConfig {
        seed: 0,
        preprocess: PreprocessConfig {
            target_size: (64, 64),
            ..PreprocessConfig::default()
        },
        synth: SyntheticConfig {
            n_vus: 2000,
            prevalence: [0.85, 0.05, 0.07, 0.03],
            seed,
            ..SyntheticConfig::default()
        },
        ..RunConfig::default()
    }
}

/// `mean(std)` with three decimals each, or `-` for undefined cells.
fn is_cell(s: &str) -> bool {
    fn three_dp(v: &str) -> bool {
        matches!(v.split_once('.'), Some((int, frac))
            if !int.is_empty() && int.bytes().all(|c| c.is_ascii_digit())
                && frac.len() == 3 && frac.bytes().all(|c| c.is_ascii_digit()))
    }
    s == "-"
        || s.strip_suffix(')')
            .and_then(|body| body.split_once('('))
            .is_some_and(|(mean, std)| three_dp(mean) && three_dp(std))
}

fn criterion_7(work: &Path) -> Outcome {
    let start = Instant::now();
    let mut cfg = synthetic_config(2024);
    let corpus = work.join("corpus7");
    let records = run_synth(&cfg, &corpus).unwrap();
    cfg.manifest = Some(corpus.join("manifest.csv"));
    cfg.k = 5;
    let out = work.join("cv7");
    let first = match run_crossval(&cfg, &out) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("crossval failed: {e:#}")),
    };
    let ba = first
        .table
        .row("Balanced accuracy")
        .unwrap()
        .recall
        .unwrap();

    let csv = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let txt = fs::read_to_string(out.join("aggregate.txt")).unwrap();
    let csv_ok = csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').skip(1).all(is_cell));
    let txt_ok = txt.contains("Balanced accuracy")
        && txt.contains(&format!("{:.3}({:.3})", ba.mean, ba.std));

    let before = snapshot(&out);
    fs::remove_dir_all(&out).unwrap();
    run_crossval(&cfg, &out).unwrap();
    let identical = before == snapshot(&out);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        records.len() == 2000 && ba.mean >= 0.90 && csv_ok && txt_ok && identical && secs < 600.0,
        format!(
            "balanced accuracy {:.3}({:.3}), mean(std) format {}, rerun byte-identical {identical} ({} files), {secs:.1}s",
            ba.mean,
            ba.std,
            csv_ok && txt_ok,
            before.len()
        ),
    )
}

fn criterion_8(work: &Path) -> Outcome {
    let a = synthetic_config(101);
    let b = synthetic_config(202);
    run_synth(&a, &work.join("corpusA")).unwrap();
    run_synth(&b, &work.join("corpusB")).unwrap();
    let cfg = RunConfig {
        manifest: Some(work.join("corpusA/manifest.csv")),
        test_manifest: Some(work.join("corpusB/manifest.csv")),
        ..a
    };
    match run_single(&cfg, &work.join("single8")) {
        Ok((_, report)) => {
            let ba = report.balanced_accuracy;
            outcome(
                ba >= 0.85,
                format!("A(seed 101) -> B(seed 202) balanced accuracy {ba:.4}"),
            )
        }
        Err(e) => outcome(false, format!("run_single failed: {e:#}")),
    }
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let criteria: Vec<(u32, &str, Criterion)> = vec![
        (1, "balanced-accuracy reproduction", Box::new(criterion_1)),
        (2, "F1 consistency", Box::new(criterion_2)),
        (3, "averaging-label audit", Box::new(criterion_3)),
        (4, "AUC oracle equivalence", Box::new(criterion_4)),
        (5, "split invariants", Box::new(criterion_5)),
        (6, "fusion properties", Box::new(criterion_6)),
        (
            7,
            "synthetic end-to-end",
            Box::new(|| criterion_7(work.path())),
        ),
        (
            8,
            "cross-study protocol",
            Box::new(|| criterion_8(work.path())),
        ),
    ];
    let strict = std::env::var("VUGRADE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut unexpected = 0;
    for (id, name, check) in &criteria {
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {status} {name}: {}", o.detail);
        if !o.pass && (strict || !KNOWN_RED.contains(id)) {
            unexpected += 1;
        }
        if !o.pass && KNOWN_RED.contains(id) && !strict {
            println!("  (known: published reference inconsistent with its own data; see README)");
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
