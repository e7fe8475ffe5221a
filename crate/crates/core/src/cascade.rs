//! The two-step grading pipeline.
//!
//! Stage 1 estimates the probability that a VU carries a bony bridge. If
//! it reaches the gate threshold both corners are graded 3; otherwise each
//! corner takes the argmax of its stage-2 head over grades 0..=2. Stage 2
//! is evaluated for every VU so that each corner also gets a full fused
//! 4-class distribution:
//!
//! `P(3) = p_bridge`, `P(c) = (1 - p_bridge) * q(c)` for `c` in 0..=2.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{fit, ClassifierSpec, Target, TrainedClassifier};
use crate::data::{
    CornerSite, ImageSet, MsasssScore, PreprocessConfig, VuImage, VuRecord, NUM_CLASSES,
};
use crate::error::{Error, Result};

pub const CASCADE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;

const NORMALIZATION_TOL: f64 = 1e-9;
const HEAD_TOL: f64 = 1e-6;

/// Probability vector over grades 0..=3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct ScoreDistribution([f64; NUM_CLASSES]);

impl ScoreDistribution {
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self> {
        if p.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Contract(format!(
                "negative or NaN probability in {p:?}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("distribution sums to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn p(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    /// Most likely grade; ties resolve to the lower grade.
    pub fn argmax(&self) -> MsasssScore {
        MsasssScore::from_index(argmax(&self.0))
    }
}

impl TryFrom<[f64; 4]> for ScoreDistribution {
    type Error = Error;

    fn try_from(p: [f64; 4]) -> Result<Self> {
        Self::new(p)
    }
}

impl From<ScoreDistribution> for [f64; 4] {
    fn from(d: ScoreDistribution) -> Self {
        d.0
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerPrediction {
    pub site: CornerSite,
    pub label: MsasssScore,
    pub dist: ScoreDistribution,
}

/// Both corner predictions plus the raw gate probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VuPrediction {
    pub p_bridge: f64,
    pub corners: [CornerPrediction; 2],
}

impl VuPrediction {
    pub fn corner(&self, site: CornerSite) -> &CornerPrediction {
        &self.corners[site.head()]
    }
}

/// Combines the gate probability with one stage-2 head by total
/// probability. The head is renormalized before fusing.
pub fn fuse_distribution(p_bridge: f64, stage2_head: &[f64]) -> Result<ScoreDistribution> {
    if !(0.0..=1.0).contains(&p_bridge) {
        return Err(Error::Contract(format!(
            "p_bridge {p_bridge} outside [0, 1]"
        )));
    }
    if stage2_head.len() != NUM_CLASSES - 1 {
        return Err(Error::Contract(format!(
            "stage-2 head has {} classes, expected {}",
            stage2_head.len(),
            NUM_CLASSES - 1
        )));
    }
    if stage2_head.iter().any(|&q| q.is_nan() || q < 0.0) {
        return Err(Error::Contract(format!(
            "stage-2 head {stage2_head:?} has negative entries"
        )));
    }
    let total: f64 = stage2_head.iter().sum();
    if (total - 1.0).abs() > HEAD_TOL {
        return Err(Error::Contract(format!("stage-2 head sums to {total}")));
    }
    let rest = 1.0 - p_bridge;
    ScoreDistribution::new([
        rest * stage2_head[0] / total,
        rest * stage2_head[1] / total,
        rest * stage2_head[2] / total,
        p_bridge,
    ])
}

/// Stage-1 target: whether the highest present corner grade is 3.
pub fn derive_stage1_label(record: &VuRecord) -> Result<bool> {
    record
        .max_label()
        .map(MsasssScore::is_bridge)
        .ok_or_else(|| Error::Labeling {
            vu_id: record.vu_id.clone(),
            message: "no corner labels present".into(),
        })
}

/// Stage-2 training rows: indices into the input plus two-head targets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stage2Selection {
    pub indices: Vec<usize>,
    pub targets: Vec<Target>,
    /// VUs dropped because a present corner is graded 3.
    pub bridged: usize,
    /// VUs dropped because neither corner is labeled.
    pub unlabeled: usize,
}

/// Keeps labeled VUs without any grade-3 corner; absent corners are
/// masked in the targets.
pub fn select_stage2_training(records: &[VuRecord]) -> Stage2Selection {
    let mut sel = Stage2Selection::default();
    for (i, r) in records.iter().enumerate() {
        match r.max_label() {
            None => sel.unlabeled += 1,
            Some(m) if m.is_bridge() => sel.bridged += 1,
            Some(_) => {
                sel.indices.push(i);
                sel.targets.push(
                    CornerSite::ALL
                        .iter()
                        .map(|&s| r.label(s).map(|l| l.index()))
                        .collect(),
                );
            }
        }
    }
    sel
}

/// The gate rule on raw stage outputs: `p_bridge >= tau` grades both
/// corners 3, otherwise each corner takes the argmax of its stage-2 head.
/// Both corners always carry the fused distribution.
pub fn grade_corners(p_bridge: f64, heads: &[Vec<f64>], tau: f64) -> Result<VuPrediction> {
    if heads.len() != 2 {
        return Err(Error::Contract(format!(
            "expected 2 stage-2 heads, got {}",
            heads.len()
        )));
    }
    let gate = p_bridge >= tau;
    let corner = |site: CornerSite| -> Result<CornerPrediction> {
        let q = &heads[site.head()];
        let dist = fuse_distribution(p_bridge, q)?;
        let label = if gate {
            MsasssScore::BRIDGE
        } else {
            MsasssScore::from_index(argmax(q))
        };
        Ok(CornerPrediction { site, label, dist })
    };
    Ok(VuPrediction {
        p_bridge,
        corners: [corner(CornerSite::Upper)?, corner(CornerSite::Lower)?],
    })
}

#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub stage1: TrainedClassifier,
    pub stage2: TrainedClassifier,
    pub gate_threshold: f64,
    pub preprocess: PreprocessConfig,
}

#[derive(Serialize, Deserialize)]
struct CascadeManifest {
    format_version: u32,
    crate_version: String,
    gate_threshold: f64,
    preprocess: PreprocessConfig,
}

fn check_threshold(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gate threshold {tau} must lie in (0, 1)"
        )))
    }
}

/// Trains the gate and the corner grader independently on the labeled
/// records of `train`.
pub fn train_cascade(
    train: &[VuRecord],
    images: &ImageSet,
    stage1_spec: &ClassifierSpec,
    stage2_spec: &ClassifierSpec,
    gate_threshold: f64,
    preprocess: &PreprocessConfig,
) -> Result<CascadeModel> {
    check_threshold(gate_threshold)?;
    if stage1_spec.head_classes != [2] {
        return Err(Error::Config(format!(
            "stage 1 needs a single 2-class head, got {:?}",
            stage1_spec.head_classes
        )));
    }
    if stage2_spec.head_classes != [3, 3] {
        return Err(Error::Config(format!(
            "stage 2 needs two 3-class heads, got {:?}",
            stage2_spec.head_classes
        )));
    }

    let mut s1_images = Vec::new();
    let mut s1_targets = Vec::new();
    for r in train.iter().filter(|r| r.is_labeled()) {
        s1_images.push(images.get(r)?);
        s1_targets.push(vec![Some(derive_stage1_label(r)? as usize)]);
    }
    if s1_images.is_empty() {
        return Err(Error::training("stage 1", "no labeled VUs"));
    }
    let positives = s1_targets.iter().filter(|t| t[0] == Some(1)).count();
    if positives == 0 || positives == s1_targets.len() {
        return Err(Error::training(
            "stage 1",
            format!(
                "gate needs both bridged and non-bridged VUs ({positives} of {} bridged)",
                s1_targets.len()
            ),
        ));
    }

    let sel = select_stage2_training(train);
    if sel.indices.is_empty() {
        return Err(Error::training(
            "stage 2",
            "no VUs without a grade-3 corner",
        ));
    }
    let s2_images = sel
        .indices
        .iter()
        .map(|&i| images.get(&train[i]))
        .collect::<Result<Vec<_>>>()?;

    let stage1 = fit(&s1_images, &s1_targets, stage1_spec, preprocess)
        .map_err(|e| stage_error("stage 1", e))?;
    let stage2 = fit(&s2_images, &sel.targets, stage2_spec, preprocess)
        .map_err(|e| stage_error("stage 2", e))?;
    Ok(CascadeModel {
        stage1,
        stage2,
        gate_threshold,
        preprocess: preprocess.clone(),
    })
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Training { message, .. } => Error::training(stage, message),
        other => other,
    }
}

impl CascadeModel {
    /// Applies the gate rule to already computed stage outputs.
    pub fn combine(&self, p_bridge: f64, heads: &[Vec<f64>]) -> Result<VuPrediction> {
        grade_corners(p_bridge, heads, self.gate_threshold)
    }

    pub fn predict_batch(&self, images: &[&VuImage]) -> Result<Vec<VuPrediction>> {
        let gate = self.stage1.predict_dist(images)?;
        let grades = self.stage2.predict_dist(images)?;
        gate.iter()
            .zip(&grades)
            .map(|(g, heads)| self.combine(g[0][1], heads))
            .collect()
    }

    /// Stage-1 bridge probabilities alone.
    pub fn bridge_probabilities(&self, images: &[&VuImage]) -> Result<Vec<f64>> {
        Ok(self
            .stage1
            .predict_dist(images)?
            .iter()
            .map(|g| g[0][1])
            .collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.stage1.save(dir.join("stage1"))?;
        self.stage2.save(dir.join("stage2"))?;
        let manifest = CascadeManifest {
            format_version: CASCADE_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            gate_threshold: self.gate_threshold,
            preprocess: self.preprocess.clone(),
        };
        let path = dir.join("cascade.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("cascade.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CascadeManifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != CASCADE_FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "cascade format {} is not supported",
                manifest.format_version
            )));
        }
        check_threshold(manifest.gate_threshold)?;
        let stage1 = TrainedClassifier::load(dir.join("stage1"))?;
        let stage2 = TrainedClassifier::load(dir.join("stage2"))?;
        if stage1.preprocess() != &manifest.preprocess
            || stage2.preprocess() != &manifest.preprocess
        {
            return Err(Error::Artifact(
                "stage preprocessing differs from cascade.json".into(),
            ));
        }
        Ok(Self {
            stage1,
            stage2,
            gate_threshold: manifest.gate_threshold,
            preprocess: manifest.preprocess,
        })
    }
}

pub fn predict_vu(model: &CascadeModel, image: &VuImage) -> Result<[CornerPrediction; 2]> {
    Ok(model.predict_batch(&[image])?[0].corners)
}

/// One row of the predictions CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub vu_id: String,
    pub prediction: CornerPrediction,
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["vu_id", "site", "predicted", "p0", "p1", "p2", "p3"])?;
    for row in rows {
        let p = row.prediction.dist.p();
        wtr.write_record([
            row.vu_id.clone(),
            row.prediction.site.to_string(),
            row.prediction.label.to_string(),
            format!("{:?}", p[0]),
            format!("{:?}", p[1]),
            format!("{:?}", p[2]),
            format!("{:?}", p[3]),
        ])?;
    }
    wtr.flush()
        .map_err(|e| Error::io("<predictions writer>", e))?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let invalid = |message: String| Error::Validation { row: line, message };
        if rec.len() != 7 {
            return Err(invalid(format!("expected 7 columns, found {}", rec.len())));
        }
        let site: CornerSite = rec[1].parse().map_err(|e: Error| invalid(e.to_string()))?;
        let label = rec[2]
            .parse::<u8>()
            .ok()
            .and_then(MsasssScore::new)
            .ok_or_else(|| invalid(format!("bad predicted grade `{}`", &rec[2])))?;
        let mut p = [0.0; 4];
        for (c, slot) in p.iter_mut().enumerate() {
            *slot = rec[3 + c]
                .parse()
                .map_err(|_| invalid(format!("bad probability `{}`", &rec[3 + c])))?;
        }
        let dist = ScoreDistribution::new(p).map_err(|e| invalid(e.to_string()))?;
        rows.push(PredictionRow {
            vu_id: rec[0].to_string(),
            prediction: CornerPrediction { site, label, dist },
        });
    }
    Ok(rows)
}
