//! Classifier backends shared by both cascade stages.
//!
//! A classifier has one or more softmax heads; stage 1 uses a single
//! 2-class head and stage 2 two 3-class heads (upper and lower corner).
//! Targets carry one optional label per head, and absent labels contribute
//! nothing to the loss.

mod baseline;
#[cfg(feature = "deep")]
mod deep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, VuImage};
use crate::error::{Error, Result};

pub use baseline::{downsample, LogisticModel};
#[cfg(feature = "deep")]
pub use deep::ResNetClassifier;

/// Version of the on-disk model artifact layout.
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Baseline,
    Deep,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(BackendKind::Baseline),
            "deep" => Ok(BackendKind::Deep),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    #[default]
    None,
    InverseFrequency,
}

/// Options for the multinomial logistic-regression backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineOptions {
    /// Images are area-averaged onto a `feature_grid x feature_grid` grid.
    pub feature_grid: usize,
    /// L2 penalty on weights (biases are not penalized).
    pub l2: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            feature_grid: 32,
            l2: 1e-3,
        }
    }
}

/// Options for the residual-network backend. The defaults describe a
/// 152-layer bottleneck ResNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepOptions {
    /// Bottleneck blocks per stage.
    pub layers: [usize; 4],
    /// Channels of the stem; stage widths are multiples of this.
    pub base_width: usize,
    /// safetensors file with torchvision-style ResNet weights.
    pub pretrained: Option<PathBuf>,
    pub batch_size: usize,
    /// Train only the heads, keeping backbone weights fixed.
    pub freeze_backbone: bool,
    pub weight_decay: f64,
}

impl Default for DeepOptions {
    fn default() -> Self {
        Self {
            layers: [3, 8, 36, 3],
            base_width: 64,
            pretrained: None,
            batch_size: 16,
            freeze_backbone: false,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: BackendKind,
    /// Class count of each output head.
    pub head_classes: Vec<usize>,
    /// Full-batch iterations (baseline) or passes over the data (deep).
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub class_weighting: ClassWeighting,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub deep: DeepOptions,
}

impl ClassifierSpec {
    pub fn new(kind: BackendKind, head_classes: Vec<usize>) -> Self {
        let (epochs, learning_rate) = match kind {
            BackendKind::Baseline => (300, 0.01),
            BackendKind::Deep => (10, 1e-4),
        };
        Self {
            kind,
            head_classes,
            epochs,
            learning_rate,
            seed: 0,
            class_weighting: ClassWeighting::None,
            baseline: BaselineOptions::default(),
            deep: DeepOptions::default(),
        }
    }

    /// Binary bridge detector.
    pub fn stage1(kind: BackendKind) -> Self {
        Self::new(kind, vec![2])
    }

    /// Two 3-class heads, upper then lower corner.
    pub fn stage2(kind: BackendKind) -> Self {
        Self::new(kind, vec![3, 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_classes.is_empty() || self.head_classes.iter().any(|&k| k < 2) {
            return Err(Error::Config(format!(
                "every head needs at least 2 classes, got {:?}",
                self.head_classes
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        match self.kind {
            BackendKind::Baseline => {
                if self.baseline.feature_grid == 0
                    || self.baseline.l2.is_nan()
                    || self.baseline.l2 < 0.0
                {
                    return Err(Error::Config(
                        "baseline needs feature_grid > 0 and l2 >= 0".into(),
                    ));
                }
            }
            BackendKind::Deep => {
                if self.deep.base_width == 0
                    || self.deep.batch_size == 0
                    || self.deep.layers.contains(&0)
                {
                    return Err(Error::Config(
                        "deep backend needs positive layers, base_width and batch_size".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One optional class label per head.
pub type Target = Vec<Option<usize>>;

/// Per-head probability vectors for one image.
pub type HeadDistributions = Vec<Vec<f64>>;

/// Per-head, per-class loss weights after resolving the weighting mode.
pub(crate) fn class_weights(spec: &ClassifierSpec, targets: &[Target]) -> Vec<Vec<f64>> {
    spec.head_classes
        .iter()
        .enumerate()
        .map(|(h, &k)| {
            let mut counts = vec![0usize; k];
            for t in targets {
                if let Some(c) = t[h] {
                    counts[c] += 1;
                }
            }
            match spec.class_weighting {
                ClassWeighting::None => vec![1.0; k],
                ClassWeighting::InverseFrequency => {
                    if counts.contains(&0) {
                        log::warn!(
                            "head {h} has classes without examples ({counts:?}); inverse-frequency weighting falls back to none"
                        );
                        vec![1.0; k]
                    } else {
                        let total: usize = counts.iter().sum();
                        counts.iter().map(|&n| total as f64 / (k * n) as f64).collect()
                    }
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Model {
    Baseline(LogisticModel),
    #[cfg(feature = "deep")]
    Deep(ResNetClassifier),
}

/// A fitted classifier together with the preprocessing it expects.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    spec: ClassifierSpec,
    preprocess: PreprocessConfig,
    model: Model,
}

#[derive(Serialize, Deserialize)]
struct ArtifactSpec {
    format_version: u32,
    crate_version: String,
    spec: ClassifierSpec,
}

const SPEC_FILE: &str = "spec.json";
const PARAMS_FILE: &str = "params.bin";
const PREPROCESS_FILE: &str = "preprocess.json";

fn check_training_set(
    images: &[&VuImage],
    targets: &[Target],
    spec: &ClassifierSpec,
) -> Result<()> {
    spec.validate()?;
    if images.is_empty() {
        return Err(Error::training("classifier", "empty training set"));
    }
    if images.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.len() != spec.head_classes.len() {
            return Err(Error::Contract(format!(
                "target {i} has {} heads, spec has {}",
                t.len(),
                spec.head_classes.len()
            )));
        }
        for (h, (label, &k)) in t.iter().zip(&spec.head_classes).enumerate() {
            if let Some(c) = label {
                if *c >= k {
                    return Err(Error::Contract(format!(
                        "target {i} head {h} label {c} outside 0..{k}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn check_sizes(images: &[&VuImage], preprocess: &PreprocessConfig) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        if img.size() != preprocess.target_size {
            return Err(Error::Contract(format!(
                "image {i} is {:?}, model expects {:?}",
                img.size(),
                preprocess.target_size
            )));
        }
    }
    Ok(())
}

/// Trains a classifier. Deterministic given `spec.seed` for the baseline
/// backend.
pub fn fit(
    images: &[&VuImage],
    targets: &[Target],
    spec: &ClassifierSpec,
    preprocess: &PreprocessConfig,
) -> Result<TrainedClassifier> {
    check_training_set(images, targets, spec)?;
    preprocess.validate()?;
    check_sizes(images, preprocess)?;
    let weights = class_weights(spec, targets);
    let model = match spec.kind {
        BackendKind::Baseline => {
            Model::Baseline(LogisticModel::fit(images, targets, spec, &weights)?)
        }
        #[cfg(feature = "deep")]
        BackendKind::Deep => Model::Deep(ResNetClassifier::fit(
            images, targets, spec, preprocess, &weights,
        )?),
        #[cfg(not(feature = "deep"))]
        BackendKind::Deep => {
            return Err(Error::Config(
                "this build does not include the deep backend".into(),
            ))
        }
    };
    Ok(TrainedClassifier {
        spec: spec.clone(),
        preprocess: preprocess.clone(),
        model,
    })
}

/// Per-image, per-head class probabilities, in input order.
pub fn predict_dist(
    model: &TrainedClassifier,
    images: &[&VuImage],
) -> Result<Vec<HeadDistributions>> {
    model.predict_dist(images)
}

impl TrainedClassifier {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn predict_dist(&self, images: &[&VuImage]) -> Result<Vec<HeadDistributions>> {
        check_sizes(images, &self.preprocess)?;
        match &self.model {
            Model::Baseline(m) => Ok(m.predict(images)),
            #[cfg(feature = "deep")]
            Model::Deep(m) => m.predict(images, &self.preprocess),
        }
    }

    /// Serialized parameters; the format depends on the backend.
    pub fn parameter_bytes(&self) -> Result<Vec<u8>> {
        match &self.model {
            Model::Baseline(m) => Ok(m.to_bytes()),
            #[cfg(feature = "deep")]
            Model::Deep(m) => m.to_bytes(),
        }
    }

    pub fn from_parts(
        spec: ClassifierSpec,
        preprocess: PreprocessConfig,
        params: &[u8],
    ) -> Result<Self> {
        spec.validate()?;
        let model = match spec.kind {
            BackendKind::Baseline => Model::Baseline(LogisticModel::from_bytes(params)?),
            #[cfg(feature = "deep")]
            BackendKind::Deep => {
                Model::Deep(ResNetClassifier::from_bytes(params, &spec, &preprocess)?)
            }
            #[cfg(not(feature = "deep"))]
            BackendKind::Deep => {
                return Err(Error::Config(
                    "this build does not include the deep backend".into(),
                ))
            }
        };
        let model = Self {
            spec,
            preprocess,
            model,
        };
        model.check_arity()?;
        Ok(model)
    }

    fn check_arity(&self) -> Result<()> {
        let heads = match &self.model {
            Model::Baseline(m) => m.head_classes(),
            #[cfg(feature = "deep")]
            Model::Deep(m) => m.head_classes(),
        };
        if heads != self.spec.head_classes {
            return Err(Error::Artifact(format!(
                "parameters have heads {heads:?}, spec declares {:?}",
                self.spec.head_classes
            )));
        }
        Ok(())
    }

    /// Writes `spec.json`, `params.bin` and `preprocess.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let artifact = ArtifactSpec {
            format_version: ARTIFACT_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: self.spec.clone(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(SPEC_FILE, &serde_json::to_vec_pretty(&artifact)?)?;
        write(PARAMS_FILE, &self.parameter_bytes()?)?;
        write(
            PREPROCESS_FILE,
            &serde_json::to_vec_pretty(&self.preprocess)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(path, e))
        };
        let artifact: ArtifactSpec = serde_json::from_slice(&read(SPEC_FILE)?)?;
        if artifact.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "artifact format {} is not supported (expected {ARTIFACT_FORMAT_VERSION})",
                artifact.format_version
            )));
        }
        let preprocess: PreprocessConfig = serde_json::from_slice(&read(PREPROCESS_FILE)?)?;
        Self::from_parts(artifact.spec, preprocess, &read(PARAMS_FILE)?)
    }
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}
