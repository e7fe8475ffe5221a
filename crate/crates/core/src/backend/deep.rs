//! Bottleneck residual network on candle, CPU only.
//!
//! Parameter names follow the torchvision ResNet layout (`conv1.weight`,
//! `layer3.17.bn2.running_var`, ...) so pretrained safetensors exports
//! load directly. The classification layer is replaced by one linear head
//! per output, named `heads.{h}.weight` / `heads.{h}.bias`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::{ClassifierSpec, HeadDistributions, Target};
use crate::data::{PreprocessConfig, VuImage};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

const EXPANSION: usize = 4;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He normal with `std = sqrt(2 / fan_out)`.
    Kaiming {
        fan_out: usize,
    },
    Uniform {
        bound: f64,
    },
    Const(f32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Architecture {
    layers: [usize; 4],
    base_width: usize,
    in_channels: usize,
    head_classes: Vec<usize>,
}

impl Architecture {
    fn from_spec(spec: &ClassifierSpec, preprocess: &PreprocessConfig) -> Self {
        Self {
            layers: spec.deep.layers,
            base_width: spec.deep.base_width,
            in_channels: preprocess.channels(),
            head_classes: spec.head_classes.clone(),
        }
    }

    fn feature_dim(&self) -> usize {
        self.base_width * 8 * EXPANSION
    }

    /// Every parameter and buffer with its shape and initializer, in a
    /// fixed order.
    fn parameters(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: String, o: usize, i: usize, k: usize| {
            out.push((name, vec![o, i, k, k], Init::Kaiming { fan_out: o * k * k }));
        };
        let bn = |out: &mut Vec<_>, prefix: String, c: usize| {
            out.push((format!("{prefix}.weight"), vec![c], Init::Const(1.0)));
            out.push((format!("{prefix}.bias"), vec![c], Init::Const(0.0)));
            out.push((format!("{prefix}.running_mean"), vec![c], Init::Const(0.0)));
            out.push((format!("{prefix}.running_var"), vec![c], Init::Const(1.0)));
        };
        let w = self.base_width;
        conv(&mut out, "conv1.weight".into(), w, self.in_channels, 7);
        bn(&mut out, "bn1".into(), w);
        let mut inplanes = w;
        for (stage, &blocks) in self.layers.iter().enumerate() {
            let planes = w << stage;
            for b in 0..blocks {
                let p = format!("layer{}.{b}", stage + 1);
                conv(&mut out, format!("{p}.conv1.weight"), planes, inplanes, 1);
                bn(&mut out, format!("{p}.bn1"), planes);
                conv(&mut out, format!("{p}.conv2.weight"), planes, planes, 3);
                bn(&mut out, format!("{p}.bn2"), planes);
                conv(
                    &mut out,
                    format!("{p}.conv3.weight"),
                    planes * EXPANSION,
                    planes,
                    1,
                );
                bn(&mut out, format!("{p}.bn3"), planes * EXPANSION);
                if b == 0 && (stage > 0 || inplanes != planes * EXPANSION) {
                    conv(
                        &mut out,
                        format!("{p}.downsample.0.weight"),
                        planes * EXPANSION,
                        inplanes,
                        1,
                    );
                    bn(&mut out, format!("{p}.downsample.1"), planes * EXPANSION);
                }
                inplanes = planes * EXPANSION;
            }
        }
        let bound = 1.0 / (self.feature_dim() as f64).sqrt();
        for (h, &k) in self.head_classes.iter().enumerate() {
            out.push((
                format!("heads.{h}.weight"),
                vec![k, self.feature_dim()],
                Init::Uniform { bound },
            ));
            out.push((format!("heads.{h}.bias"), vec![k], Init::Uniform { bound }));
        }
        out
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn is_head(name: &str) -> bool {
    name.starts_with("heads.")
}

#[derive(Clone)]
pub struct ResNetClassifier {
    arch: Architecture,
    params: BTreeMap<String, Var>,
}

impl fmt::Debug for ResNetClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResNetClassifier")
            .field("arch", &self.arch)
            .field("n_tensors", &self.params.len())
            .finish()
    }
}

/// Every `stride`-th entry along `dim`, starting at `offset`, `n` entries.
fn strided(x: &Tensor, dim: usize, offset: usize, stride: usize, n: usize) -> Result<Tensor> {
    let x = x.narrow(dim, offset, n * stride)?;
    let mut dims = x.dims().to_vec();
    dims[dim] = n;
    dims.insert(dim + 1, stride);
    Ok(x.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 max pool, stride 2, padding 1, built from shifted slices because
/// candle has no gradient for overlapping pooling windows. Inputs are
/// non-negative after ReLU, so zero padding matches padding with -inf.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let x = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        let rows = strided(&x, 2, di, 2, oh)?;
        for dj in 0..3 {
            let window = strided(&rows, 3, dj, 2, ow)?;
            out = Some(match out {
                Some(m) => m.maximum(&window)?,
                None => window,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

fn init_tensor(shape: &[usize], init: Init, seed: u64, index: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = match init {
        Init::Const(c) => vec![c; n],
        Init::Kaiming { fan_out } => {
            let mut rng = rng::stream(seed, domain::DEEP_INIT, index);
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        }
        Init::Uniform { bound } => {
            let mut rng = rng::stream(seed, domain::DEEP_INIT, index);
            (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect()
        }
    };
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

/// Per-head logits for a batch.
struct Forward {
    logits: Vec<Tensor>,
}

impl ResNetClassifier {
    fn initialize(arch: Architecture, seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (i, (name, shape, init)) in arch.parameters().into_iter().enumerate() {
            let t = init_tensor(&shape, init, seed, i as u64)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self { arch, params })
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.arch.head_classes.clone()
    }

    /// Copies matching backbone tensors from a torchvision-style export.
    /// A 3-channel stem is averaged down when the model takes one channel.
    fn load_pretrained(&mut self, bytes: &[u8]) -> Result<usize> {
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        let mut loaded = 0;
        for (name, var) in &self.params {
            if is_head(name) {
                continue;
            }
            let Some(src) = tensors.get(name) else {
                log::warn!("pretrained weights lack `{name}`; keeping seeded init");
                continue;
            };
            let mut src = src.to_dtype(DType::F32)?;
            if name == "conv1.weight"
                && src.dim(1)? != self.arch.in_channels
                && self.arch.in_channels == 1
            {
                src = src.mean_keepdim(1)?;
            }
            if src.dims() != var.dims() {
                return Err(Error::Artifact(format!(
                    "pretrained `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    fn param(&self, name: &str, track: bool) -> Tensor {
        let var = &self.params[name];
        if track {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        }
    }

    fn batch_norm(&self, x: &Tensor, prefix: &str, train: bool, track: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let weight = self
            .param(&format!("{prefix}.weight"), track)
            .reshape(shape)?;
        let bias = self
            .param(&format!("{prefix}.bias"), track)
            .reshape(shape)?;
        let rm = &self.params[&format!("{prefix}.running_mean")];
        let rv = &self.params[&format!("{prefix}.running_var")];
        let normed = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let n = x.elem_count() / c;
            let unbias = if n > 1 {
                n as f64 / (n - 1) as f64
            } else {
                1.0
            };
            let new_rm = ((rm.as_detached_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let new_rv = ((rv.as_detached_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.detach().flatten_all()? * (BN_MOMENTUM * unbias))?)?;
            rm.set(&new_rm)?;
            rv.set(&new_rv)?;
            centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?
        } else {
            let mean = rm.as_detached_tensor().reshape(shape)?;
            let std = (rv.as_detached_tensor().reshape(shape)? + BN_EPS)?.sqrt()?;
            x.broadcast_sub(&mean)?.broadcast_div(&std)?
        };
        Ok(normed.broadcast_mul(&weight)?.broadcast_add(&bias)?)
    }

    fn conv(
        &self,
        x: &Tensor,
        name: &str,
        padding: usize,
        stride: usize,
        track: bool,
    ) -> Result<Tensor> {
        Ok(x.conv2d(&self.param(name, track), padding, stride, 1, 1)?)
    }

    /// `train` selects batch statistics in normalization layers; `track`
    /// records backbone operations for gradients.
    fn forward(&self, x: &Tensor, train: bool, track: bool) -> Result<Forward> {
        let mut x = self.conv(x, "conv1.weight", 3, 2, track)?;
        x = self.batch_norm(&x, "bn1", train, track)?.relu()?;
        x = max_pool_3x3_s2(&x)?;
        for (stage, &blocks) in self.arch.layers.iter().enumerate() {
            for b in 0..blocks {
                let p = format!("layer{}.{b}", stage + 1);
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                let mut y = self.conv(&x, &format!("{p}.conv1.weight"), 0, 1, track)?;
                y = self
                    .batch_norm(&y, &format!("{p}.bn1"), train, track)?
                    .relu()?;
                y = self.conv(&y, &format!("{p}.conv2.weight"), 1, stride, track)?;
                y = self
                    .batch_norm(&y, &format!("{p}.bn2"), train, track)?
                    .relu()?;
                y = self.conv(&y, &format!("{p}.conv3.weight"), 0, 1, track)?;
                y = self.batch_norm(&y, &format!("{p}.bn3"), train, track)?;
                let shortcut = if self
                    .params
                    .contains_key(&format!("{p}.downsample.0.weight"))
                {
                    let s = self.conv(&x, &format!("{p}.downsample.0.weight"), 0, stride, track)?;
                    self.batch_norm(&s, &format!("{p}.downsample.1"), train, track)?
                } else {
                    x.clone()
                };
                x = (y + shortcut)?.relu()?;
            }
        }
        let features = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let features = if track { features } else { features.detach() };
        let logits = (0..self.arch.head_classes.len())
            .map(|h| {
                let w = self.param(&format!("heads.{h}.weight"), true);
                let b = self.param(&format!("heads.{h}.bias"), true);
                Ok(features.matmul(&w.t()?)?.broadcast_add(&b)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { logits })
    }

    fn input_batch(images: &[&VuImage], preprocess: &PreprocessConfig) -> Result<Tensor> {
        let (h, w) = preprocess.target_size;
        let channels = preprocess.channels();
        let mut data = Vec::with_capacity(images.len() * channels * h * w);
        for img in images {
            let plane: Vec<f32> = img
                .pixels()
                .iter()
                .map(|&v| preprocess.standardize(v))
                .collect();
            for _ in 0..channels {
                data.extend_from_slice(&plane);
            }
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), channels, h, w),
            &Device::Cpu,
        )?)
    }

    /// Class-weighted cross-entropy summed over heads; heads without a
    /// label in the batch add nothing.
    fn loss(
        forward: &Forward,
        targets: &[&Target],
        weights: &[Vec<f64>],
    ) -> Result<Option<Tensor>> {
        let mut total: Option<Tensor> = None;
        for (h, logits) in forward.logits.iter().enumerate() {
            let idx: Vec<u32> = targets.iter().map(|t| t[h].unwrap_or(0) as u32).collect();
            let wts: Vec<f32> = targets
                .iter()
                .map(|t| t[h].map_or(0.0, |c| weights[h][c] as f32))
                .collect();
            let denom: f32 = wts.iter().sum();
            if denom <= 0.0 {
                continue;
            }
            let n = idx.len();
            let idx = Tensor::from_vec(idx, (n, 1), &Device::Cpu)?;
            let wts = Tensor::from_vec(wts, n, &Device::Cpu)?;
            let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
            let picked = logp.gather(&idx, 1)?.squeeze(1)?;
            let head_loss = ((picked * wts)?.sum_all()? * (-1.0 / denom as f64))?;
            total = Some(match total {
                Some(t) => (t + head_loss)?,
                None => head_loss,
            });
        }
        Ok(total)
    }

    pub(crate) fn fit(
        images: &[&VuImage],
        targets: &[Target],
        spec: &ClassifierSpec,
        preprocess: &PreprocessConfig,
        weights: &[Vec<f64>],
    ) -> Result<Self> {
        let arch = Architecture::from_spec(spec, preprocess);
        let mut model = Self::initialize(arch, spec.seed)?;
        match &spec.deep.pretrained {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let n = model.load_pretrained(&bytes)?;
                log::info!("loaded {n} pretrained tensors from {}", path.display());
            }
            None => {
                log::warn!("no pretrained weights configured; training from seeded initialization")
            }
        }

        let frozen = spec.deep.freeze_backbone;
        let trainable: Vec<Var> = model
            .params
            .iter()
            .filter(|(name, _)| !is_buffer(name) && (!frozen || is_head(name)))
            .map(|(_, v)| v.clone())
            .collect();
        let mut opt = AdamW::new(
            trainable,
            ParamsAdamW {
                lr: spec.learning_rate,
                weight_decay: spec.deep.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;

        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 0..spec.epochs {
            rng::shuffle(
                &mut order,
                &mut rng::stream(spec.seed, domain::DEEP_ORDER, epoch as u64),
            );
            let mut epoch_loss = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(spec.deep.batch_size) {
                let batch_images: Vec<&VuImage> = chunk.iter().map(|&i| images[i]).collect();
                let batch_targets: Vec<&Target> = chunk.iter().map(|&i| &targets[i]).collect();
                let x = Self::input_batch(&batch_images, preprocess)?;
                let fwd = model.forward(&x, !frozen, !frozen)?;
                let Some(loss) = Self::loss(&fwd, &batch_targets, weights)? else {
                    continue;
                };
                let value = loss.to_scalar::<f32>()?;
                if !value.is_finite() {
                    return Err(Error::training(
                        "deep",
                        format!("loss became {value} in epoch {epoch}"),
                    ));
                }
                epoch_loss += value as f64;
                steps += 1;
                opt.backward_step(&loss)?;
            }
            log::debug!(
                "epoch {epoch}: mean loss {:.5}",
                epoch_loss / steps.max(1) as f64
            );
        }
        Ok(model)
    }

    pub(crate) fn predict(
        &self,
        images: &[&VuImage],
        preprocess: &PreprocessConfig,
    ) -> Result<Vec<HeadDistributions>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = Self::input_batch(chunk, preprocess)?;
            let fwd = self.forward(&x, false, false)?;
            let probs = fwd
                .logits
                .iter()
                .map(|l| {
                    Ok(candle_nn::ops::softmax(&l.detach(), D::Minus1)?
                        .to_dtype(DType::F64)?
                        .to_vec2::<f64>()?)
                })
                .collect::<Result<Vec<_>>>()?;
            for i in 0..chunk.len() {
                out.push(probs.iter().map(|p| p[i].clone()).collect());
            }
        }
        Ok(out)
    }

    /// safetensors blob with every parameter and buffer.
    pub(crate) fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<(&str, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_detached_tensor()))
            .collect();
        safetensors::serialize(tensors, None)
            .map_err(|e| Error::Artifact(format!("serializing weights: {e}")))
    }

    pub(crate) fn from_bytes(
        bytes: &[u8],
        spec: &ClassifierSpec,
        preprocess: &PreprocessConfig,
    ) -> Result<Self> {
        let mut tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Artifact(format!("reading weights: {e}")))?;
        let head_classes = (0..)
            .map_while(|h| {
                tensors
                    .get(&format!("heads.{h}.bias"))
                    .map(|t| t.dim(0).unwrap_or(0))
            })
            .collect();
        let arch = Architecture {
            head_classes,
            ..Architecture::from_spec(spec, preprocess)
        };
        let mut params = BTreeMap::new();
        for (name, shape, _) in arch.parameters() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Artifact(format!("weights lack `{name}`")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            params.insert(name, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Artifact(format!(
                "unexpected tensor `{extra}` in weights"
            )));
        }
        Ok(Self { arch, params })
    }
}
