//! Multinomial logistic regression over area-downsampled pixel intensities.
//!
//! The objective is convex, so weights start at zero and full-batch Adam
//! makes training a pure function of the data and the spec. Gradients are
//! accumulated over fixed-size chunks and summed in chunk order, which
//! keeps results independent of the thread count.

use rayon::prelude::*;

use crate::backend::{softmax_in_place, ClassifierSpec, HeadDistributions, Target};
use crate::data::VuImage;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VULR";
const FORMAT: u32 = 1;
const CHUNK: usize = 64;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-axis overlap weights mapping `src` cells onto `dst` cells.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let step = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / step))
                })
                .collect()
        })
        .collect()
}

/// Area-averages an image onto a `grid x grid` lattice, row-major.
pub fn downsample(image: &VuImage, grid: usize) -> Vec<f64> {
    let rows = axis_weights(image.height(), grid);
    let cols = axis_weights(image.width(), grid);
    let mut out = Vec::with_capacity(grid * grid);
    for rw in &rows {
        for cw in &cols {
            let mut acc = 0.0;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    acc += wr * wc * image.get(r, c) as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    classes: usize,
    /// Row-major `classes x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    grid: usize,
    mean: Vec<f64>,
    /// Reciprocal standard deviation per feature (1 for constant features).
    scale: Vec<f64>,
    heads: Vec<Head>,
}

impl LogisticModel {
    pub fn head_classes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.classes).collect()
    }

    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn features(&self, image: &VuImage) -> Vec<f64> {
        let mut x = downsample(image, self.grid);
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) * s;
        }
        x
    }

    fn head_probs(head: &Head, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let mut logits: Vec<f64> = (0..head.classes)
            .map(|k| {
                let row = &head.weights[k * dim..(k + 1) * dim];
                head.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut logits);
        logits
    }

    pub(crate) fn fit(
        images: &[&VuImage],
        targets: &[Target],
        spec: &ClassifierSpec,
        class_weights: &[Vec<f64>],
    ) -> Result<Self> {
        let grid = spec.baseline.feature_grid;
        let dim = grid * grid;
        let raw: Vec<Vec<f64>> = images.par_iter().map(|img| downsample(img, grid)).collect();

        let n = raw.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in &raw {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in &raw {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let std = (s / n).sqrt();
                if std > 1e-12 {
                    1.0 / std
                } else {
                    1.0
                }
            })
            .collect();
        let features: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|mut x| {
                for ((v, m), s) in x.iter_mut().zip(&mean).zip(&scale) {
                    *v = (*v - m) * s;
                }
                x
            })
            .collect();

        let mut model = LogisticModel {
            grid,
            mean,
            scale,
            heads: spec
                .head_classes
                .iter()
                .map(|&k| Head {
                    classes: k,
                    weights: vec![0.0; k * dim],
                    bias: vec![0.0; k],
                })
                .collect(),
        };

        // per-head normalizer: total loss weight of present labels
        let norms: Vec<f64> = (0..spec.head_classes.len())
            .map(|h| {
                targets
                    .iter()
                    .filter_map(|t| t[h].map(|c| class_weights[h][c]))
                    .sum::<f64>()
            })
            .collect();

        let n_params: usize = model.heads.iter().map(|h| h.classes * (dim + 1)).sum();
        let mut m1 = vec![0.0; n_params];
        let mut m2 = vec![0.0; n_params];
        for step in 1..=spec.epochs {
            let mut grad = model.gradient(&features, targets, class_weights, &norms);
            // L2 on weights only
            let mut offset = 0;
            for head in &model.heads {
                for (g, w) in grad[offset..offset + head.weights.len()]
                    .iter_mut()
                    .zip(&head.weights)
                {
                    *g += spec.baseline.l2 * w;
                }
                offset += head.weights.len() + head.bias.len();
            }

            let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
            let mut offset = 0;
            for head in &mut model.heads {
                for p in head.weights.iter_mut().chain(head.bias.iter_mut()) {
                    let g = grad[offset];
                    m1[offset] = ADAM_BETA1 * m1[offset] + (1.0 - ADAM_BETA1) * g;
                    m2[offset] = ADAM_BETA2 * m2[offset] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m1[offset] / bc1;
                    let v_hat = m2[offset] / bc2;
                    *p -= spec.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    offset += 1;
                }
            }
            grad.clear();
        }
        Ok(model)
    }

    /// Gradient of the weighted mean cross-entropy, flattened head by head
    /// as `[weights..., bias...]`.
    fn gradient(
        &self,
        features: &[Vec<f64>],
        targets: &[Target],
        class_weights: &[Vec<f64>],
        norms: &[f64],
    ) -> Vec<f64> {
        let dim = self.dim();
        let n_params: usize = self.heads.iter().map(|h| h.classes * (dim + 1)).sum();
        let partials: Vec<Vec<f64>> = features
            .par_chunks(CHUNK)
            .zip(targets.par_chunks(CHUNK))
            .map(|(xs, ts)| {
                let mut g = vec![0.0; n_params];
                for (x, t) in xs.iter().zip(ts) {
                    let mut offset = 0;
                    for (h, head) in self.heads.iter().enumerate() {
                        let span = head.classes * (dim + 1);
                        if let Some(y) = t[h] {
                            let p = Self::head_probs(head, x);
                            let w = class_weights[h][y] / norms[h];
                            for k in 0..head.classes {
                                let coef = w * (p[k] - if k == y { 1.0 } else { 0.0 });
                                let row = &mut g[offset + k * dim..offset + (k + 1) * dim];
                                for (gj, xj) in row.iter_mut().zip(x) {
                                    *gj += coef * xj;
                                }
                                g[offset + head.classes * dim + k] += coef;
                            }
                        }
                        offset += span;
                    }
                }
                g
            })
            .collect();
        let mut total = vec![0.0; n_params];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }

    pub(crate) fn predict(&self, images: &[&VuImage]) -> Vec<HeadDistributions> {
        images
            .par_iter()
            .map(|img| {
                let x = self.features(img);
                self.heads.iter().map(|h| Self::head_probs(h, &x)).collect()
            })
            .collect()
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT,
            self.grid as u32,
            self.dim() as u32,
            self.heads.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put = |xs: &[f64]| {
            xs.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        put(&self.mean);
        put(&self.scale);
        for head in &self.heads {
            out.extend_from_slice(&(head.classes as u32).to_le_bytes());
            out.extend(
                head.weights
                    .iter()
                    .chain(&head.bias)
                    .flat_map(|x| x.to_le_bytes()),
            );
        }
        out
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(Error::Artifact(
                "baseline parameters have the wrong magic".into(),
            ));
        }
        let format = reader.u32()?;
        if format != FORMAT {
            return Err(Error::Artifact(format!(
                "baseline parameter format {format} unsupported"
            )));
        }
        let grid = reader.u32()? as usize;
        let dim = reader.u32()? as usize;
        if dim != grid * grid {
            return Err(Error::Artifact(format!(
                "feature dim {dim} does not match grid {grid}"
            )));
        }
        let n_heads = reader.u32()? as usize;
        let mean = reader.f64s(dim)?;
        let scale = reader.f64s(dim)?;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let classes = reader.u32()? as usize;
            let weights = reader.f64s(classes * dim)?;
            let bias = reader.f64s(classes)?;
            heads.push(Head {
                classes,
                weights,
                bias,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::Artifact(
                "trailing bytes after baseline parameters".into(),
            ));
        }
        Ok(Self {
            grid,
            mean,
            scale,
            heads,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Artifact("baseline parameters are truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Artifact("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
