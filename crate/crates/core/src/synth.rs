//! Deterministic synthetic VU corpus.
//!
//! Each image shows two bright vertebral bodies separated by a dark disc
//! gap. The scored corners sit on the anterior (right) edge where the
//! bodies face each other. Grade 0 leaves the corner square, grade 1 cuts
//! a small notch, grade 2 adds a spur reaching partway into the gap and
//! grade 3 draws a bridge joining both bodies.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, MsasssScore, Region, VuImage, VuRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Smallest image side for which spurs from opposite corners stay
/// separated after rasterization.
pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_vus: usize,
    pub n_patients: usize,
    /// Corner-grade probabilities for grades 0..=3.
    pub prevalence: [f64; NUM_CLASSES],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub noise_std: f64,
    /// Maximum absolute tilt in degrees.
    pub rotation_jitter: f64,
    pub seed: u64,
    pub study_id: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_vus: 2000,
            n_patients: 400,
            prevalence: [0.85, 0.05, 0.07, 0.03],
            image_size: (64, 64),
            noise_std: 0.03,
            rotation_jitter: 3.0,
            seed: 0,
            study_id: "synthetic".into(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vus == 0 {
            return Err(Error::Config("n_vus must be positive".into()));
        }
        if self.n_patients == 0 || self.n_patients > self.n_vus {
            return Err(Error::Config(format!(
                "n_patients must be in 1..={}, got {}",
                self.n_vus, self.n_patients
            )));
        }
        if self.prevalence.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::Config(
                "prevalence entries must be non-negative".into(),
            ));
        }
        let total: f64 = self.prevalence.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "prevalence sums to {total}, expected 1"
            )));
        }
        let (h, w) = self.image_size;
        if h.min(w) < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image_size {h}x{w} is below the {MIN_IMAGE_SIDE}px minimum"
            )));
        }
        if self.noise_std.is_nan()
            || self.noise_std < 0.0
            || self.rotation_jitter.is_nan()
            || self.rotation_jitter < 0.0
        {
            return Err(Error::Config(
                "noise_std and rotation_jitter must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image rendering parameters. Patient-level fields are shared by all
/// VUs of a synthetic patient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub body_intensity: f32,
    pub background: f32,
    /// Tilt in degrees, counter-clockwise.
    pub rotation_deg: f64,
    /// Offset of the VU centre in pixels.
    pub shift: (f64, f64),
    /// Multiplier on the notch size.
    pub feature_scale: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            body_intensity: 0.85,
            background: 0.1,
            rotation_deg: 0.0,
            shift: (0.0, 0.0),
            feature_scale: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

// Geometry in body-frame coordinates normalized by image width (u) and
// height (v).
const BODY_LEFT: f64 = 0.18;
const ANTERIOR: f64 = 0.82;
const UPPER_TOP: f64 = 0.08;
const UPPER_JUNCTION: f64 = 0.42;
const LOWER_JUNCTION: f64 = 0.58;
const LOWER_BOTTOM: f64 = 0.92;
const NOTCH: f64 = 0.10;
const SPUR_U: (f64, f64) = (0.72, 0.86);
const SPUR_OVERLAP: f64 = 0.02;
const SPUR_DEPTH: f64 = 0.055;
const BRIDGE_U: (f64, f64) = (0.68, 0.87);
const BRIDGE_V: (f64, f64) = (0.30, 0.70);

fn inside(x: f64, (lo, hi): (f64, f64)) -> bool {
    x >= lo && x <= hi
}

fn bright_at(u: f64, v: f64, upper: MsasssScore, lower: MsasssScore, notch: f64) -> bool {
    let in_cols = inside(u, (BODY_LEFT, ANTERIOR));
    let mut bright = in_cols
        && (inside(v, (UPPER_TOP, UPPER_JUNCTION)) || inside(v, (LOWER_JUNCTION, LOWER_BOTTOM)));

    let notch_u = (ANTERIOR - notch, ANTERIOR);
    if upper.value() == 1
        && inside(u, notch_u)
        && inside(v, (UPPER_JUNCTION - notch, UPPER_JUNCTION))
    {
        bright = false;
    }
    if lower.value() == 1
        && inside(u, notch_u)
        && inside(v, (LOWER_JUNCTION, LOWER_JUNCTION + notch))
    {
        bright = false;
    }
    if upper.value() == 2
        && inside(u, SPUR_U)
        && inside(
            v,
            (UPPER_JUNCTION - SPUR_OVERLAP, UPPER_JUNCTION + SPUR_DEPTH),
        )
    {
        bright = true;
    }
    if lower.value() == 2
        && inside(u, SPUR_U)
        && inside(
            v,
            (LOWER_JUNCTION - SPUR_DEPTH, LOWER_JUNCTION + SPUR_OVERLAP),
        )
    {
        bright = true;
    }
    if (upper.is_bridge() || lower.is_bridge()) && inside(u, BRIDGE_U) && inside(v, BRIDGE_V) {
        bright = true;
    }
    bright
}

/// Rasterizes one VU. With `noise_std == 0` every pixel is either the
/// background or the body intensity.
pub fn render_vu(
    upper: MsasssScore,
    lower: MsasssScore,
    style: &RenderStyle,
    size: (usize, usize),
) -> VuImage {
    let (h, w) = size;
    let (hf, wf) = (h as f64, w as f64);
    let theta = style.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = wf / 2.0 + style.shift.0;
    let cy = hf / 2.0 + style.shift.1;
    let notch = NOTCH * style.feature_scale;

    let mut pixels = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let x = col as f64 + 0.5 - cx;
            let y = row as f64 + 0.5 - cy;
            let xr = cos * x + sin * y;
            let yr = -sin * x + cos * y;
            let (u, v) = (xr / wf + 0.5, yr / hf + 0.5);
            pixels.push(if bright_at(u, v, upper, lower, notch) {
                style.body_intensity
            } else {
                style.background
            });
        }
    }

    if style.noise_std > 0.0 {
        let normal = Normal::new(0.0, style.noise_std).expect("noise_std checked non-negative");
        let mut rng = rng::stream(style.noise_seed, domain::SYNTH_SAMPLE, u64::MAX);
        for p in &mut pixels {
            *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    VuImage::new(h, w, pixels, size).expect("rendered intensities lie in [0, 1]")
}

/// One generated VU before it is written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub record: VuRecord,
    pub style: RenderStyle,
    pub image: VuImage,
}

fn draw_grade<R: Rng>(prevalence: &[f64; NUM_CLASSES], rng: &mut R) -> MsasssScore {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in prevalence.iter().enumerate() {
        acc += p;
        if x < acc {
            return MsasssScore::from_index(c);
        }
    }
    // x landed in the rounding slack above the cumulative sum
    let last = prevalence.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    MsasssScore::from_index(last)
}

fn patient_style(cfg: &SyntheticConfig, patient: usize) -> (f32, f32, f64) {
    let mut rng = rng::stream(cfg.seed, domain::SYNTH_PATIENT, patient as u64);
    let body = rng.random_range(0.70..0.95f32);
    let background = rng.random_range(0.05..0.15f32);
    let tilt = rng.random_range(-0.5..=0.5) * cfg.rotation_jitter;
    (body, background, tilt)
}

/// Index of the patient owning VU `index`; patients get contiguous blocks.
fn patient_of(cfg: &SyntheticConfig, index: usize) -> usize {
    index * cfg.n_patients / cfg.n_vus
}

pub fn image_ref_for(index: usize) -> String {
    format!("images/vu{index:05}.png")
}

fn sample(cfg: &SyntheticConfig, index: usize) -> SyntheticSample {
    let patient = patient_of(cfg, index);
    let (body, background, tilt) = patient_style(cfg, patient);

    let mut labels = rng::stream(cfg.seed, domain::SYNTH_LABEL, index as u64);
    let upper = draw_grade(&cfg.prevalence, &mut labels);
    let lower = draw_grade(&cfg.prevalence, &mut labels);

    let mut rng = rng::stream(cfg.seed, domain::SYNTH_SAMPLE, index as u64);
    let side = cfg.image_size.0.min(cfg.image_size.1) as f64;
    let max_shift = 1.5 * side / 64.0;
    let style = RenderStyle {
        body_intensity: (body + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0),
        background,
        rotation_deg: tilt + rng.random_range(-0.5..=0.5) * cfg.rotation_jitter,
        shift: (
            rng.random_range(-max_shift..=max_shift),
            rng.random_range(-max_shift..=max_shift),
        ),
        feature_scale: rng.random_range(0.9..=1.1),
        noise_std: cfg.noise_std,
        noise_seed: rng.random(),
    };
    let region = if rng.random_bool(0.5) {
        Region::Cervical
    } else {
        Region::Lumbar
    };
    let record = VuRecord {
        vu_id: format!("vu{index:05}"),
        patient_id: format!("p{patient:05}"),
        study_id: cfg.study_id.clone(),
        region: Some(region),
        image_ref: image_ref_for(index),
        upper_label: Some(upper),
        lower_label: Some(lower),
    };
    let image = render_vu(upper, lower, &style, cfg.image_size);
    SyntheticSample {
        record,
        style,
        image,
    }
}

/// Generates the corpus in memory. Each sample depends only on
/// `(cfg.seed, index)`, so parallel generation is schedule independent.
pub fn generate_samples(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    Ok((0..cfg.n_vus)
        .into_par_iter()
        .map(|i| sample(cfg, i))
        .collect())
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: &'static str,
    version: &'static str,
    config: &'a SyntheticConfig,
}

/// Encodes an image as 16-bit grayscale PNG.
pub fn encode_png16(image: &VuImage) -> Result<Vec<u8>> {
    let data: Vec<u16> = image
        .pixels()
        .iter()
        .map(|&p| (p as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data)
            .expect("dimensions match pixel count");
    let mut out = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes `manifest.csv`, `images/*.png` and `provenance.json` under
/// `out_dir` and returns the records.
pub fn generate_corpus(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<Vec<VuRecord>> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(cfg)?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    samples.par_iter().try_for_each(|s| {
        let path = out_dir.join(&s.record.image_ref);
        let bytes = encode_png16(&s.image)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    })?;

    let records: Vec<VuRecord> = samples.into_iter().map(|s| s.record).collect();
    write_manifest(out_dir.join("manifest.csv"), &records)?;
    let provenance = Provenance {
        generator: "vugrade-synth",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let path = out_dir.join("provenance.json");
    fs::write(&path, serde_json::to_vec_pretty(&provenance)?).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
