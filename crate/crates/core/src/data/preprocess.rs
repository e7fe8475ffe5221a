use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::data::VuImage;
use crate::error::{Error, Result};

/// Intensity normalization applied to a decoded VU crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Normalization {
    /// Stretch each image to span `[0, 1]`; constant images map to 0.5.
    MinMax,
    /// Keep bit-depth scaled intensities; backends standardize with the
    /// given statistics when building their input tensors.
    FixedMeanStd { mean: f32, std: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// `(height, width)` in pixels.
    pub target_size: (usize, usize),
    pub normalization: Normalization,
    /// Replicate grayscale into three channels for pretrained backbones.
    pub channel_replication: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: (224, 224),
            normalization: Normalization::MinMax,
            channel_replication: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target_size;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "target_size must be positive, got {h}x{w}"
            )));
        }
        if let Normalization::FixedMeanStd { std, .. } = self.normalization {
            if std.is_nan() || std <= 0.0 {
                return Err(Error::Config(format!(
                    "normalization std must be > 0, got {std}"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.channel_replication {
            3
        } else {
            1
        }
    }

    /// Maps a stored `[0, 1]` intensity to the value fed to a network.
    pub fn standardize(&self, value: f32) -> f32 {
        match self.normalization {
            Normalization::MinMax => value,
            Normalization::FixedMeanStd { mean, std } => (value - mean) / std,
        }
    }
}

const CONSTANT_RANGE_EPS: f32 = 1e-6;

/// Decodes an encoded image (PNG 8/16-bit gray or RGB), converts it to
/// luminance, resizes to `cfg.target_size` and normalizes.
pub fn preprocess_image(raw: &[u8], cfg: &PreprocessConfig) -> Result<VuImage> {
    cfg.validate()?;
    let decoded = image::load_from_memory(raw).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let luma = decoded.to_luma32f();
    preprocess_gray(luma.as_raw(), h, w, cfg)
}

/// Same as [`preprocess_image`] for an already decoded row-major grayscale
/// grid with intensities in `[0, 1]`.
pub fn preprocess_gray(
    gray: &[f32],
    height: usize,
    width: usize,
    cfg: &PreprocessConfig,
) -> Result<VuImage> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput(format!(
            "zero-area image ({height}x{width})"
        )));
    }
    if gray.len() != height * width {
        return Err(Error::InvalidInput(format!(
            "pixel buffer has {} values, expected {}",
            gray.len(),
            height * width
        )));
    }
    let (th, tw) = cfg.target_size;
    let mut pixels = if (th, tw) == (height, width) {
        gray.to_vec()
    } else {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(width as u32, height as u32, gray.to_vec())
                .expect("buffer length checked above");
        imageops::resize(&buf, tw as u32, th as u32, FilterType::Triangle).into_raw()
    };

    match cfg.normalization {
        Normalization::MinMax => {
            let (lo, hi) = pixels
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
                    (lo.min(p), hi.max(p))
                });
            let range = hi - lo;
            if range < CONSTANT_RANGE_EPS {
                pixels.iter_mut().for_each(|p| *p = 0.5);
            } else {
                pixels
                    .iter_mut()
                    .for_each(|p| *p = ((*p - lo) / range).clamp(0.0, 1.0));
            }
        }
        Normalization::FixedMeanStd { .. } => {
            pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        }
    }
    VuImage::new(th, tw, pixels, (height, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
    use proptest::prelude::*;
    use std::io::Cursor;

    fn encode_png(img: image::DynamicImage) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn constant_white_maps_to_half() {
        let img = GrayImage::from_pixel(40, 30, Luma([255u8]));
        let bytes = encode_png(img.into());
        let out = preprocess_image(&bytes, &PreprocessConfig::default()).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn resizes_to_target() {
        // 100 rows x 80 columns
        let img = GrayImage::from_fn(80, 100, |x, y| Luma([((x + y) % 256) as u8]));
        let out = preprocess_image(&encode_png(img.into()), &PreprocessConfig::default()).unwrap();
        assert_eq!(out.size(), (224, 224));
        assert_eq!(out.original_size(), (100, 80));
    }

    #[test]
    fn deterministic_for_identical_bytes() {
        let img = RgbImage::from_fn(50, 37, |x, y| Rgb([(x * 5) as u8, (y * 3) as u8, 17]));
        let bytes = encode_png(img.into());
        let cfg = PreprocessConfig::default();
        let a = preprocess_image(&bytes, &cfg).unwrap();
        let b = preprocess_image(&bytes, &cfg).unwrap();
        let bits = |im: &VuImage| im.pixels().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sixteen_bit_gray_is_scaled() {
        let img =
            image::ImageBuffer::<Luma<u16>, _>::from_fn(4, 4, |x, _| Luma([x as u16 * 20000]));
        let bytes = encode_png(image::DynamicImage::ImageLuma16(img));
        let cfg = PreprocessConfig {
            target_size: (4, 4),
            normalization: Normalization::FixedMeanStd {
                mean: 0.5,
                std: 0.25,
            },
            channel_replication: false,
        };
        let out = preprocess_image(&bytes, &cfg).unwrap();
        let expected = 60000.0 / 65535.0;
        assert!((out.get(0, 3) - expected).abs() < 1e-5);
    }

    #[test]
    fn garbage_bytes_fail_to_decode() {
        let err = preprocess_image(b"not an image", &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Decode(_)));
    }

    #[test]
    fn zero_area_is_rejected() {
        let err = preprocess_gray(&[], 0, 5, &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn zero_target_is_config_error() {
        let cfg = PreprocessConfig {
            target_size: (0, 10),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn output_stays_in_unit_range(
            h in 1usize..40,
            w in 1usize..40,
            seed in any::<u64>(),
            th in 1usize..48,
            tw in 1usize..48,
            minmax in any::<bool>(),
        ) {
            let mut state = seed | 1;
            let gray: Vec<f32> = (0..h * w)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state % 1000) as f32 / 999.0
                })
                .collect();
            let cfg = PreprocessConfig {
                target_size: (th, tw),
                normalization: if minmax {
                    Normalization::MinMax
                } else {
                    Normalization::FixedMeanStd { mean: 0.45, std: 0.22 }
                },
                channel_replication: true,
            };
            let out = preprocess_gray(&gray, h, w, &cfg).unwrap();
            prop_assert_eq!(out.size(), (th, tw));
            prop_assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
