//! Domain types for vertebral units, manifest ingestion, image
//! preprocessing and corpus statistics.

mod images;
mod manifest;
mod preprocess;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use images::ImageSet;
pub use manifest::{
    load_manifest, read_manifest, write_manifest, write_manifest_to, MANIFEST_HEADER,
};
pub use preprocess::{preprocess_gray, preprocess_image, Normalization, PreprocessConfig};
pub use stats::{corpus_stats, CorpusStats};

/// Number of mSASSS grades.
pub const NUM_CLASSES: usize = 4;

/// A single mSASSS corner grade in `0..=3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MsasssScore(u8);

impl MsasssScore {
    pub const NORMAL: Self = Self(0);
    /// Grade 3: a bony bridge across the junction.
    pub const BRIDGE: Self = Self(3);
    pub const ALL: [Self; NUM_CLASSES] = [Self(0), Self(1), Self(2), Self(3)];

    pub fn new(value: u8) -> Option<Self> {
        (value < NUM_CLASSES as u8).then_some(Self(value))
    }

    /// Builds a grade from a class index, panicking on indices above 3.
    pub fn from_index(index: usize) -> Self {
        assert!(
            index < NUM_CLASSES,
            "mSASSS class index {index} out of range"
        );
        Self(index as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_bridge(self) -> bool {
        self == Self::BRIDGE
    }
}

impl TryFrom<u8> for MsasssScore {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
            .ok_or_else(|| Error::InvalidInput(format!("mSASSS grade {value} is not in 0..=3")))
    }
}

impl From<MsasssScore> for u8 {
    fn from(score: MsasssScore) -> u8 {
        score.0
    }
}

impl fmt::Display for MsasssScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which of the two scored anterior corners of a VU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CornerSite {
    Upper,
    Lower,
}

impl CornerSite {
    pub const ALL: [CornerSite; 2] = [CornerSite::Upper, CornerSite::Lower];

    pub fn as_str(self) -> &'static str {
        match self {
            CornerSite::Upper => "upper",
            CornerSite::Lower => "lower",
        }
    }

    /// Head index in two-headed stage-2 models.
    pub fn head(self) -> usize {
        match self {
            CornerSite::Upper => 0,
            CornerSite::Lower => 1,
        }
    }
}

impl fmt::Display for CornerSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CornerSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upper" => Ok(CornerSite::Upper),
            "lower" => Ok(CornerSite::Lower),
            other => Err(Error::InvalidInput(format!(
                "unknown corner site `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Cervical,
    Lumbar,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Cervical => "cervical",
            Region::Lumbar => "lumbar",
        }
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cervical" => Ok(Region::Cervical),
            "lumbar" => Ok(Region::Lumbar),
            other => Err(Error::InvalidInput(format!("unknown region `{other}`"))),
        }
    }
}

/// One vertebral unit with its identity, image location and optional
/// per-corner ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VuRecord {
    pub vu_id: String,
    pub patient_id: String,
    pub study_id: String,
    pub region: Option<Region>,
    pub image_ref: String,
    pub upper_label: Option<MsasssScore>,
    pub lower_label: Option<MsasssScore>,
}

impl VuRecord {
    pub fn label(&self, site: CornerSite) -> Option<MsasssScore> {
        match site {
            CornerSite::Upper => self.upper_label,
            CornerSite::Lower => self.lower_label,
        }
    }

    pub fn labels(&self) -> [(CornerSite, Option<MsasssScore>); 2] {
        [
            (CornerSite::Upper, self.upper_label),
            (CornerSite::Lower, self.lower_label),
        ]
    }

    /// Highest present corner grade, `None` for inference-only records.
    pub fn max_label(&self) -> Option<MsasssScore> {
        self.upper_label.max(self.lower_label)
    }

    pub fn is_labeled(&self) -> bool {
        self.upper_label.is_some() || self.lower_label.is_some()
    }
}

/// A preprocessed single-channel VU crop, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VuImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    original_size: (usize, usize),
}

impl VuImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        original_size: (usize, usize),
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must have positive area, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "expected {} pixels for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            original_size,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn original_size(&self) -> (usize, usize) {
        self.original_size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_rejects_out_of_range() {
        assert!(MsasssScore::new(4).is_none());
        assert!(MsasssScore::try_from(7u8).is_err());
        assert_eq!(MsasssScore::new(3), Some(MsasssScore::BRIDGE));
    }

    #[test]
    fn score_serde_is_numeric() {
        let json = serde_json::to_string(&MsasssScore::new(2).unwrap()).unwrap();
        assert_eq!(json, "2");
        assert!(serde_json::from_str::<MsasssScore>("5").is_err());
    }

    #[test]
    fn max_label_ignores_absent() {
        let rec = VuRecord {
            vu_id: "v".into(),
            patient_id: "p".into(),
            study_id: String::new(),
            region: None,
            image_ref: "a.png".into(),
            upper_label: None,
            lower_label: MsasssScore::new(1),
        };
        assert_eq!(rec.max_label(), MsasssScore::new(1));
    }

    #[test]
    fn image_rejects_zero_area_and_out_of_range() {
        assert!(VuImage::new(0, 3, vec![], (0, 3)).is_err());
        assert!(VuImage::new(1, 1, vec![1.5], (1, 1)).is_err());
        assert!(VuImage::new(1, 2, vec![0.0, 1.0], (1, 2)).is_ok());
    }
}
