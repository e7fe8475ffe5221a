use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{preprocess_image, PreprocessConfig, VuImage, VuRecord};
use crate::error::{Error, Result};

/// Preprocessed images keyed by `vu_id`.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    images: HashMap<String, VuImage>,
}

impl ImageSet {
    pub fn insert(&mut self, vu_id: impl Into<String>, image: VuImage) {
        self.images.insert(vu_id.into(), image);
    }

    pub fn get(&self, record: &VuRecord) -> Result<&VuImage> {
        self.images
            .get(&record.vu_id)
            .ok_or_else(|| Error::InvalidInput(format!("no image loaded for {}", record.vu_id)))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads and preprocesses every record's image. Relative `image_ref`s
    /// resolve against `base_dir`, normally the manifest's directory.
    pub fn load(
        records: &[VuRecord],
        base_dir: impl AsRef<Path>,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        let base_dir = base_dir.as_ref();
        let images = records
            .par_iter()
            .map(|r| {
                let path = base_dir.join(&r.image_ref);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let image = preprocess_image(&bytes, cfg).map_err(|e| match e {
                    Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
                    other => other,
                })?;
                Ok((r.vu_id.clone(), image))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { images })
    }
}

impl FromIterator<(String, VuImage)> for ImageSet {
    fn from_iter<I: IntoIterator<Item = (String, VuImage)>>(iter: I) -> Self {
        Self {
            images: iter.into_iter().collect(),
        }
    }
}
