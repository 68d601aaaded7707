//! Disk-backed image provider for the VQA commands, where samples are
//! addressed by path (several QA pairs may share one image).

use std::path::PathBuf;

use omae_core::data::{center_crop_normalize, load_image, to_rgb3, Normalize, IMAGENET_NORM};
use omae_core::mae::ImageProvider;
use omae_core::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Serves normalized `3×S×S` tensors for an explicit list of image paths
/// (relative to `root`). Evaluation-style preprocessing only: shorter-side
/// center crop, no augmentation.
pub struct PathProvider {
    pub root: PathBuf,
    pub paths: Vec<String>,
    pub image_size: usize,
    pub norm: Normalize,
}

impl PathProvider {
    pub fn new(root: PathBuf, paths: Vec<String>, image_size: usize) -> Self {
        PathProvider { root, paths, image_size, norm: IMAGENET_NORM }
    }

    pub fn load(&self, path: &str) -> Result<Vec<f32>> {
        let (raw, c, h, w) = load_image(&self.root.join(path))?;
        let rgb = to_rgb3(&raw, c, h, w)?;
        center_crop_normalize(&rgb, 3, h, w, self.image_size, &self.norm)
    }
}

impl ImageProvider for PathProvider {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn fetch(&self, idx: usize, _augment: bool, _rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let path = self
            .paths
            .get(idx)
            .ok_or_else(|| Error::Data(format!("image index {idx} out of range")))?;
        self.load(path)
    }
}
