//! Dataset plumbing: manifest records, quality filtering, deterministic
//! splitting, and a disk-backed image provider for training loops.

pub mod image_ops;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::ImageProvider;
use crate::rng::rng_from;

pub use image_ops::{
    apply_augment, augment, center_crop_normalize, hflip, load_image, resize_cubic,
    resize_normalize, resize_plane, sample_crop, save_image, threshold_crop, to_rgb3, AugmentCfg,
    Normalize, IMAGENET_NORM,
};

/// The eleven supported imaging modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CFP,
    FFA,
    ICGA,
    FAF,
    RetCam,
    OcularUltrasound,
    OCT,
    SlitLamp,
    ExternalEye,
    SpecularMicroscope,
    CornealTopography,
}

pub const ALL_MODALITIES: [Modality; 11] = [
    Modality::CFP,
    Modality::FFA,
    Modality::ICGA,
    Modality::FAF,
    Modality::RetCam,
    Modality::OcularUltrasound,
    Modality::OCT,
    Modality::SlitLamp,
    Modality::ExternalEye,
    Modality::SpecularMicroscope,
    Modality::CornealTopography,
];

/// Background-crop threshold for a modality (max-over-channels pixels
/// strictly below it count as background).
pub fn crop_threshold_for(m: Modality) -> u8 {
    match m {
        Modality::CFP => 15,
        Modality::OCT => 30,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

/// One image entry in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Image path, relative to the manifest's directory.
    pub path: String,
    pub modality: Modality,
    #[serde(default)]
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vessel_ratio: Option<f64>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ManifestHeader {
    #[serde(default)]
    dataset: String,
    #[serde(default)]
    classes: Vec<String>,
}

/// A dataset manifest: name, class list, and ordered records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::Data(format!("duplicate manifest path {}", r.path)));
            }
            if !r.labels.is_empty() && self.classes.is_empty() {
                return Err(Error::Data(format!(
                    "{}: labeled record but the manifest declares no classes",
                    r.path
                )));
            }
            for &l in &r.labels {
                if l >= self.classes.len() {
                    return Err(Error::Data(format!(
                        "{}: label index {l} out of range for {} classes",
                        r.path,
                        self.classes.len()
                    )));
                }
            }
            if let Some(v) = r.vessel_ratio {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "{}: vessel_ratio {v} outside [0, 1]",
                        r.path
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write as JSON lines: a header object, then one object per record.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = Vec::new();
        let header =
            ManifestHeader { dataset: self.dataset.clone(), classes: self.classes.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Read a JSON-lines manifest (header line, then records; blank lines
    /// and unknown keys are ignored).
    pub fn load(path: &Path) -> Result<Manifest> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(Error::Data(format!("{}: empty manifest", path.display()))),
            }
        };
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}: record {}: {e}", path.display(), i + 2)))?;
            records.push(rec);
        }
        let m = Manifest { dataset: header.dataset, classes: header.classes, records };
        m.validate()?;
        Ok(m)
    }

    /// Indices of records in a given split.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Keep/exclude decision for pretraining quality gating. CFP is excluded
/// below a vessel ratio of 0.04, FFA and ICGA below 0.01 (strict
/// comparisons); every other modality is kept unconditionally.
pub fn quality_filter(rec: &ImageRecord) -> Result<bool> {
    let gate = match rec.modality {
        Modality::CFP => Some(0.04),
        Modality::FFA | Modality::ICGA => Some(0.01),
        _ => None,
    };
    match gate {
        None => Ok(true),
        Some(threshold) => match rec.vessel_ratio {
            Some(v) => Ok(v >= threshold),
            None => Err(Error::Data(format!(
                "{}: {:?} requires a vessel_ratio for quality filtering",
                rec.path, rec.modality
            ))),
        },
    }
}

const STREAM_SPLIT: u64 = 0x0bad_5eed_0000_0004;

/// Assign train/val/test splits by uniform shuffle: the first ⌊0.55N⌋
/// shuffled records become train, the next ⌊0.15N⌋ val, the rest test.
pub fn split_dataset(manifest: &mut Manifest, seed: u64) -> Result<()> {
    let n = manifest.records.len();
    if n < 3 {
        return Err(Error::Data(format!("split: need at least 3 records, got {n}")));
    }
    if manifest.records.iter().any(|r| r.split != Split::Unassigned) {
        return Err(Error::Data("split: manifest already has split assignments".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed, &[STREAM_SPLIT]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    // Exact rational floors, computed in integers.
    let n_train = n * 55 / 100;
    let n_val = n * 15 / 100;
    for (pos, &idx) in order.iter().enumerate() {
        manifest.records[idx].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// A manifest plus image root, serving normalized `3×S×S` tensors.
pub struct DiskDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Model input side length.
    pub image_size: usize,
    pub augment_cfg: AugmentCfg,
}

impl DiskDataset {
    /// Open a manifest; image paths resolve relative to its directory.
    pub fn open(manifest_path: &Path, image_size: usize) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let augment_cfg = AugmentCfg { target: image_size, ..AugmentCfg::default() };
        Ok(DiskDataset { root, manifest, image_size, augment_cfg })
    }

    pub fn record(&self, idx: usize) -> Result<&ImageRecord> {
        self.manifest
            .records
            .get(idx)
            .ok_or_else(|| Error::Data(format!("record index {idx} out of range")))
    }

    /// Load a record's image as normalized planar floats, augmented for
    /// training or plainly resized for evaluation.
    pub fn pixels(&self, idx: usize, augment_it: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let rec = self.record(idx)?;
        let (raw, c, h, w) = load_image(&self.root.join(&rec.path))?;
        let rgb = to_rgb3(&raw, c, h, w)?;
        if augment_it {
            augment(&rgb, 3, h, w, &self.augment_cfg, rng)
        } else {
            center_crop_normalize(&rgb, 3, h, w, self.image_size, &self.augment_cfg.normalize)
        }
    }
}

impl ImageProvider for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.records.len()
    }
    fn fetch(&self, idx: usize, augment_it: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        self.pixels(idx, augment_it, rng)
    }
}
