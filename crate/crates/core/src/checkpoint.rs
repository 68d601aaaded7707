//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "OMAE"
//! version  u32      currently 1
//! meta     u32 length + JSON bytes  (config echo, epoch, seed)
//! params   u32 count, then per entry in sorted-name order:
//!            u32 name length + UTF-8 name
//!            u32 ndim + u32 dims…
//!            u8  trainable flag
//!            4·product(dims) bytes of f32 data
//! opt      u8 presence flag; when 1:
//!            u64 step count, u32 entry count, then per entry:
//!              u32 name length + name, u32 numel,
//!              numel f32 first moments, numel f32 second moments
//! ```
//!
//! Saves go through a temp file in the target directory followed by a
//! rename, so a crash never leaves a half-written checkpoint behind.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Params};

const MAGIC: &[u8; 4] = b"OMAE";
const VERSION: u32 = 1;

/// Configuration echo and training progress stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Architecture / run configuration echo, stored as opaque JSON so any
    /// config shape round-trips.
    pub config: serde_json::Value,
    pub epoch: u64,
    pub seed: u64,
}

/// Optimizer moments in the exact shape [`crate::optim::AdamW`] exports.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step_count: u64,
    pub entries: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
    pub optimizer: Option<OptState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} exceeds the u32 field width")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let meta = serde_json::to_vec(&ckpt.meta)?;
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);

    put_u32(&mut out, ckpt.params.len())?;
    for (name, p) in ckpt.params.iter() {
        put_str(&mut out, name)?;
        put_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut out, d)?;
        }
        out.push(u8::from(p.trainable));
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    match &ckpt.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step_count.to_le_bytes());
            put_u32(&mut out, opt.entries.len())?;
            for (name, m, v) in &opt.entries {
                if m.len() != v.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer entry {name}: moment lengths {} and {} differ",
                        m.len(),
                        v.len()
                    )));
                }
                put_str(&mut out, name)?;
                put_u32(&mut out, m.len())?;
                for &x in m {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for &x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Byte cursor that turns every underrun into a "truncated" error.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}",
                self.pos
            ))
        })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8-byte slice")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what}: name is not valid UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?} — not a checkpoint file"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let meta_len = r.u32("meta length")?;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta block is not valid JSON: {e}")))?;

    let count = r.u32("parameter count")?;
    let mut params = Params::new();
    for i in 0..count {
        let what = format!("parameter {i}");
        let name = r.str(&what)?;
        let ndim = r.u32(&what)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&what)?);
        }
        let trainable = match r.u8(&what)? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: trainable flag must be 0 or 1, got {other}"
                )))
            }
        };
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel, &format!("parameter {name} data"))?;
        params.insert(&name, Param { data, shape, trainable })?;
    }

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step_count = r.u64("optimizer step count")?;
            let n = r.u32("optimizer entry count")?;
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let what = format!("optimizer entry {i}");
                let name = r.str(&what)?;
                let numel = r.u32(&what)?;
                let m = r.f32s(numel, &what)?;
                let v = r.f32s(numel, &what)?;
                entries.push((name, m, v));
            }
            Some(OptState { step_count, entries })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "optimizer flag must be 0 or 1, got {other}"
            )))
        }
    };

    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the optimizer block",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { meta, params, optimizer })
}

/// Writes atomically: the bytes land in a temp file in the same directory,
/// which is then renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    write_atomic(path, &bytes)
}

/// Atomic write helper shared by checkpoints and reports.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(
        || Path::new(".").to_path_buf(),
        Path::to_path_buf,
    );
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Checks that `loaded` can stand in for `model`: every parameter the model
/// defines must be present with the same shape. The first offender is named
/// in the error.
pub fn verify_matches(loaded: &Params, model: &Params) -> Result<()> {
    for (name, expected) in model.iter() {
        match loaded.get(name) {
            Err(_) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is missing parameter {name}"
                )))
            }
            Ok(p) if p.shape != expected.shape => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    p.shape, expected.shape
                )))
            }
            Ok(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamW;
    use crate::rng::rng_from;
    use crate::vit::{init_encoder, ViTConfig};

    fn sample_checkpoint() -> Checkpoint {
        let mut params = Params::new();
        let mut rng = rng_from(0, &[77]);
        params.add_trunc_normal("enc.w", &[3, 4], 0.5, &mut rng).unwrap();
        params.add_ones("enc.g", &[4]).unwrap();
        params.add_zeros("head.b", &[2]).unwrap();
        params.set_trainable_where(|n| n.starts_with("head."));
        let meta = CheckpointMeta {
            config: serde_json::json!({"image_size": 64, "patch_size": 8}),
            epoch: 7,
            seed: 42,
        };
        let optimizer = Some(OptState {
            step_count: 13,
            entries: vec![("head.b".into(), vec![0.1, -0.2], vec![0.3, 0.4])],
        });
        Checkpoint { meta, params, optimizer }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.optimizer.as_ref().unwrap(), ckpt.optimizer.as_ref().unwrap());
        for (name, p) in ckpt.params.iter() {
            let q = loaded.params.get(name).unwrap();
            assert_eq!(p.data, q.data);
            assert_eq!(p.shape, q.shape);
            assert_eq!(p.trainable, q.trainable, "trainable flag lost for {name}");
        }
        // No stray temp files left behind.
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 2);
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"OMAE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_anywhere_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let good = fs::read(&path).unwrap();
        for cut in [2, 6, 10, good.len() / 2, good.len() - 1] {
            fs::write(&path, &good[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut at {cut}: {err}");
        }
        // Trailing garbage is rejected too.
        let mut padded = good.clone();
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn duplicate_parameter_names_are_rejected_on_load() {
        // Hand-assembled file with the same entry twice.
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"OMAE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        let meta = br#"{"config":null,"epoch":0,"seed":0}"#;
        bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        bytes.extend_from_slice(meta);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(b"w");
            bytes.extend_from_slice(&1u32.to_le_bytes()); // ndim
            bytes.extend_from_slice(&1u32.to_le_bytes()); // dim 0
            bytes.push(1); // trainable
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        bytes.push(0); // no optimizer
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn shape_mismatch_on_load_names_the_offending_tensor() {
        let mut big = Params::new();
        let mut small = Params::new();
        let mut rng = rng_from(0, &[78]);
        let mut cfg = ViTConfig::desk();
        cfg.dec_dim = 16;
        init_encoder(&mut big, &ViTConfig::desk(), &mut rng).unwrap();
        let mut rng = rng_from(0, &[79]);
        let mut small_cfg = cfg.clone();
        small_cfg.enc_dim = 32;
        init_encoder(&mut small, &small_cfg, &mut rng).unwrap();

        let err = verify_matches(&big, &small).unwrap_err().to_string();
        assert!(err.contains("enc."), "{err}");
        assert!(err.contains("does not match"), "{err}");

        let mut missing = Params::new();
        missing.add_zeros("enc.norm.g", &[64]).unwrap();
        let err = verify_matches(&missing, &big).unwrap_err().to_string();
        assert!(err.contains("missing parameter"), "{err}");

        assert!(verify_matches(&big, &big).is_ok());
    }

    #[test]
    fn optimizer_state_roundtrips_through_adamw() {
        let mut params = Params::new();
        params.add_const("w", &[2], 1.0).unwrap();
        let mut opt = AdamW::finetune();
        let grads = std::collections::BTreeMap::from([("w".to_string(), vec![0.5f32, -0.25])]);
        opt.step(&mut params, &grads, 1e-2).unwrap();
        opt.step(&mut params, &grads, 1e-2).unwrap();

        let (steps, entries) = opt.export_state();
        let ckpt = Checkpoint {
            meta: CheckpointMeta { config: serde_json::Value::Null, epoch: 1, seed: 0 },
            params: params.clone(),
            optimizer: Some(OptState { step_count: steps, entries: entries.clone() }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let state = loaded.optimizer.unwrap();

        let mut resumed = AdamW::finetune();
        resumed.import_state(state.step_count, state.entries);
        let (s2, e2) = resumed.export_state();
        assert_eq!(s2, steps);
        assert_eq!(e2, entries);

        // Continuing from the restored state reproduces the original run.
        let mut p1 = params.clone();
        let mut p2 = loaded.params.clone();
        opt.step(&mut p1, &grads, 1e-2).unwrap();
        resumed.step(&mut p2, &grads, 1e-2).unwrap();
        assert_eq!(p1.get("w").unwrap().data, p2.get("w").unwrap().data);
    }

    #[test]
    fn meta_preserves_config_echo_and_progress() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ViTConfig::desk();
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: serde_json::to_value(&cfg).unwrap(),
                epoch: 50,
                seed: 3,
            },
            params: {
                let mut p = Params::new();
                p.add_zeros("enc.cls", &[1, 64]).unwrap();
                p
            },
            optimizer: None,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.epoch, 50);
        assert_eq!(loaded.meta.seed, 3);
        let back: ViTConfig = serde_json::from_value(loaded.meta.config).unwrap();
        assert_eq!(back, cfg);
        assert!(loaded.optimizer.is_none());
    }
}
