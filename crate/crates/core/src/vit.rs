//! Vision Transformer encoder: patch embedding, fixed 2-D sine-cosine
//! positional embeddings, class token, pre-norm blocks, final layer norm.
//!
//! Images are flat `C×H×W` buffers (channel-major planes). [`patchify`]
//! turns them into token rows of length `patch_size²·C` with channel-last
//! layout inside each patch; [`unpatchify`] is its exact inverse.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{block_forward, init_block, linear, BlockCfg, Bound, LoraCfg, Params};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tape, TensorId};

/// How the encoder's pooled feature is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// Output of the class token (default).
    Cls,
    /// Mean over patch-token outputs.
    Mean,
}

/// Geometry and width settings for the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: f64,
    pub pool: Pool,
}

impl ViTConfig {
    /// Full-scale preset: 224-px images, 16-px patches, 24×1024 encoder,
    /// 8×512 decoder.
    pub fn paper() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            enc_depth: 24,
            enc_dim: 1024,
            enc_heads: 16,
            dec_depth: 8,
            dec_dim: 512,
            dec_heads: 16,
            mlp_ratio: 4.0,
            pool: Pool::Cls,
        }
    }

    /// CPU-friendly preset used by tests: 64-px images, 8-px patches,
    /// 4×64 encoder, 2×32 decoder.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            enc_depth: 4,
            enc_dim: 64,
            enc_heads: 4,
            dec_depth: 2,
            dec_dim: 32,
            dec_heads: 4,
            mlp_ratio: 4.0,
            pool: Pool::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::Invalid("vit: sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "vit: image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.enc_depth == 0 || self.enc_dim == 0 || self.enc_heads == 0 {
            return Err(Error::Invalid("vit: encoder geometry must be positive".into()));
        }
        if self.enc_dim % self.enc_heads != 0 {
            return Err(Error::Invalid(format!(
                "vit: enc_dim {} not divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            )));
        }
        if self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Invalid(format!(
                "vit: dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.enc_dim % 4 != 0 || self.dec_dim % 4 != 0 {
            return Err(Error::Invalid(
                "vit: embedding dims must be divisible by 4 for 2-d sin-cos embeddings".into(),
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Invalid("vit: mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total patch count L.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Per-token input width `patch_size² · in_channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn enc_block_cfg(&self) -> BlockCfg {
        let mut b = BlockCfg::new(self.enc_dim, self.enc_heads);
        b.mlp_ratio = self.mlp_ratio;
        b
    }

    pub fn dec_block_cfg(&self) -> BlockCfg {
        let mut b = BlockCfg::new(self.dec_dim, self.dec_heads);
        b.mlp_ratio = self.mlp_ratio;
        b
    }
}

/// `C×H×W` image → `L×(p²·C)` tokens, row-major patch order, channel-last
/// within each patch.
pub fn patchify(img: &[f32], c: usize, h: usize, w: usize, p: usize) -> Result<Vec<f32>> {
    if h % p != 0 || w % p != 0 || p == 0 {
        return Err(Error::Shape(format!("patchify: {h}x{w} not divisible by patch {p}")));
    }
    if img.len() != c * h * w {
        return Err(Error::Shape(format!(
            "patchify: buffer length {} != {c}x{h}x{w}",
            img.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * p * p * c);
    for ty in 0..gh {
        for tx in 0..gw {
            for pi in 0..p {
                for pj in 0..p {
                    let (y, x) = (ty * p + pi, tx * p + pj);
                    for ch in 0..c {
                        out.push(img[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], c: usize, h: usize, w: usize, p: usize) -> Result<Vec<f32>> {
    if h % p != 0 || w % p != 0 || p == 0 {
        return Err(Error::Shape(format!("unpatchify: {h}x{w} not divisible by patch {p}")));
    }
    if tokens.len() != c * h * w {
        return Err(Error::Shape(format!(
            "unpatchify: token buffer length {} != {c}x{h}x{w}",
            tokens.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0f32; c * h * w];
    let token_len = p * p * c;
    for ty in 0..gh {
        for tx in 0..gw {
            let t = &tokens[(ty * gw + tx) * token_len..(ty * gw + tx + 1) * token_len];
            for pi in 0..p {
                for pj in 0..p {
                    let (y, x) = (ty * p + pi, tx * p + pj);
                    for ch in 0..c {
                        out[ch * h * w + y * w + x] = t[(pi * p + pj) * c + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1-D sine-cosine embedding of arbitrary positions: `[n, dim]` with the
/// first half sines and the second half cosines over a geometric frequency
/// ladder. `dim` must be even.
pub fn sincos_pos_embed_1d(positions: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("sincos 1d: dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out.push((pos * omega).sin());
        }
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out.push((pos * omega).cos());
        }
    }
    Ok(out)
}

/// Fixed 2-D sine-cosine grid embedding `[(grid_h·grid_w), dim]`,
/// row-major over grid positions; first `dim/2` columns encode the row
/// coordinate, the rest the column coordinate. `dim` must be divisible by 4.
pub fn sincos_pos_embed(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Invalid(format!("sincos 2d: dim {dim} must be divisible by 4")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Invalid("sincos 2d: empty grid".into()));
    }
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        let row_emb = sincos_pos_embed_1d(&[r as f64], dim / 2)?;
        for c in 0..grid_w {
            let col_emb = sincos_pos_embed_1d(&[c as f64], dim / 2)?;
            out.extend_from_slice(&row_emb);
            out.extend_from_slice(&col_emb);
        }
    }
    Ok(out)
}

/// Grid embedding with a leading all-zero row for the class token:
/// `[(1 + grid_h·grid_w), dim]`.
pub fn pos_embed_with_cls(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    let body = sincos_pos_embed(grid_h, grid_w, dim)?;
    let mut out = vec![0.0; dim];
    out.extend_from_slice(&body);
    Ok(out)
}

/// Create encoder parameters under the `enc.` prefix.
pub fn init_encoder(params: &mut Params, cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    init_encoder_with_lora(params, cfg, rng, None)
}

/// Encoder init with optional LoRA adapters on every block's Q/V
/// projections (used by the VQA recipe).
pub fn init_encoder_with_lora(
    params: &mut Params,
    cfg: &ViTConfig,
    rng: &mut ChaCha8Rng,
    lora: Option<LoraCfg>,
) -> Result<()> {
    cfg.validate()?;
    params.add_trunc_normal("enc.patch_embed.w", &[cfg.patch_dim(), cfg.enc_dim], 0.02, rng)?;
    params.add_zeros("enc.patch_embed.b", &[cfg.enc_dim])?;
    params.add_trunc_normal("enc.cls_token", &[cfg.enc_dim], 0.02, rng)?;
    let mut bcfg = cfg.enc_block_cfg();
    bcfg.lora = lora;
    for i in 0..cfg.enc_depth {
        init_block(params, &format!("enc.blocks.{i}"), &bcfg, rng)?;
    }
    params.add_ones("enc.norm.g", &[cfg.enc_dim])?;
    params.add_zeros("enc.norm.b", &[cfg.enc_dim])?;
    Ok(())
}

/// Shared encoder forward. `tokens` is `[B, L, patch_dim]` (from
/// [`patchify`]); `keep` optionally selects a per-sample subset of patches
/// *after* positional embeddings are added (the masked-autoencoder path).
///
/// Returns `(cls_out [B, enc_dim], patch_tokens_out [B, K, enc_dim])` where
/// `K` is `L` or the kept count.
pub fn encode_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ViTConfig,
    tokens: TensorId,
    keep: Option<&[Vec<usize>]>,
    lora: Option<LoraCfg>,
) -> Result<(TensorId, TensorId)> {
    cfg.validate()?;
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "encode: tokens {:?} must be [B, {}, {}]",
            shape,
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let b = shape[0];

    let w = bound.id("enc.patch_embed.w")?;
    let pb = bound.id("enc.patch_embed.b")?;
    let mut x = linear(tape, tokens, w, Some(pb))?; // [B, L, D]

    let pos: Vec<T> = sincos_pos_embed(cfg.grid(), cfg.grid(), cfg.enc_dim)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let pos = tape.constant(pos, vec![cfg.num_patches(), cfg.enc_dim])?;
    x = tape.add(x, pos)?;

    if let Some(keep) = keep {
        x = tape.index_select_batched(x, keep)?;
    }

    // Class token (its positional row is all zeros by construction).
    let cls = bound.id("enc.cls_token")?;
    let cls = tape.expand_leading(cls, b)?; // [B, D]
    let cls = tape.reshape(cls, &[b, 1, cfg.enc_dim])?;
    x = tape.concat(&[cls, x], 1)?;

    let mut bcfg = cfg.enc_block_cfg();
    bcfg.lora = lora;
    for i in 0..cfg.enc_depth {
        x = block_forward(tape, bound, &format!("enc.blocks.{i}"), &bcfg, x, None)?;
    }
    let g = bound.id("enc.norm.g")?;
    let be = bound.id("enc.norm.b")?;
    x = tape.layer_norm(x, g, be, 1e-6)?;

    let seq = tape.shape(x)[1];
    let cls_out = tape.narrow(x, 1, 0, 1)?;
    let cls_out = tape.reshape(cls_out, &[b, cfg.enc_dim])?;
    let tok_out = tape.narrow(x, 1, 1, seq - 1)?;
    Ok((cls_out, tok_out))
}

/// Full-image encoding: `(pooled [B, enc_dim], tokens [B, L, enc_dim])`,
/// pooling per `cfg.pool`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ViTConfig,
    tokens: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (cls_out, tok_out) = encode_tokens(tape, bound, cfg, tokens, None, None)?;
    let pooled = match cfg.pool {
        Pool::Cls => cls_out,
        Pool::Mean => tape.mean_axis(tok_out, 1)?,
    };
    Ok((pooled, tok_out))
}
