//! Masked-autoencoder pretraining: random patch masking, encoding of
//! visible patches only, a light decoder with shared mask tokens, the
//! masked-patch reconstruction objective, the training loop, and the
//! reconstruction visualization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{block_forward, init_block, linear, Bound, Params};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::rng_from;
use crate::tensor::{Scalar, Tape, TensorId};
use crate::vit::{encode_tokens, init_encoder, patchify, pos_embed_with_cls, unpatchify, ViTConfig};

/// Seed-stream tags so the shuffle, augmentation and masking draws never
/// collide.
const STREAM_ORDER: u64 = 0x0bad_5eed_0000_0001;
const STREAM_AUG: u64 = 0x0bad_5eed_0000_0002;
const STREAM_MASK: u64 = 0x0bad_5eed_0000_0003;

/// Per-sample masking decision.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Number of visible (kept) patches.
    pub len_keep: usize,
    /// Original indices of the kept patches, in shuffled order.
    pub ids_keep: Vec<usize>,
    /// For each original position, its index in the shuffled
    /// `[kept ‖ masked]` ordering.
    pub ids_restore: Vec<usize>,
    /// One entry per patch; 1 = masked, 0 = visible.
    pub mask: Vec<f32>,
}

/// Uniformly random mask keeping `floor(L·(1−mask_ratio))` patches.
///
/// `mask_ratio = 1` (or any ratio leaving zero visible patches) is
/// rejected: the encoder needs input.
pub fn random_mask(l: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if l == 0 {
        return Err(Error::Invalid("random_mask: L must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Invalid(format!(
            "random_mask: mask_ratio {mask_ratio} must lie in [0, 1)"
        )));
    }
    let len_keep = len_keep_for(l, mask_ratio);
    if len_keep == 0 {
        return Err(Error::Invalid(format!(
            "random_mask: ratio {mask_ratio} leaves no visible patches for L={l}"
        )));
    }
    let mut noise: Vec<(f64, usize)> = (0..l).map(|i| (rng.gen::<f64>(), i)).collect();
    noise.sort_by(|a, b| a.partial_cmp(b).expect("noise is finite"));
    let ids_shuffle: Vec<usize> = noise.into_iter().map(|(_, i)| i).collect();
    let mut ids_restore = vec![0usize; l];
    for (pos, &orig) in ids_shuffle.iter().enumerate() {
        ids_restore[orig] = pos;
    }
    let ids_keep = ids_shuffle[..len_keep].to_vec();
    let mut mask = vec![1.0f32; l];
    for &k in &ids_keep {
        mask[k] = 0.0;
    }
    Ok(MaskPlan { len_keep, ids_keep, ids_restore, mask })
}

/// `floor(L·(1−ratio))` with a tiny forward nudge so decimal ratios that
/// binary floats represent slightly low (e.g. 0.8, where `1−0.8` is just
/// under 0.2) still floor to the exact rational value.
pub fn len_keep_for(l: usize, mask_ratio: f64) -> usize {
    ((l as f64) * (1.0 - mask_ratio) + 1e-9).floor() as usize
}

/// Create encoder + decoder parameters for masked-autoencoder training.
pub fn init_mae(params: &mut Params, cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    init_encoder(params, cfg, rng)?;
    params.add_trunc_normal("dec.embed.w", &[cfg.enc_dim, cfg.dec_dim], 0.02, rng)?;
    params.add_zeros("dec.embed.b", &[cfg.dec_dim])?;
    params.add_trunc_normal("dec.mask_token", &[cfg.dec_dim], 0.02, rng)?;
    let bcfg = cfg.dec_block_cfg();
    for i in 0..cfg.dec_depth {
        init_block(params, &format!("dec.blocks.{i}"), &bcfg, rng)?;
    }
    params.add_ones("dec.norm.g", &[cfg.dec_dim])?;
    params.add_zeros("dec.norm.b", &[cfg.dec_dim])?;
    params.add_trunc_normal("dec.pred.w", &[cfg.dec_dim, cfg.patch_dim()], 0.02, rng)?;
    params.add_zeros("dec.pred.b", &[cfg.patch_dim()])?;
    Ok(())
}

/// Full masked-autoencoder forward pass.
///
/// `tokens` is `[B, L, p²C]` (patchified images); `plans` holds one mask
/// per sample (all with equal `len_keep`, as produced by a fixed ratio).
/// Returns per-patch predictions `[B, L, p²C]` and the binary mask
/// constant `[B, L]` (1 = masked).
pub fn mae_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ViTConfig,
    tokens: TensorId,
    plans: &[MaskPlan],
) -> Result<(TensorId, TensorId)> {
    let shape = tape.shape(tokens).to_vec();
    let l = cfg.num_patches();
    if shape.len() != 3 || shape[1] != l || shape[2] != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "mae_forward: tokens {:?} must be [B, {l}, {}]",
            shape,
            cfg.patch_dim()
        )));
    }
    let b = shape[0];
    if plans.len() != b {
        return Err(Error::Invalid(format!("mae_forward: {} plans for batch {b}", plans.len())));
    }
    let len_keep = plans[0].len_keep;
    for (i, p) in plans.iter().enumerate() {
        if p.mask.len() != l || p.ids_restore.len() != l {
            return Err(Error::Invalid(format!("mae_forward: plan {i} length != L={l}")));
        }
        if p.len_keep != len_keep {
            return Err(Error::Invalid("mae_forward: plans disagree on len_keep".into()));
        }
    }

    let keep: Vec<Vec<usize>> = plans.iter().map(|p| p.ids_keep.clone()).collect();
    let (cls_out, vis_out) = encode_tokens(tape, bound, cfg, tokens, Some(&keep), None)?;
    let cls_out = tape.reshape(cls_out, &[b, 1, cfg.enc_dim])?;
    let enc_seq = tape.concat(&[cls_out, vis_out], 1)?; // [B, 1+K, enc_dim]

    let wembed = bound.id("dec.embed.w")?;
    let bembed = bound.id("dec.embed.b")?;
    let x = linear(tape, enc_seq, wembed, Some(bembed))?; // [B, 1+K, dec_dim]

    let cls_part = tape.narrow(x, 1, 0, 1)?;
    let vis_part = tape.narrow(x, 1, 1, len_keep)?;
    let shuffled = if len_keep < l {
        let mtok = bound.id("dec.mask_token")?;
        let mtok = tape.expand_leading(mtok, b * (l - len_keep))?;
        let mtok = tape.reshape(mtok, &[b, l - len_keep, cfg.dec_dim])?;
        tape.concat(&[vis_part, mtok], 1)? // [B, L, dec_dim] in shuffled order
    } else {
        vis_part
    };
    let restore: Vec<Vec<usize>> = plans.iter().map(|p| p.ids_restore.clone()).collect();
    let restored = tape.index_select_batched(shuffled, &restore)?;
    let mut x = tape.concat(&[cls_part, restored], 1)?; // [B, L+1, dec_dim]

    let pos: Vec<T> = pos_embed_with_cls(cfg.grid(), cfg.grid(), cfg.dec_dim)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let pos = tape.constant(pos, vec![l + 1, cfg.dec_dim])?;
    x = tape.add(x, pos)?;

    let bcfg = cfg.dec_block_cfg();
    for i in 0..cfg.dec_depth {
        x = block_forward(tape, bound, &format!("dec.blocks.{i}"), &bcfg, x, None)?;
    }
    let g = bound.id("dec.norm.g")?;
    let be = bound.id("dec.norm.b")?;
    x = tape.layer_norm(x, g, be, 1e-6)?;
    let wpred = bound.id("dec.pred.w")?;
    let bpred = bound.id("dec.pred.b")?;
    let pred = linear(tape, x, wpred, Some(bpred))?;
    let pred = tape.narrow(pred, 1, 1, l)?; // drop the class-token row

    let mask_flat: Vec<T> = plans
        .iter()
        .flat_map(|p| p.mask.iter().map(|&m| T::from_f64(m as f64)))
        .collect();
    let mask = tape.constant(mask_flat, vec![b, l])?;
    Ok((pred, mask))
}

/// Mean squared error over masked patches only:
/// `(Σ_masked ‖pred−target‖²/(p²C)) / #masked`. Rejects an all-visible mask.
pub fn masked_recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: TensorId,
    target: TensorId,
    mask: TensorId,
) -> Result<TensorId> {
    let msum: f64 = tape.data(mask).iter().map(|&m| m.to_f64()).sum();
    if msum < 1.0 {
        return Err(Error::Invalid(
            "masked_recon_loss: mask selects no patches (loss undefined)".into(),
        ));
    }
    tape.masked_mse(pred, target, mask)
}

/// Per-patch target normalization (optional reconstruction target variant):
/// each row is shifted/scaled to zero mean and unit variance.
pub fn normalize_patch_targets(tokens: &mut [f32], patch_dim: usize) {
    for row in tokens.chunks_exact_mut(patch_dim) {
        let n = row.len() as f32;
        let mean: f32 = row.iter().sum::<f32>() / n;
        let var: f32 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Source of preprocessed (normalized, `C×H×W`, config-sized) images.
pub trait ImageProvider {
    fn len(&self) -> usize;
    /// Pixels for sample `idx`; `rng` drives augmentation when enabled.
    fn fetch(&self, idx: usize, augment: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>>;
}

/// In-memory provider (synthetic corpora, tests).
pub struct SliceProvider<'a> {
    pub images: &'a [Vec<f32>],
}

impl ImageProvider for SliceProvider<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn fetch(&self, idx: usize, _augment: bool, _rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        self.images
            .get(idx)
            .cloned()
            .ok_or_else(|| Error::Data(format!("image index {idx} out of range")))
    }
}

/// Pretraining options. The schedule/optimizer defaults follow the training
/// recipe (peak 1e-3 after 15 warmup epochs, cosine to 0 over 50, batch 64,
/// mask ratio 0.8, betas (0.9, 0.95), weight decay 0.05).
#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub augment: bool,
    pub norm_pix_loss: bool,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        PretrainOpts {
            schedule: LrSchedule::pretrain(),
            batch_size: 64,
            mask_ratio: 0.8,
            seed: 0,
            augment: true,
            norm_pix_loss: false,
        }
    }
}

/// Outcome of a pretraining run.
pub struct PretrainResult {
    pub params: Params,
    /// Plain-text log, one line per step: `epoch <e> step <s> loss <v> lr <v>`.
    pub loss_log: String,
    /// Mean masked reconstruction loss per epoch (1-based epochs).
    pub epoch_losses: Vec<f64>,
}

/// Run masked-autoencoder pretraining. `on_epoch(epoch, params)` fires after
/// every epoch (checkpoint hook; pass a no-op closure if unwanted).
pub fn pretrain(
    provider: &dyn ImageProvider,
    cfg: &ViTConfig,
    opts: &PretrainOpts,
    mut on_epoch: impl FnMut(usize, &Params) -> Result<()>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if provider.len() == 0 {
        return Err(Error::Data("pretrain: empty image set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Invalid("pretrain: batch_size must be >= 1".into()));
    }
    let n = provider.len();
    let l = cfg.num_patches();
    let pd = cfg.patch_dim();
    let total_epochs = opts.schedule.total_epochs.round() as usize;

    let mut params = Params::new();
    let mut init_rng = rng_from(opts.seed, &[0]);
    init_mae(&mut params, cfg, &mut init_rng)?;
    let mut opt = AdamW::pretrain();
    let mut loss_log = String::new();
    let mut epoch_losses = Vec::with_capacity(total_epochs);

    let steps_per_epoch = n.div_ceil(opts.batch_size);
    for epoch in 1..=total_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = rng_from(opts.seed, &[STREAM_ORDER, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let step = step + 1;
            let bsz = chunk.len();
            let mut tokens = Vec::with_capacity(bsz * l * pd);
            let mut plans = Vec::with_capacity(bsz);
            for &idx in chunk {
                let mut aug_rng = rng_from(opts.seed, &[STREAM_AUG, epoch as u64, idx as u64]);
                let img = provider.fetch(idx, opts.augment, &mut aug_rng)?;
                let toks =
                    patchify(&img, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.patch_size)?;
                tokens.extend_from_slice(&toks);
                let mut mask_rng = rng_from(opts.seed, &[STREAM_MASK, epoch as u64, idx as u64]);
                plans.push(random_mask(l, opts.mask_ratio, &mut mask_rng)?);
            }
            let mut target = tokens.clone();
            if opts.norm_pix_loss {
                normalize_patch_targets(&mut target, pd);
            }

            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape)?;
            let toks = tape.constant(tokens, vec![bsz, l, pd])?;
            let tgt = tape.constant(target, vec![bsz, l, pd])?;
            let (pred, mask) = mae_forward(&mut tape, &bound, cfg, toks, &plans)?;
            let loss = masked_recon_loss(&mut tape, pred, tgt, mask)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "pretrain: non-finite loss {loss_val} at epoch {epoch} step {step}"
                )));
            }
            tape.backward(loss)?;
            let grads = params.collect_grads(&tape, &bound)?;
            let frac = (epoch - 1) as f64 + (step - 1) as f64 / steps_per_epoch as f64;
            let lr = opts.schedule.lr_at(frac);
            opt.step(&mut params, &grads, lr)?;

            epoch_loss += loss_val as f64;
            loss_log.push_str(&format!("epoch {epoch} step {step} loss {loss_val} lr {lr}\n"));
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
        on_epoch(epoch, &params)?;
    }

    Ok(PretrainResult { params, loss_log, epoch_losses })
}

/// Figure-style composite: visible patches copied bitwise from the original
/// pixels, masked patches filled with the model's reconstruction,
/// un-normalized with the given per-channel statistics and clamped to
/// `[0, 255]`.
pub fn reconstruct_visualize(
    original: &[u8],
    cfg: &ViTConfig,
    params: &Params,
    plan: &MaskPlan,
    means: &[f32],
    stds: &[f32],
) -> Result<Vec<u8>> {
    let (c, hw) = (cfg.in_channels, cfg.image_size);
    if original.len() != c * hw * hw {
        return Err(Error::Shape(format!(
            "visualize: image length {} != {c}x{hw}x{hw}",
            original.len()
        )));
    }
    if means.len() != c || stds.len() != c {
        return Err(Error::Invalid("visualize: need one mean/std per channel".into()));
    }
    // Normalize pixels exactly as the training pipeline does.
    let mut norm = vec![0.0f32; original.len()];
    for ch in 0..c {
        for i in 0..hw * hw {
            let v = original[ch * hw * hw + i] as f32 / 255.0;
            norm[ch * hw * hw + i] = (v - means[ch]) / stds[ch];
        }
    }
    let tokens = patchify(&norm, c, hw, hw, cfg.patch_size)?;
    let l = cfg.num_patches();
    let pd = cfg.patch_dim();

    let mut tape: Tape<f32> = Tape::new();
    let bound = params.bind(&mut tape)?;
    let toks = tape.constant(tokens.clone(), vec![1, l, pd])?;
    let (pred, _mask) = mae_forward(&mut tape, &bound, cfg, toks, std::slice::from_ref(plan))?;
    let pred = tape.data(pred).to_vec();

    // Compose in token space: visible rows keep the original token values,
    // masked rows take predictions.
    let mut composite_tokens = tokens;
    for (i, &m) in plan.mask.iter().enumerate() {
        if m != 0.0 {
            composite_tokens[i * pd..(i + 1) * pd].copy_from_slice(&pred[i * pd..(i + 1) * pd]);
        }
    }
    let composite_norm = unpatchify(&composite_tokens, c, hw, hw, cfg.patch_size)?;

    let mut out = vec![0u8; original.len()];
    for ch in 0..c {
        for i in 0..hw * hw {
            let pos = ch * hw * hw + i;
            // Work out which patch this pixel belongs to.
            let (y, x) = (i / hw, i % hw);
            let patch = (y / cfg.patch_size) * cfg.grid() + (x / cfg.patch_size);
            if plan.mask[patch] == 0.0 {
                out[pos] = original[pos];
            } else {
                let v = (composite_norm[pos] * stds[ch] + means[ch]) * 255.0;
                out[pos] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}
