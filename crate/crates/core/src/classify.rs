//! Classification fine-tuning: single-label (softmax with label
//! smoothing) and multi-label (per-class sigmoid) heads on the
//! pretrained encoder, with validation-AUROC checkpoint selection.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mae::ImageProvider;
use crate::metrics::{macro_aupr, macro_auroc, Labels, PredictionSet};
use crate::nn::{linear, Bound, Params};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::rng_from;
use crate::tensor::{Scalar, Tape, TensorId};
use crate::vit::{encode, init_encoder, patchify, ViTConfig};

const STREAM_ORDER: u64 = 0x0bad_5eed_0000_0011;
const STREAM_AUG: u64 = 0x0bad_5eed_0000_0012;
const STREAM_HEAD: u64 = 0x0bad_5eed_0000_0013;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

/// Fine-tuning hyperparameters. Presets match the training recipes:
/// single-label batch 16 / 50 epochs / warmup 10 to 5e-4 / cosine to 1e-6;
/// multi-label batch 4 / 30 epochs / constant 0.01.
#[derive(Debug, Clone)]
pub struct FinetuneRecipe {
    pub mode: TaskMode,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Label-smoothing ε (single-label only).
    pub smoothing: f64,
    /// Freeze the encoder and train the head only.
    pub linear_probe: bool,
    /// Optional hidden width for a two-layer head; `None` = single linear.
    pub head_hidden: Option<usize>,
    /// Stop once validation AUROC reaches this value (overfitting checks).
    pub early_stop_val_auroc: Option<f64>,
    pub augment: bool,
}

impl FinetuneRecipe {
    pub fn single_label() -> Self {
        FinetuneRecipe {
            mode: TaskMode::SingleLabel,
            batch_size: 16,
            schedule: LrSchedule::single_label(),
            smoothing: 0.1,
            linear_probe: false,
            head_hidden: None,
            early_stop_val_auroc: None,
            augment: true,
        }
    }

    pub fn multi_label() -> Self {
        FinetuneRecipe {
            mode: TaskMode::MultiLabel,
            batch_size: 4,
            schedule: LrSchedule::multi_label(),
            smoothing: 0.0,
            linear_probe: false,
            head_hidden: None,
            early_stop_val_auroc: None,
            augment: true,
        }
    }
}

/// One-hot vector for a class index.
pub fn one_hot(k: usize, label: usize) -> Result<Vec<f32>> {
    if label >= k {
        return Err(Error::Invalid(format!("label {label} out of range for {k} classes")));
    }
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Ok(v)
}

/// Multi-hot vector from a list of class indices.
pub fn multi_hot(k: usize, labels: &[usize]) -> Result<Vec<f32>> {
    let mut v = vec![0.0; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Invalid(format!("label {l} out of range for {k} classes")));
        }
        v[l] = 1.0;
    }
    Ok(v)
}

/// Label smoothing: `(1−ε)·one_hot + ε/K`. The input must be a valid
/// one-hot vector (exactly one entry 1, the rest 0).
pub fn label_smooth(one_hot: &[f32], eps: f64) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Invalid(format!("smoothing ε {eps} must be in [0, 1)")));
    }
    let k = one_hot.len();
    if k == 0 {
        return Err(Error::Invalid("label_smooth: empty target".into()));
    }
    let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
    let zeros = one_hot.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != k {
        return Err(Error::Invalid(
            "label_smooth: target must be one-hot (exactly one entry set)".into(),
        ));
    }
    let eps = eps as f32;
    let uniform = eps / k as f32;
    Ok(one_hot.iter().map(|&v| (1.0 - eps) * v + uniform).collect())
}

/// Create head parameters (`head.*`): a single linear map, or
/// `fc1 → GELU → fc2` when a hidden width is configured.
pub fn init_head(
    params: &mut Params,
    enc_dim: usize,
    num_classes: usize,
    hidden: Option<usize>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    match hidden {
        None => {
            params.add_trunc_normal("head.w", &[enc_dim, num_classes], 0.02, rng)?;
            params.add_zeros("head.b", &[num_classes])?;
        }
        Some(h) => {
            if h == 0 {
                return Err(Error::Invalid("head hidden width must be >= 1".into()));
            }
            params.add_trunc_normal("head.fc1.w", &[enc_dim, h], 0.02, rng)?;
            params.add_zeros("head.fc1.b", &[h])?;
            params.add_trunc_normal("head.fc2.w", &[h, num_classes], 0.02, rng)?;
            params.add_zeros("head.fc2.b", &[num_classes])?;
        }
    }
    Ok(())
}

/// Encoder + head forward pass: patch tokens `[B, L, p²C]` to logits
/// `[B, K]`.
pub fn classifier_logits<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ViTConfig,
    tokens: TensorId,
    hidden: Option<usize>,
) -> Result<TensorId> {
    let (pooled, _) = encode(tape, bound, cfg, tokens)?;
    match hidden {
        None => linear(tape, pooled, bound.id("head.w")?, Some(bound.id("head.b")?)),
        Some(_) => {
            let h = linear(tape, pooled, bound.id("head.fc1.w")?, Some(bound.id("head.fc1.b")?))?;
            let h = tape.gelu(h);
            linear(tape, h, bound.id("head.fc2.w")?, Some(bound.id("head.fc2.b")?))
        }
    }
}

/// Labeled data for fine-tuning: an image provider plus per-sample class
/// indices and train/val index lists.
pub struct LabeledSet<'a> {
    pub provider: &'a dyn ImageProvider,
    /// Class indices per sample (length 1 in single-label mode).
    pub labels: &'a [Vec<usize>],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet<'_> {
    fn validate(&self, mode: TaskMode) -> Result<()> {
        if self.labels.len() != self.provider.len() {
            return Err(Error::Data(format!(
                "{} label rows for {} samples",
                self.labels.len(),
                self.provider.len()
            )));
        }
        match mode {
            TaskMode::SingleLabel if self.num_classes < 2 => {
                return Err(Error::Invalid("single-label needs >= 2 classes".into()));
            }
            TaskMode::MultiLabel if self.num_classes < 1 => {
                return Err(Error::Invalid("multi-label needs >= 1 class".into()));
            }
            _ => {}
        }
        for split in [&self.train, &self.val] {
            for &i in split {
                let ls = self
                    .labels
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("split index {i} out of range")))?;
                if mode == TaskMode::SingleLabel && ls.len() != 1 {
                    return Err(Error::Data(format!(
                        "sample {i}: single-label mode needs exactly one label, got {}",
                        ls.len()
                    )));
                }
                if ls.iter().any(|&l| l >= self.num_classes) {
                    return Err(Error::Data(format!("sample {i}: label out of range")));
                }
            }
        }
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Data("train and val splits must be non-empty".into()));
        }
        Ok(())
    }
}

/// Per-epoch log entry (serialized as one JSON line).
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_aupr: f64,
    pub lr: f64,
}

pub struct FinetuneResult {
    /// Weights from the epoch with the best validation AUROC.
    pub best_params: Params,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    /// One JSON line per epoch: {epoch, train_loss, val_auroc, val_aupr, lr}.
    pub metrics_log: String,
    pub epochs: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

/// Earliest index (1-based) of the maximum value.
pub fn select_best_epoch(val_series: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_series.iter().enumerate() {
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(i, _)| i)
}

fn batch_tokens(
    set: &LabeledSet,
    cfg: &ViTConfig,
    indices: &[usize],
    augment_it: bool,
    seed: u64,
    epoch: usize,
) -> Result<Vec<f32>> {
    let mut tokens = Vec::with_capacity(indices.len() * cfg.num_patches() * cfg.patch_dim());
    for &idx in indices {
        let mut rng = rng_from(seed, &[STREAM_AUG, epoch as u64, idx as u64]);
        let img = set.provider.fetch(idx, augment_it, &mut rng)?;
        let toks =
            patchify(&img, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.patch_size)?;
        tokens.extend_from_slice(&toks);
    }
    Ok(tokens)
}

fn target_rows(set: &LabeledSet, recipe: &FinetuneRecipe, indices: &[usize]) -> Result<Vec<f32>> {
    let k = set.num_classes;
    let mut rows = Vec::with_capacity(indices.len() * k);
    for &idx in indices {
        let row = match recipe.mode {
            TaskMode::SingleLabel => {
                label_smooth(&one_hot(k, set.labels[idx][0])?, recipe.smoothing)?
            }
            TaskMode::MultiLabel => multi_hot(k, &set.labels[idx])?,
        };
        rows.extend_from_slice(&row);
    }
    Ok(rows)
}

/// Score every sample in `indices` (deterministic path, no augmentation).
pub fn predict(
    params: &Params,
    cfg: &ViTConfig,
    recipe: &FinetuneRecipe,
    set: &LabeledSet,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(recipe.batch_size.max(1)) {
        let tokens = batch_tokens(set, cfg, chunk, false, 0, 0)?;
        let mut tape: Tape<f32> = Tape::new();
        let bound = params.bind(&mut tape)?;
        let toks =
            tape.constant(tokens, vec![chunk.len(), cfg.num_patches(), cfg.patch_dim()])?;
        let logits = classifier_logits(&mut tape, &bound, cfg, toks, recipe.head_hidden)?;
        let scores = match recipe.mode {
            TaskMode::SingleLabel => tape.softmax_last(logits)?,
            TaskMode::MultiLabel => tape.sigmoid(logits),
        };
        let data = tape.data(scores);
        for row in data.chunks_exact(set.num_classes) {
            out.push(row.iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Builds a [`PredictionSet`] for the given sample indices (placeholder
/// class names; callers with a manifest can overwrite them).
pub fn prediction_set(
    params: &Params,
    cfg: &ViTConfig,
    recipe: &FinetuneRecipe,
    set: &LabeledSet,
    indices: &[usize],
) -> Result<PredictionSet> {
    let scores = predict(params, cfg, recipe, set, indices)?;
    let labels = match recipe.mode {
        TaskMode::SingleLabel => {
            Labels::Single(indices.iter().map(|&i| set.labels[i][0]).collect())
        }
        TaskMode::MultiLabel => Labels::MultiHot(
            indices
                .iter()
                .map(|&i| {
                    multi_hot(set.num_classes, &set.labels[i])
                        .map(|row| row.iter().map(|&v| v as u8).collect())
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(PredictionSet {
        scores,
        labels,
        class_names: (0..set.num_classes).map(|c| format!("class{c}")).collect(),
    })
}

/// Fine-tune the encoder (plus a fresh head) on a labeled set. `encoder`
/// supplies pretrained `enc.*` weights; when `None`, the encoder is
/// randomly initialized (training-from-scratch baseline).
pub fn finetune(
    set: &LabeledSet,
    cfg: &ViTConfig,
    recipe: &FinetuneRecipe,
    encoder: Option<&Params>,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    set.validate(recipe.mode)?;
    if recipe.batch_size == 0 {
        return Err(Error::Invalid("finetune: batch_size must be >= 1".into()));
    }
    let mut warnings = Vec::new();
    // Classes never seen in the train split learn nothing supervised.
    for c in 0..set.num_classes {
        if !set.train.iter().any(|&i| set.labels[i].contains(&c)) {
            let w = format!("class {c} absent from the train split");
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let mut params = Params::new();
    match encoder {
        Some(pre) => {
            for (name, p) in pre.iter() {
                if name.starts_with("enc.") {
                    params.insert(name, p.clone())?;
                }
            }
            if params.is_empty() {
                return Err(Error::Checkpoint("no enc.* parameters in checkpoint".into()));
            }
        }
        None => {
            let mut enc_rng = rng_from(seed, &[STREAM_HEAD, 0]);
            init_encoder(&mut params, cfg, &mut enc_rng)?;
        }
    }
    let mut head_rng = rng_from(seed, &[STREAM_HEAD, 1]);
    init_head(&mut params, cfg.enc_dim, set.num_classes, recipe.head_hidden, &mut head_rng)?;
    if recipe.linear_probe {
        params.set_trainable_where(|name| name.starts_with("head."));
    }

    let mut opt = AdamW::finetune();
    let total_epochs = recipe.schedule.total_epochs.round() as usize;
    let steps_per_epoch = set.train.len().div_ceil(recipe.batch_size);
    let mut metrics_log = String::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Params)> = None;

    for epoch in 1..=total_epochs {
        let mut order = set.train.clone();
        let mut order_rng = rng_from(seed, &[STREAM_ORDER, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (step, chunk) in order.chunks(recipe.batch_size).enumerate() {
            let tokens = batch_tokens(set, cfg, chunk, recipe.augment, seed, epoch)?;
            let targets = target_rows(set, recipe, chunk)?;
            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape)?;
            let toks =
                tape.constant(tokens, vec![chunk.len(), cfg.num_patches(), cfg.patch_dim()])?;
            let tgt = tape.constant(targets, vec![chunk.len(), set.num_classes])?;
            let logits = classifier_logits(&mut tape, &bound, cfg, toks, recipe.head_hidden)?;
            let loss = match recipe.mode {
                TaskMode::SingleLabel => tape.cross_entropy_rows(logits, tgt)?,
                TaskMode::MultiLabel => tape.bce_with_logits(logits, tgt)?,
            };
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "finetune: non-finite loss {loss_val} at epoch {epoch} step {}",
                    step + 1
                )));
            }
            tape.backward(loss)?;
            let grads = params.collect_grads(&tape, &bound)?;
            let frac = (epoch - 1) as f64 + step as f64 / steps_per_epoch as f64;
            last_lr = recipe.schedule.lr_at(frac);
            opt.step(&mut params, &grads, last_lr)?;
            epoch_loss += loss_val as f64;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;

        let val_set = prediction_set(&params, cfg, recipe, set, &set.val)?;
        let roc = macro_auroc(&val_set)?;
        let pr = macro_aupr(&val_set)?;
        if epoch == 1 {
            for &c in &roc.skipped {
                let w = format!("class {c} not evaluable on the val split; excluded from macro");
                log::warn!("{w}");
                warnings.push(w);
            }
        }

        let m = EpochMetrics {
            epoch,
            train_loss,
            val_auroc: roc.value,
            val_aupr: pr.value,
            lr: last_lr,
        };
        metrics_log.push_str(&serde_json::to_string(&m)?);
        metrics_log.push('\n');
        epochs.push(m);

        // Ties keep the earliest epoch (strict improvement required).
        if best.as_ref().map_or(true, |(_, bv, _)| roc.value > *bv) {
            best = Some((epoch, roc.value, params.clone()));
        }
        if let Some(stop) = recipe.early_stop_val_auroc {
            if roc.value >= stop {
                break;
            }
        }
    }

    let (best_epoch, best_val_auroc, best_params) = best.expect("at least one epoch ran");
    Ok(FinetuneResult { best_params, best_epoch, best_val_auroc, metrics_log, epochs, warnings })
}
