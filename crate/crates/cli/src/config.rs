//! Run configuration: a TOML file with sections, every key optional, and
//! command-line flags overriding file keys. Unknown keys are rejected so
//! typos surface immediately.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use omae_core::classify::{FinetuneRecipe, TaskMode};
use omae_core::mae::PretrainOpts;
use omae_core::nn::LoraCfg;
use omae_core::optim::LrSchedule;
use omae_core::vit::Pool;
use omae_core::vqa::{VqaConfig, VqaRecipe};
use omae_core::ViTConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub vqa: VqaSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "desk" (default) or "paper"; explicit keys below override its fields.
    pub preset: Option<String>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub in_channels: Option<usize>,
    pub enc_depth: Option<usize>,
    pub enc_dim: Option<usize>,
    pub enc_heads: Option<usize>,
    pub dec_depth: Option<usize>,
    pub dec_dim: Option<usize>,
    pub dec_heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    /// "cls" or "mean".
    pub pool: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub warmup_epochs: Option<f64>,
    pub total_epochs: Option<f64>,
    pub peak_lr: Option<f64>,
    pub floor_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub augment: Option<bool>,
    pub norm_pix_loss: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// "single-label" (default) or "multi-label".
    pub mode: Option<String>,
    pub batch_size: Option<usize>,
    pub warmup_epochs: Option<f64>,
    pub total_epochs: Option<f64>,
    pub peak_lr: Option<f64>,
    pub floor_lr: Option<f64>,
    pub smoothing: Option<f64>,
    pub linear_probe: Option<bool>,
    pub head_hidden: Option<usize>,
    pub early_stop_val_auroc: Option<f64>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaSection {
    pub lm_depth: Option<usize>,
    pub lm_dim: Option<usize>,
    pub lm_heads: Option<usize>,
    pub lm_mlp_ratio: Option<f64>,
    pub max_seq: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub pooled_only: Option<bool>,
    pub unfreeze_encoder: Option<bool>,
    pub batch_size: Option<usize>,
    pub total_epochs: Option<f64>,
    pub peak_lr: Option<f64>,
    pub floor_lr: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Option<Vec<u64>>,
    pub threads: Option<usize>,
    pub dataset: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Architecture: preset (flag > file > "desk") with explicit keys, then
    /// flag overrides, layered on top.
    pub fn vit_config(
        &self,
        preset_flag: Option<&str>,
        image_size_flag: Option<usize>,
    ) -> Result<ViTConfig> {
        let preset = preset_flag.or(self.model.preset.as_deref()).unwrap_or("desk");
        let mut cfg = match preset {
            "desk" => ViTConfig::desk(),
            "paper" => ViTConfig::paper(),
            other => bail!("unknown model preset {other:?} (expected \"desk\" or \"paper\")"),
        };
        let m = &self.model;
        if let Some(v) = m.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = m.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = m.in_channels {
            cfg.in_channels = v;
        }
        if let Some(v) = m.enc_depth {
            cfg.enc_depth = v;
        }
        if let Some(v) = m.enc_dim {
            cfg.enc_dim = v;
        }
        if let Some(v) = m.enc_heads {
            cfg.enc_heads = v;
        }
        if let Some(v) = m.dec_depth {
            cfg.dec_depth = v;
        }
        if let Some(v) = m.dec_dim {
            cfg.dec_dim = v;
        }
        if let Some(v) = m.dec_heads {
            cfg.dec_heads = v;
        }
        if let Some(v) = m.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        if let Some(p) = m.pool.as_deref() {
            cfg.pool = match p {
                "cls" => Pool::Cls,
                "mean" => Pool::Mean,
                other => bail!("unknown pool {other:?} (expected \"cls\" or \"mean\")"),
            };
        }
        if let Some(v) = image_size_flag {
            cfg.image_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_opts(
        &self,
        seed: Option<u64>,
        epochs: Option<f64>,
        batch_size: Option<usize>,
        mask_ratio: Option<f64>,
        augment: Option<bool>,
    ) -> Result<PretrainOpts> {
        let mut opts = PretrainOpts::default();
        let s = &self.pretrain;
        let total = epochs.or(s.total_epochs).unwrap_or(opts.schedule.total_epochs);
        // Absent an explicit warmup, keep the preset's warmup *fraction* so a
        // shortened run stays a valid (and similarly shaped) schedule.
        let warmup = s
            .warmup_epochs
            .unwrap_or(opts.schedule.warmup_epochs * total / opts.schedule.total_epochs);
        opts.schedule = LrSchedule::new(
            warmup,
            total,
            s.peak_lr.unwrap_or(opts.schedule.peak),
            s.floor_lr.unwrap_or(opts.schedule.floor),
        )?;
        opts.batch_size = batch_size.or(s.batch_size).unwrap_or(opts.batch_size);
        opts.mask_ratio = mask_ratio.or(s.mask_ratio).unwrap_or(opts.mask_ratio);
        opts.augment = augment.or(s.augment).unwrap_or(opts.augment);
        opts.norm_pix_loss = s.norm_pix_loss.unwrap_or(opts.norm_pix_loss);
        opts.seed = seed.unwrap_or(opts.seed);
        Ok(opts)
    }

    pub fn task_mode(&self, mode_flag: Option<&str>) -> Result<TaskMode> {
        match mode_flag.or(self.finetune.mode.as_deref()).unwrap_or("single-label") {
            "single-label" | "single" => Ok(TaskMode::SingleLabel),
            "multi-label" | "multi" => Ok(TaskMode::MultiLabel),
            other => bail!("unknown mode {other:?} (expected \"single-label\" or \"multi-label\")"),
        }
    }

    pub fn finetune_recipe(
        &self,
        mode: TaskMode,
        epochs: Option<f64>,
        batch_size: Option<usize>,
        linear_probe: Option<bool>,
        early_stop: Option<f64>,
        smoothing: Option<f64>,
    ) -> Result<FinetuneRecipe> {
        let mut recipe = match mode {
            TaskMode::SingleLabel => FinetuneRecipe::single_label(),
            TaskMode::MultiLabel => FinetuneRecipe::multi_label(),
        };
        let s = &self.finetune;
        let total = epochs.or(s.total_epochs).unwrap_or(recipe.schedule.total_epochs);
        let warmup = s
            .warmup_epochs
            .unwrap_or(recipe.schedule.warmup_epochs * total / recipe.schedule.total_epochs);
        recipe.schedule = LrSchedule::new(
            warmup,
            total,
            s.peak_lr.unwrap_or(recipe.schedule.peak),
            s.floor_lr.unwrap_or(recipe.schedule.floor),
        )?;
        recipe.batch_size = batch_size.or(s.batch_size).unwrap_or(recipe.batch_size);
        recipe.smoothing = smoothing.or(s.smoothing).unwrap_or(recipe.smoothing);
        recipe.linear_probe = linear_probe.or(s.linear_probe).unwrap_or(recipe.linear_probe);
        recipe.head_hidden = s.head_hidden.or(recipe.head_hidden);
        recipe.early_stop_val_auroc = early_stop.or(s.early_stop_val_auroc);
        recipe.augment = s.augment.unwrap_or(recipe.augment);
        Ok(recipe)
    }

    pub fn vqa_config(&self) -> Result<VqaConfig> {
        let mut cfg = VqaConfig::desk();
        let s = &self.vqa;
        cfg.lm_depth = s.lm_depth.unwrap_or(cfg.lm_depth);
        cfg.lm_dim = s.lm_dim.unwrap_or(cfg.lm_dim);
        cfg.lm_heads = s.lm_heads.unwrap_or(cfg.lm_heads);
        cfg.lm_mlp_ratio = s.lm_mlp_ratio.unwrap_or(cfg.lm_mlp_ratio);
        cfg.max_seq = s.max_seq.unwrap_or(cfg.max_seq);
        let base = cfg.lora.unwrap_or(LoraCfg { rank: 8, alpha: 16.0 });
        cfg.lora = Some(LoraCfg {
            rank: s.lora_rank.unwrap_or(base.rank),
            alpha: s.lora_alpha.unwrap_or(base.alpha),
        });
        cfg.pooled_only = s.pooled_only.unwrap_or(cfg.pooled_only);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vqa_recipe(
        &self,
        epochs: Option<f64>,
        peak_lr: Option<f64>,
        batch_size: Option<usize>,
        unfreeze_encoder: Option<bool>,
    ) -> Result<VqaRecipe> {
        let mut recipe = VqaRecipe::default();
        let s = &self.vqa;
        recipe.schedule = LrSchedule::new(
            recipe.schedule.warmup_epochs,
            epochs.or(s.total_epochs).unwrap_or(recipe.schedule.total_epochs),
            peak_lr.or(s.peak_lr).unwrap_or(recipe.schedule.peak),
            s.floor_lr.unwrap_or(recipe.schedule.floor),
        )?;
        recipe.batch_size = batch_size.or(s.batch_size).unwrap_or(recipe.batch_size);
        recipe.unfreeze_encoder =
            unfreeze_encoder.or(s.unfreeze_encoder).unwrap_or(recipe.unfreeze_encoder);
        Ok(recipe)
    }

    /// Seed list: flag > file > default five seeds. Must be non-empty and
    /// distinct.
    pub fn seeds(&self, flag: Option<&str>) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = match flag {
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
                .collect::<Result<_>>()?,
            None => self.run.seeds.clone().unwrap_or_else(|| vec![0, 1, 2, 3, 4]),
        };
        if seeds.is_empty() {
            bail!("seed list must not be empty");
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            bail!("seed list contains duplicates: {seeds:?}");
        }
        if let Some(t) = self.run.threads {
            if t == 0 {
                bail!("run.threads must be at least 1");
            }
        }
        Ok(seeds)
    }

    pub fn dataset_name(&self, flag: Option<&str>, fallback: &str) -> String {
        flag.map(str::to_string)
            .or_else(|| self.run.dataset.clone())
            .unwrap_or_else(|| fallback.to_string())
    }
}
