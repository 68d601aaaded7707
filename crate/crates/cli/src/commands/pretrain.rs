//! `pretrain`: masked-autoencoder pretraining over every record in a
//! manifest, checkpointing after each epoch.

use omae_core::checkpoint::{save_checkpoint, write_atomic, Checkpoint, CheckpointMeta};
use omae_core::data::DiskDataset;
use omae_core::mae::pretrain;

use crate::commands::require_rgb;
use crate::config::FileConfig;
use crate::io::ensure_dir;
use crate::PretrainArgs;

pub fn run(a: PretrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let vit = file.vit_config(a.preset.as_deref(), a.image_size)?;
    require_rgb(&vit)?;
    let opts = file.pretrain_opts(a.seed, a.epochs, a.batch_size, a.mask_ratio, a.augment)?;

    let dataset = DiskDataset::open(&a.manifest, vit.image_size)?;
    ensure_dir(&a.out_dir)?;
    let ckpt_path = a.out_dir.join("checkpoint.omae");
    let meta_config = serde_json::json!({
        "model": vit,
        "norm_pix_loss": opts.norm_pix_loss,
    });

    let result = pretrain(&dataset, &vit, &opts, |epoch, params| {
        save_checkpoint(
            &Checkpoint {
                meta: CheckpointMeta {
                    config: meta_config.clone(),
                    epoch: epoch as u64,
                    seed: opts.seed,
                },
                params: params.clone(),
                optimizer: None,
            },
            &ckpt_path,
        )
    })?;

    let log_path = a.out_dir.join("loss.log");
    write_atomic(&log_path, result.loss_log.as_bytes())?;
    let final_loss = result.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs on {} images (final epoch loss {final_loss:.6}); wrote {}",
        result.epoch_losses.len(),
        dataset.manifest.records.len(),
        ckpt_path.display()
    );
    Ok(())
}
