pub mod experiment;
pub mod preprocess;
pub mod pretrain;
pub mod vqa;
pub mod visualize;

use anyhow::{bail, Context};
use omae_core::checkpoint::CheckpointMeta;
use omae_core::ViTConfig;
use serde::de::DeserializeOwned;

/// Pull one typed key out of a checkpoint's config echo.
pub fn meta_field<T: DeserializeOwned>(
    meta: &CheckpointMeta,
    key: &str,
    expected_kind: &str,
) -> anyhow::Result<T> {
    let v = meta.config.get(key).cloned().ok_or_else(|| {
        anyhow::anyhow!("checkpoint metadata has no {key:?} key; is this a {expected_kind}?")
    })?;
    serde_json::from_value(v).with_context(|| format!("checkpoint metadata key {key:?}"))
}

/// Error out when a checkpoint's recorded architecture differs from the one
/// the current run is configured with.
pub fn check_model_echo(meta: &CheckpointMeta, vit: &ViTConfig) -> anyhow::Result<()> {
    if let Some(v) = meta.config.get("model") {
        let stored: ViTConfig =
            serde_json::from_value(v.clone()).context("checkpoint model echo")?;
        if &stored != vit {
            bail!(
                "checkpoint was built with a different architecture:\n  checkpoint: {stored:?}\n  configured: {vit:?}"
            );
        }
    }
    Ok(())
}

/// Disk datasets always serve RGB tensors.
pub fn require_rgb(vit: &ViTConfig) -> anyhow::Result<()> {
    if vit.in_channels != 3 {
        bail!("disk images are served as RGB; configure in_channels = 3 (got {})", vit.in_channels);
    }
    Ok(())
}
