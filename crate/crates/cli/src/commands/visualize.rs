//! `visualize`: run one image through the masked autoencoder and write a
//! side-by-side panel of the original, the masked input, and the
//! reconstruction (visible patches kept, masked patches predicted).

use anyhow::Context;
use omae_core::checkpoint::load_checkpoint;
use omae_core::data::{load_image, resize_cubic, save_image, to_rgb3, IMAGENET_NORM};
use omae_core::mae::{random_mask, reconstruct_visualize};
use omae_core::rng::rng_from;
use omae_core::ViTConfig;

use crate::commands::{meta_field, require_rgb};
use crate::io::ensure_dir;
use crate::VisualizeArgs;

const GAP: usize = 2;

pub fn run(a: VisualizeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vit: ViTConfig = meta_field(&ckpt.meta, "model", "pretraining checkpoint")?;
    require_rgb(&vit)?;
    let s = vit.image_size;

    let (raw, c, h, w) = load_image(&a.image)?;
    let rgb = to_rgb3(&raw, c, h, w)?;
    let original = resize_cubic(&rgb, 3, h, w, s, s)?;

    let mut rng = rng_from(a.seed, &[]);
    let plan = random_mask(vit.num_patches(), a.mask_ratio, &mut rng)?;
    let recon = reconstruct_visualize(
        &original,
        &vit,
        &ckpt.params,
        &plan,
        &IMAGENET_NORM.mean,
        &IMAGENET_NORM.std,
    )
    .context("reconstructing")?;

    // Masked panel: grey out every hidden patch.
    let mut masked = original.clone();
    let ps = vit.patch_size;
    let grid = vit.grid();
    for (l, &m) in plan.mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (py, px) = ((l / grid) * ps, (l % grid) * ps);
        for ch in 0..3 {
            for dy in 0..ps {
                for dx in 0..ps {
                    masked[ch * s * s + (py + dy) * s + (px + dx)] = 127;
                }
            }
        }
    }

    // Three panels separated by white gaps.
    let width = 3 * s + 2 * GAP;
    let mut out = vec![255u8; 3 * s * width];
    for (i, panel) in [&original, &masked, &recon].into_iter().enumerate() {
        let x0 = i * (s + GAP);
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    out[ch * s * width + y * width + x0 + x] = panel[ch * s * s + y * s + x];
                }
            }
        }
    }

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_image(&a.out, &out, 3, s, width)?;
    println!(
        "masked {} of {} patches (ratio {}); wrote {}x{} panel to {}",
        plan.mask.iter().filter(|&&m| m != 0.0).count(),
        vit.num_patches(),
        a.mask_ratio,
        width,
        s,
        a.out.display()
    );
    Ok(())
}
