//! `preprocess`: quality-filter a raw corpus, crop away background, resize,
//! and emit the processed images plus an updated manifest.
//! `split`: assign train/val/test splits to a manifest.

use anyhow::Context;
use omae_core::data::{
    crop_threshold_for, load_image, quality_filter, resize_cubic, save_image, split_dataset,
    threshold_crop, Manifest, Split,
};

use crate::io::ensure_dir;
use crate::{PreprocessArgs, SplitArgs};

pub fn run(a: PreprocessArgs) -> anyhow::Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    if a.size == 0 {
        anyhow::bail!("--size must be at least 1");
    }
    ensure_dir(&a.output_dir)?;

    let mut kept = Vec::new();
    let mut excluded = 0usize;
    for rec in &manifest.records {
        if !quality_filter(rec)? {
            excluded += 1;
            continue;
        }
        let src = a.input_dir.join(&rec.path);
        let (raw, c, h, w) = load_image(&src)?;
        let (cropped, ch, cw) = threshold_crop(&raw, c, h, w, crop_threshold_for(rec.modality))
            .with_context(|| format!("cropping {}", rec.path))?;
        let resized = resize_cubic(&cropped, c, ch, cw, a.size, a.size)
            .with_context(|| format!("resizing {}", rec.path))?;
        let dst = a.output_dir.join(&rec.path);
        if let Some(parent) = dst.parent() {
            ensure_dir(parent)?;
        }
        save_image(&dst, &resized, c, a.size, a.size)
            .with_context(|| format!("writing {}", dst.display()))?;
        kept.push(rec.clone());
    }

    let total = manifest.records.len();
    let out_manifest = Manifest {
        dataset: manifest.dataset.clone(),
        classes: manifest.classes.clone(),
        records: kept,
    };
    let manifest_path = a.output_dir.join("manifest.jsonl");
    out_manifest.save(&manifest_path)?;
    println!(
        "kept {} of {total} records ({excluded} excluded by quality filter); wrote {}",
        out_manifest.records.len(),
        manifest_path.display()
    );
    Ok(())
}

pub fn run_split(a: SplitArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::load(&a.manifest)?;
    split_dataset(&mut manifest, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    manifest.save(&a.out)?;
    println!(
        "split {} records: {} train / {} val / {} test; wrote {}",
        manifest.records.len(),
        manifest.indices_in(Split::Train).len(),
        manifest.indices_in(Split::Val).len(),
        manifest.indices_in(Split::Test).len(),
        a.out.display()
    );
    Ok(())
}
