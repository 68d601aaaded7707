//! `vqa-train`: adapter-based fine-tuning of the answer decoder on a QA
//! manifest. `vqa-eval`: greedy generation plus text metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use omae_core::checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CheckpointMeta,
};
use omae_core::metrics::{bleu, vqa_text_metrics};
use omae_core::vqa::{
    greedy_decode, load_qa_manifest, save_predictions, vqa_finetune, QaPrediction, QaRecord,
    Tokenizer, VqaConfig, VqaPair,
};
use omae_core::ViTConfig;

use crate::commands::{check_model_echo, meta_field, require_rgb};
use crate::config::FileConfig;
use crate::io::{ensure_dir, write_json_atomic};
use crate::provider::PathProvider;
use crate::{VqaEvalArgs, VqaTrainArgs};

/// QA records reference images by path and may share them; collapse to a
/// unique path list (first-appearance order) plus per-pair indices.
fn index_pairs(records: &[QaRecord]) -> (Vec<String>, Vec<VqaPair>) {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut paths: Vec<String> = Vec::new();
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let image = *seen.entry(r.image_path.as_str()).or_insert_with(|| {
            paths.push(r.image_path.clone());
            paths.len() - 1
        });
        pairs.push(VqaPair { image, question: r.question.clone(), answer: r.answer.clone() });
    }
    (paths, pairs)
}

fn image_root(qa_manifest: &Path, flag: Option<&PathBuf>) -> PathBuf {
    match flag {
        Some(dir) => dir.clone(),
        None => qa_manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    }
}

pub fn run_train(a: VqaTrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let vit = file.vit_config(a.preset.as_deref(), a.image_size)?;
    require_rgb(&vit)?;
    let vqa_cfg = file.vqa_config()?;
    let recipe = file.vqa_recipe(a.epochs, a.peak_lr, a.batch_size, a.unfreeze_encoder)?;
    let seed = a.seed.unwrap_or(0);

    let records = load_qa_manifest(&a.qa)?;
    let (paths, pairs) = index_pairs(&records);
    let provider = PathProvider::new(image_root(&a.qa, a.images_dir.as_ref()), paths, vit.image_size);

    let encoder = match &a.encoder {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_model_echo(&ckpt.meta, &vit)?;
            Some(ckpt.params)
        }
        None => None,
    };

    let result = vqa_finetune(&provider, &pairs, &vit, &vqa_cfg, &recipe, encoder.as_ref(), seed)?;

    ensure_dir(&a.out_dir)?;
    let ckpt_path = a.out_dir.join("vqa.omae");
    save_checkpoint(
        &Checkpoint {
            meta: CheckpointMeta {
                config: serde_json::json!({
                    "model": vit,
                    "vqa": vqa_cfg,
                    "tokenizer": result.tokenizer,
                }),
                epoch: recipe.schedule.total_epochs.round() as u64,
                seed,
            },
            params: result.params.clone(),
            optimizer: None,
        },
        &ckpt_path,
    )?;
    write_atomic(&a.out_dir.join("loss.log"), result.loss_log.as_bytes())?;

    let final_loss = result.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "adapted on {} QA pairs ({} trainable scalars, vocab {}); final epoch loss {final_loss:.6}; wrote {}",
        pairs.len(),
        result.trainable_scalars,
        result.tokenizer.vocab_size(),
        ckpt_path.display()
    );
    Ok(())
}

pub fn run_eval(a: VqaEvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let kind = "vqa checkpoint";
    let vit: ViTConfig = meta_field(&ckpt.meta, "model", kind)?;
    let vqa_cfg: VqaConfig = meta_field(&ckpt.meta, "vqa", kind)?;
    let mut tokenizer: Tokenizer = meta_field(&ckpt.meta, "tokenizer", kind)?;
    tokenizer.rebuild_index();
    let max_len = a.max_len.unwrap_or(16);

    let records = load_qa_manifest(&a.qa)?;
    let provider = PathProvider::new(
        image_root(&a.qa, a.images_dir.as_ref()),
        Vec::new(),
        vit.image_size,
    );

    let mut predictions = Vec::with_capacity(records.len());
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut bleu1_sum = 0.0;
    for r in &records {
        let image = provider.load(&r.image_path)?;
        let answer =
            greedy_decode(&ckpt.params, &vit, &vqa_cfg, &tokenizer, &image, &r.question, max_len)
                .with_context(|| format!("answering {:?}", r.question))?;
        let m = vqa_text_metrics(&answer, &r.answer);
        em_sum += m.exact_match;
        f1_sum += m.f1;
        bleu1_sum += bleu(&answer, &[r.answer.as_str()], 1)?[0];
        predictions.push(QaPrediction {
            image_path: r.image_path.clone(),
            question: r.question.clone(),
            reference: r.answer.clone(),
            prediction: answer,
        });
    }

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_predictions(&a.out, &predictions)?;
    let n = records.len() as f64;
    let summary = serde_json::json!({
        "count": records.len(),
        "exact_match": em_sum / n,
        "f1": f1_sum / n,
        "bleu1": bleu1_sum / n,
    });
    if let Some(report) = &a.report {
        if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        write_json_atomic(report, &summary)?;
    }
    println!(
        "exact_match {:.4} f1 {:.4} bleu1 {:.4} over {} pairs; wrote {}",
        em_sum / n,
        f1_sum / n,
        bleu1_sum / n,
        records.len(),
        a.out.display()
    );
    Ok(())
}
