//! The supervised-evaluation protocol: `finetune` runs the full multi-seed
//! experiment (train → score test split → metrics → aggregated report),
//! `predict`/`evaluate` expose the two halves individually, and `compare`
//! runs the significance test between two reports.

use std::path::Path;

use anyhow::{bail, Context};
use omae_core::checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CheckpointMeta,
};
use omae_core::classify::{finetune, prediction_set, FinetuneRecipe, LabeledSet, TaskMode};
use omae_core::data::{DiskDataset, Split};
use omae_core::metrics::{
    evaluate_set, t_test_paired, t_test_welch, EvalReport, PredictionSet, SetEval,
};
use omae_core::nn::Params;
use omae_core::ViTConfig;

use crate::commands::{check_model_echo, meta_field, require_rgb};
use crate::config::FileConfig;
use crate::io::{ensure_dir, read_json, write_json_atomic};
use crate::{CompareArgs, EvaluateArgs, FinetuneArgs, PredictArgs};

fn mode_str(mode: TaskMode) -> &'static str {
    match mode {
        TaskMode::SingleLabel => "single-label",
        TaskMode::MultiLabel => "multi-label",
    }
}

fn parse_mode(s: &str) -> anyhow::Result<TaskMode> {
    match s {
        "single-label" => Ok(TaskMode::SingleLabel),
        "multi-label" => Ok(TaskMode::MultiLabel),
        other => bail!("unknown task mode {other:?} in checkpoint"),
    }
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train, val or test)"),
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    ds: &DiskDataset,
    set: &LabeledSet,
    test: &[usize],
    vit: &ViTConfig,
    recipe: &FinetuneRecipe,
    mode: TaskMode,
    encoder: Option<&Params>,
    seed: u64,
    out_dir: &Path,
    report_dir: &Path,
    dataset: &str,
) -> anyhow::Result<SetEval> {
    let result =
        finetune(set, vit, recipe, encoder, seed).with_context(|| format!("seed {seed}"))?;
    for w in &result.warnings {
        log::warn!("seed {seed}: {w}");
    }

    let meta_config = serde_json::json!({
        "model": vit,
        "mode": mode_str(mode),
        "head_hidden": recipe.head_hidden,
        "classes": ds.manifest.classes,
        "dataset": dataset,
    });
    save_checkpoint(
        &Checkpoint {
            meta: CheckpointMeta {
                config: meta_config,
                epoch: result.best_epoch as u64,
                seed,
            },
            params: result.best_params.clone(),
            optimizer: None,
        },
        &out_dir.join(format!("ckpt_seed{seed}.omae")),
    )?;
    write_atomic(
        &out_dir.join(format!("metrics_seed{seed}.jsonl")),
        result.metrics_log.as_bytes(),
    )?;

    let mut preds = prediction_set(&result.best_params, vit, recipe, set, test)?;
    preds.class_names = ds.manifest.classes.clone();
    write_json_atomic(&report_dir.join(format!("preds_seed{seed}.json")), &preds)?;
    let eval = evaluate_set(&preds)?;
    write_json_atomic(&report_dir.join(format!("eval_seed{seed}.json")), &eval)?;
    println!(
        "seed {seed}: best epoch {} (val AUROC {:.4}); test macro AUROC {:.4} AUPR {:.4}",
        result.best_epoch, result.best_val_auroc, eval.macro_auroc, eval.macro_aupr
    );
    Ok(eval)
}

pub fn run_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let vit = file.vit_config(a.preset.as_deref(), a.image_size)?;
    require_rgb(&vit)?;
    let mode = file.task_mode(a.mode.as_deref())?;
    let recipe = file.finetune_recipe(
        mode,
        a.epochs,
        a.batch_size,
        a.linear_probe,
        a.early_stop_val_auroc,
        a.smoothing,
    )?;
    let seeds = file.seeds(a.seeds.as_deref())?;

    let ds = DiskDataset::open(&a.manifest, vit.image_size)?;
    if ds.manifest.classes.is_empty() {
        bail!("manifest {} declares no classes", a.manifest.display());
    }
    let fallback =
        if ds.manifest.dataset.is_empty() { "dataset" } else { ds.manifest.dataset.as_str() };
    let dataset = file.dataset_name(a.dataset.as_deref(), fallback);

    let encoder = match &a.encoder {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_model_echo(&ckpt.meta, &vit)?;
            Some(ckpt.params)
        }
        None => None,
    };

    let labels: Vec<Vec<usize>> = ds.manifest.records.iter().map(|r| r.labels.clone()).collect();
    let set = LabeledSet {
        provider: &ds,
        labels: &labels,
        train: ds.manifest.indices_in(Split::Train),
        val: ds.manifest.indices_in(Split::Val),
        num_classes: ds.manifest.classes.len(),
    };
    let test = ds.manifest.indices_in(Split::Test);
    if test.is_empty() {
        bail!("manifest {} has no test records to evaluate", a.manifest.display());
    }

    ensure_dir(&a.out_dir)?;
    ensure_dir(&a.report_dir)?;

    let mut evals: Vec<SetEval> = Vec::new();
    let mut completed: Vec<u64> = Vec::new();
    for &seed in &seeds {
        match run_seed(
            &ds,
            &set,
            &test,
            &vit,
            &recipe,
            mode,
            encoder.as_ref(),
            seed,
            &a.out_dir,
            &a.report_dir,
            &dataset,
        ) {
            Ok(eval) => {
                evals.push(eval);
                completed.push(seed);
            }
            Err(e) => {
                let partial = serde_json::json!({
                    "dataset": dataset,
                    "completed_seeds": completed,
                    "failed_seed": seed,
                    "error": format!("{e:#}"),
                    "evals": evals,
                });
                let path = a.report_dir.join("partial_results.json");
                write_json_atomic(&path, &partial)?;
                return Err(e.context(format!(
                    "seed {seed} failed; partial results saved to {}",
                    path.display()
                )));
            }
        }
    }

    let report = EvalReport::from_evals(&dataset, &ds.manifest.classes, &evals, None)?;
    write_json_atomic(&a.report_dir.join("report.json"), &report)?;
    write_atomic(&a.report_dir.join("report.txt"), report.to_text().as_bytes())?;
    println!("{}", report.table_row());
    Ok(())
}

pub fn run_predict(a: PredictArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let kind = "fine-tuned classifier checkpoint";
    let vit: ViTConfig = meta_field(&ckpt.meta, "model", kind)?;
    let mode = parse_mode(&meta_field::<String>(&ckpt.meta, "mode", kind)?)?;
    let head_hidden: Option<usize> = meta_field(&ckpt.meta, "head_hidden", kind)?;
    let classes: Vec<String> = meta_field(&ckpt.meta, "classes", kind)?;

    let mut recipe = match mode {
        TaskMode::SingleLabel => FinetuneRecipe::single_label(),
        TaskMode::MultiLabel => FinetuneRecipe::multi_label(),
    };
    recipe.head_hidden = head_hidden;

    let ds = DiskDataset::open(&a.manifest, vit.image_size)?;
    if ds.manifest.classes != classes {
        bail!(
            "manifest classes {:?} do not match checkpoint classes {:?}",
            ds.manifest.classes,
            classes
        );
    }
    let split = parse_split(&a.split)?;
    let indices = ds.manifest.indices_in(split);
    if indices.is_empty() {
        bail!("no {} records in {}", a.split, a.manifest.display());
    }
    let labels: Vec<Vec<usize>> = ds.manifest.records.iter().map(|r| r.labels.clone()).collect();
    if mode == TaskMode::SingleLabel {
        for &i in &indices {
            if labels[i].len() != 1 {
                bail!(
                    "{}: single-label scoring needs exactly one label, got {}",
                    ds.manifest.records[i].path,
                    labels[i].len()
                );
            }
        }
    }
    let set = LabeledSet {
        provider: &ds,
        labels: &labels,
        train: Vec::new(),
        val: Vec::new(),
        num_classes: classes.len(),
    };
    let mut preds = prediction_set(&ckpt.params, &vit, &recipe, &set, &indices)?;
    preds.class_names = classes;
    ensure_parent(&a.out)?;
    write_json_atomic(&a.out, &preds)?;
    println!("wrote {} predictions ({} split) to {}", indices.len(), a.split, a.out.display());
    Ok(())
}

pub fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let preds: PredictionSet = read_json(&a.predictions)?;
    preds.validate()?;
    let eval = evaluate_set(&preds)?;
    match &a.out {
        Some(path) => {
            ensure_parent(path)?;
            write_json_atomic(path, &eval)?;
            println!(
                "macro AUROC {:.6}  macro AUPR {:.6}; wrote {}",
                eval.macro_auroc,
                eval.macro_aupr,
                path.display()
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&eval)?),
    }
    Ok(())
}

pub fn run_compare(a: CompareArgs) -> anyhow::Result<()> {
    let report_a: EvalReport = read_json(&a.report_a)?;
    let report_b: EvalReport = read_json(&a.report_b)?;
    let paired = a.paired.unwrap_or(false);
    let p = if paired {
        t_test_paired(&report_a.seed_auroc, &report_b.seed_auroc)?
    } else {
        t_test_welch(&report_a.seed_auroc, &report_b.seed_auroc)?
    };
    let annotated = EvalReport { p_value: Some(p), ..report_a };
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_json_atomic(out, &annotated)?;
    }
    println!("{} p_value {p:.6}", if paired { "paired" } else { "welch" });
    println!("{}", annotated.table_row());
    Ok(())
}
