//! The four subcommands: train, eval, inspect, teacher-check.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use titn_core::augment::channel_stats;
use titn_core::checkpoint::load_checkpoint;
use titn_core::distill::TeacherLogits;
use titn_core::pipeline::data::Split;
use titn_core::pipeline::metrics::{evaluate, metrics_from_logits, EvalMetrics, CSV_HEADER};
use titn_core::pipeline::train;
use titn_core::titn::{flops_per_image_items, parameter_count_items, TitnModel};

use crate::config::{dataset_checksum, ensure_out_dir, DatasetSpec, RunManifest};

/// Execute a resolved manifest: load data, write artifacts, train.
pub fn run_train(manifest: &RunManifest) -> Result<()> {
    let out = ensure_out_dir(Path::new(&manifest.out_dir))?;
    let train_set = manifest.dataset.load(Split::Train, manifest.seed)?;
    let test_set = manifest.dataset.load(Split::Test, manifest.seed)?;
    let checksum = dataset_checksum(&train_set, &test_set);
    if let Some(expected) = &manifest.dataset_checksum {
        if *expected != checksum {
            bail!(
                "dataset checksum {checksum} does not match the manifest ({expected}); \
                 the data on disk changed since the original run"
            );
        }
    }
    let mut manifest = manifest.clone();
    manifest.dataset_checksum = Some(checksum);
    manifest.out_dir = out.display().to_string();
    manifest.save(&out.join("manifest.json"))?;

    let teacher = manifest.teacher.build(&train_set)?;
    let mut model = TitnModel::new(manifest.model.clone(), manifest.seed)?;
    println!(
        "training {} on {} ({} train / {} test), {} parameters",
        manifest.model.patch_dim,
        manifest.dataset.name,
        train_set.len(),
        test_set.len(),
        model.params.total_scalars()
    );

    let csv_path = out.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(csv, "{CSV_HEADER}")?;
    let result = train(
        &mut model,
        &train_set,
        &test_set,
        teacher.as_deref(),
        &manifest.train,
        Some(&out),
        |r| {
            writeln!(csv, "{}", r.csv_row()).expect("metrics.csv write");
            csv.flush().expect("metrics.csv flush");
            println!(
                "epoch {:>3}  loss {:.4}  top1 {:.4}  top5 {:.4}  lr {:.5}  {:.1}s",
                r.epoch, r.train_loss, r.top1, r.top5, r.lr, r.seconds
            );
        },
    )?;
    println!(
        "best top1 {:.4} at epoch {} (checkpoints in {})",
        result.best_top1,
        result.best_epoch,
        out.display()
    );
    Ok(())
}

fn print_metrics(m: &EvalMetrics, json: bool) -> Result<()> {
    if json {
        println!(
            "{}",
            serde_json::json!({
                "top1": m.top1,
                "top5": m.top5,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
            })
        );
    } else {
        println!("top1      {:.4}", m.top1);
        println!("top5      {:.4}", m.top5);
        println!("precision {:.4}", m.precision);
        println!("recall    {:.4}", m.recall);
        println!("f1        {:.4}", m.f1);
    }
    Ok(())
}

pub fn run_eval(
    checkpoint: &Path,
    dataset: &DatasetSpec,
    seed: u64,
    out: Option<&Path>,
    json: bool,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let train_set = dataset.load(Split::Train, seed)?;
    let test_set = dataset.load(Split::Test, seed)?;
    if test_set.num_classes != model.config.num_classes {
        bail!(
            "dataset has {} classes but the checkpoint was trained for {}",
            test_set.num_classes,
            model.config.num_classes
        );
    }
    // normalization constants always come from the training split
    let stats = channel_stats(&train_set.images, train_set.dims);
    let metrics = evaluate(&model, &test_set, &stats)?;
    print_metrics(&metrics, json)?;
    if let Some(out) = out {
        let out = ensure_out_dir(out)?;
        let path = out.join("eval.csv");
        let row = format!(
            "0,0,{},{},{},{},{},0,0",
            metrics.top1, metrics.top5, metrics.precision, metrics.recall, metrics.f1
        );
        std::fs::write(&path, format!("{CSV_HEADER}\n{row}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn run_inspect(config: &titn_core::titn::ModelConfig, json: bool) -> Result<()> {
    let started = Instant::now();
    config.validate()?;
    let params = parameter_count_items(config);
    let flops = flops_per_image_items(config);
    let total_params: u64 = params.iter().map(|(_, n)| n).sum();
    let total_flops: u64 = flops.iter().map(|(_, n)| n).sum();
    if json {
        println!(
            "{}",
            serde_json::json!({
                "config": config,
                "total_params": total_params,
                "params": params.iter().map(|(n, c)| serde_json::json!({"name": n, "count": c})).collect::<Vec<_>>(),
                "total_flops_per_image": total_flops,
                "flops_per_image": flops.iter().map(|(n, c)| serde_json::json!({"name": n, "count": c})).collect::<Vec<_>>(),
            })
        );
    } else {
        println!("configuration: {config:?}");
        println!("\nparameters:");
        for (name, count) in &params {
            println!("  {name:<16} {count:>12}");
        }
        println!("  {:<16} {:>12}", "total", total_params);
        println!("  ({:.2}M parameters)", total_params as f64 / 1e6);
        println!("\nforward FLOPs per image (2 x matmul MACs):");
        for (name, count) in &flops {
            println!("  {name:<16} {count:>14}");
        }
        println!("  {:<16} {:>14}", "total", total_flops);
        println!("  ({:.3} GFLOPs per image)", total_flops as f64 / 1e9);
        println!("\nelapsed: {:.3}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}

pub fn run_teacher_check(
    file: &Path,
    dataset: &DatasetSpec,
    split: Split,
    seed: u64,
    json: bool,
) -> Result<()> {
    let logits = TeacherLogits::load(file)?;
    let ds = dataset.load(split, seed)?;
    if logits.num_samples != ds.len() {
        bail!(
            "teacher file holds {} rows but the dataset split has {} samples",
            logits.num_samples,
            ds.len()
        );
    }
    if logits.num_classes != ds.num_classes {
        bail!(
            "teacher file has {} classes but the dataset has {}",
            logits.num_classes,
            ds.num_classes
        );
    }
    let scores: Vec<f64> = logits.scores.iter().map(|&v| v as f64).collect();
    let metrics = metrics_from_logits(&scores, logits.num_classes, &ds.labels);
    if json {
        println!(
            "{}",
            serde_json::json!({
                "valid": true,
                "num_samples": logits.num_samples,
                "num_classes": logits.num_classes,
                "teacher_top1": metrics.top1,
                "teacher_top5": metrics.top5,
            })
        );
    } else {
        println!(
            "teacher file OK: {} samples x {} classes, no NaN",
            logits.num_samples, logits.num_classes
        );
        println!("teacher top1 {:.4}", metrics.top1);
        println!("teacher top5 {:.4}", metrics.top5);
    }
    Ok(())
}
