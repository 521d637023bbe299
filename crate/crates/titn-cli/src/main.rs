//! `titn`: train, evaluate and inspect the two-level vision transformer.

mod commands;
mod config;

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use titn_core::augment::AugmentConfig;
use titn_core::distill::LossConfig;
use titn_core::pipeline::data::Split;
use titn_core::pipeline::TrainConfig;
use titn_core::titn::ModelConfig;

use config::{
    default_inner_heads, default_outer_heads, merged, parse_config_file, DatasetKind, DatasetSpec,
    RunManifest, TeacherSpec,
};

#[derive(Parser)]
#[command(
    name = "titn",
    version,
    about = "Two-level (inner/outer) vision transformer with a distillation token"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    init_rayon_pool();
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// `TITN_NUM_WORKERS` caps worker parallelism for evaluation sharding.
fn init_rayon_pool() {
    if let Ok(raw) = std::env::var("TITN_NUM_WORKERS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes manifest.json, metrics.csv and checkpoints
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Report parameter counts and analytic FLOPs for a configuration
    Inspect(InspectArgs),
    /// Validate a teacher logits file and report its accuracy
    TeacherCheck(TeacherCheckArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset: mnist|cifar10|cifar100|synthetic
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Directory with the dataset files (mnist/cifar)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Class count (synthetic and inspect only; fixed by on-disk datasets)
    #[arg(long)]
    num_classes: Option<usize>,
    /// Image size (synthetic and inspect only)
    #[arg(long)]
    image_size: Option<usize>,
    /// Synthetic training-set size
    #[arg(long)]
    synthetic_train: Option<usize>,
    /// Synthetic test-set size
    #[arg(long)]
    synthetic_test: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Outer patch size in pixels
    #[arg(long)]
    patch_size: Option<usize>,
    /// Inner pixel-token size in pixels
    #[arg(long)]
    pixel_size: Option<usize>,
    /// Outer (patch) embedding width
    #[arg(long = "dim")]
    patch_dim: Option<usize>,
    /// Inner (pixel) embedding width
    #[arg(long)]
    pixel_dim: Option<usize>,
    /// Stacked inner/outer block pairs
    #[arg(long)]
    depth: Option<usize>,
    /// Outer attention heads (default: largest of 3/4/2 dividing --dim)
    #[arg(long)]
    heads: Option<usize>,
    /// Inner attention heads (default: 2 when --pixel-dim is even)
    #[arg(long)]
    inner_heads: Option<usize>,
    /// MLP expansion ratio
    #[arg(long)]
    mlp_ratio: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (at least 2)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate (cosine-annealed to zero)
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay (norm affines, tokens and positional embeddings excluded)
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Beta parameter for CutMix lambda sampling
    #[arg(long)]
    cutmix_alpha: Option<f64>,
    /// Probability of applying CutMix to a batch
    #[arg(long)]
    cutmix_prob: Option<f64>,
    /// Mixing weight between the CutMix term and the distillation term
    #[arg(long)]
    distill_alpha: Option<f64>,
    /// Crop padding in pixels
    #[arg(long)]
    crop_pad: Option<usize>,
    /// Horizontal flip probability
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Teacher: none | oracle | file:<path>
    #[arg(long)]
    teacher: Option<String>,
    /// Master seed for init, shuffling, augmentation and synthetic data
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for manifest, metrics and checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file merged beneath explicit flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run a previous run's manifest verbatim (other flags ignored)
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Seed (must match the training run for synthetic data)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional output directory for eval.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Input channels
    #[arg(long)]
    in_channels: Option<usize>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TeacherCheckArgs {
    /// Teacher logits file (TLOG format)
    #[arg(long)]
    file: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which split the logits cover
    #[arg(long, default_value = "train")]
    split: String,
    /// Seed (synthetic data regeneration)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let manifest = match &args.from_manifest {
                Some(path) => {
                    let mut m = RunManifest::load(path)?;
                    m.out_dir = args.out.display().to_string();
                    m
                }
                None => build_manifest(&args)?,
            };
            commands::run_train(&manifest)
        }
        Command::Eval(args) => {
            let spec = dataset_spec(&args.data, &HashMap::new())?;
            commands::run_eval(
                &args.checkpoint,
                &spec,
                args.seed,
                args.out.as_deref(),
                args.json,
            )
        }
        Command::Inspect(args) => {
            let file = HashMap::new();
            // inspect defaults to the flagship configuration
            let image_size = args.data.image_size.unwrap_or(32);
            let num_classes = args.data.num_classes.unwrap_or(100);
            let in_channels = args.in_channels.unwrap_or(3);
            let config = model_config(&args.model, &file, image_size, in_channels, num_classes)?;
            commands::run_inspect(&config, args.json)
        }
        Command::TeacherCheck(args) => {
            let split = match args.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => bail!("unknown split {other} (expected train|test)"),
            };
            let spec = dataset_spec(&args.data, &HashMap::new())?;
            commands::run_teacher_check(&args.file, &spec, split, args.seed, args.json)
        }
    }
}

/// Dataset geometry is fixed by the on-disk formats; synthetic is
/// configurable.
fn dataset_spec(data: &DataArgs, file: &HashMap<String, String>) -> Result<DatasetSpec> {
    let kind: DatasetKind = merged(
        Some(data.dataset.clone()),
        file,
        "dataset",
        "synthetic".to_string(),
    )?
    .parse()?;
    let (num_classes, image_size, in_channels) = match kind {
        DatasetKind::Mnist => (10, 32, 1), // resized from 28x28 at load
        DatasetKind::Cifar10 => (10, 32, 3),
        DatasetKind::Cifar100 => (100, 32, 3),
        DatasetKind::Synthetic => (
            merged(data.num_classes, file, "num_classes", 3)?,
            merged(data.image_size, file, "image_size", 16)?,
            1,
        ),
    };
    Ok(DatasetSpec {
        name: kind.to_string(),
        data_dir: data.data_dir.as_ref().map(|p| p.display().to_string()),
        num_classes,
        image_size,
        in_channels,
        synthetic_train: merged(data.synthetic_train, file, "synthetic_train", 1500)?,
        synthetic_test: merged(data.synthetic_test, file, "synthetic_test", 300)?,
    })
}

fn model_config(
    model: &ModelArgs,
    file: &HashMap<String, String>,
    image_size: usize,
    in_channels: usize,
    num_classes: usize,
) -> Result<ModelConfig> {
    let patch_dim = merged(model.patch_dim, file, "dim", 192)?;
    let pixel_dim = merged(model.pixel_dim, file, "pixel_dim", 12)?;
    let config = ModelConfig {
        image_size,
        in_channels,
        patch_size: merged(model.patch_size, file, "patch_size", 8)?,
        pixel_size: merged(model.pixel_size, file, "pixel_size", 2)?,
        patch_dim,
        pixel_dim,
        depth: merged(model.depth, file, "depth", 12)?,
        outer_heads: merged(model.heads, file, "heads", default_outer_heads(patch_dim))?,
        inner_heads: merged(
            model.inner_heads,
            file,
            "inner_heads",
            default_inner_heads(pixel_dim),
        )?,
        mlp_ratio: merged(model.mlp_ratio, file, "mlp_ratio", 4)?,
        num_classes,
    };
    config.validate()?;
    Ok(config)
}

fn build_manifest(args: &TrainArgs) -> Result<RunManifest> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    let dataset = dataset_spec(&args.data, &file)?;
    let model = model_config(
        &args.model,
        &file,
        dataset.image_size,
        dataset.in_channels,
        dataset.num_classes,
    )?;
    let seed = merged(args.seed, &file, "seed", 0)?;
    let train = TrainConfig {
        batch_size: merged(args.batch_size, &file, "batch_size", 32)?,
        epochs: merged(args.epochs, &file, "epochs", 20)?,
        lr_max: merged(args.lr, &file, "lr", 0.1)?,
        lr_min: 0.0,
        momentum: merged(args.momentum, &file, "momentum", 0.9)?,
        weight_decay: merged(args.weight_decay, &file, "weight_decay", 1e-4)?,
        seed,
        scheduler_total: None,
        loss: LossConfig {
            distill_alpha: merged(args.distill_alpha, &file, "distill_alpha", 0.5)?,
            cutmix_alpha: merged(args.cutmix_alpha, &file, "cutmix_alpha", 0.5)?,
        },
        augment: AugmentConfig {
            crop_pad: merged(args.crop_pad, &file, "crop_pad", 2)?,
            flip_prob: merged(args.flip_prob, &file, "flip_prob", 0.5)?,
            cutmix_prob: merged(args.cutmix_prob, &file, "cutmix_prob", 1.0)?,
        },
    };
    train.validate()?;
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        dataset,
        dataset_checksum: None,
        teacher: TeacherSpec(merged(
            args.teacher.clone(),
            &file,
            "teacher",
            "none".to_string(),
        )?),
        model,
        train,
        out_dir: args.out.display().to_string(),
    })
}
