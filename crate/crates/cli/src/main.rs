use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remake_core::metrics::{EvalRegion, LossKind};
use remake_core::nn::Variant;
use remake_core::pipeline::config::layered;
use remake_core::pipeline::{
    ablate, analyze_regions, build_dataset, build_shift_benchmark, evaluate, export_cloud, infer, train, CloudDepth,
    DatasetSpec, EvalOptions, InferOptions, PredictionSource, ShiftBenchmarkSpec, TrainConfig,
};
use remake_core::regions::DEFAULT_TAU;
use remake_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(
    name = "remake",
    version,
    about = "Transparent-object depth completion at desk scale"
)]
struct Cli {
    /// Config file (JSON, or TOML with a .toml extension) layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training preset: desk | default.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// global | mask
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// full | blank | no-rel | no-mask | no-trans-depth
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// mask | all
    #[arg(long, global = true)]
    eval_region: Option<EvalRegion>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with an 80/10/10 split.
    BuildDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Build the near/far background benchmark instead (`--config` then
        /// describes the benchmark; `--count` is ignored).
        #[arg(long)]
        shift_benchmark: bool,
    },
    /// Train a model; writes model.ckpt and manifest.json.
    Train(TrainArgs),
    /// Score a checkpoint (or an oracle) on a dataset split.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score ground truth (`gt`) or raw depth (`raw`) instead of a model.
        #[arg(long, value_parser = ["gt", "raw"])]
        oracle: Option<String>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Train and evaluate all five input variants.
    Ablate(TrainArgs),
    /// Complete one sample directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// External relative-depth map (16-bit PNG or f32 grid with sidecar).
        #[arg(long)]
        rel_map: Option<PathBuf>,
    },
    /// Recover reflection/refraction/normal regions and their raw-depth errors.
    AnalyzeRegions {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a sample's point cloud as PLY (or CSV for a .csv output).
    ExportCloud {
        #[arg(long)]
        sample: PathBuf,
        /// gt | raw | path to a 16-bit depth PNG
        #[arg(long, default_value = "gt")]
        depth: String,
        /// Keep only transparent-mask pixels.
        #[arg(long)]
        object_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Cli {
    fn train_config(&self, args: &TrainArgs) -> Result<TrainConfig> {
        let base = TrainConfig::preset(self.preset.as_deref().unwrap_or("default"))?;
        let mut c = layered(&base, self.config.as_deref())?;
        if let Some(d) = &args.dataset {
            c.dataset = d.clone();
        }
        if let Some(o) = &args.out {
            c.output_dir = o.clone();
        }
        if let Some(e) = args.epochs {
            c.epochs = e;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(l) = self.loss {
            c.loss = l;
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(r) = self.eval_region {
            c.eval_region = r;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildDataset {
            out,
            count,
            shift_benchmark,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let index = if *shift_benchmark {
                let spec = layered(&ShiftBenchmarkSpec::default(), cli.config.as_deref())?;
                build_shift_benchmark(&spec, out, seed)?
            } else {
                let spec = layered(&DatasetSpec::default(), cli.config.as_deref())?;
                build_dataset(&spec, out, *count, seed)?
            };
            let sizes: serde_json::Map<String, serde_json::Value> =
                index.splits.iter().map(|(k, v)| (k.clone(), v.len().into())).collect();
            print_json(&serde_json::json!({ "dataset": out, "count": index.count, "splits": sizes }));
        }
        Command::Train(args) => {
            let config = cli.train_config(args)?;
            let outcome = train(&config)?;
            let m = &outcome.manifest;
            print_json(&serde_json::json!({
                "checkpoint": outcome.checkpoint,
                "checkpoint_sha256": m.checkpoint_sha256,
                "selection": m.selection,
                "selected_epoch": m.selected_epoch,
                "first_epoch_loss": m.epochs.first().map(|e| e.train_loss),
                "last_epoch_loss": m.epochs.last().map(|e| e.train_loss),
                "final_metrics": m.final_metrics,
            }));
        }
        Command::Evaluate {
            checkpoint,
            oracle,
            dataset,
            split,
            out,
            tau,
        } => {
            let source = match (checkpoint, oracle.as_deref()) {
                (_, Some("gt")) => PredictionSource::GroundTruth,
                (_, Some(_)) => PredictionSource::RawDepth,
                (Some(p), None) => PredictionSource::Checkpoint(p.clone()),
                (None, None) => return Err(Error::Config("--checkpoint or --oracle is required".into())),
            };
            let opts = EvalOptions {
                split: split.clone(),
                region: cli.eval_region.unwrap_or_default(),
                variant: cli.variant.unwrap_or(Variant::Full),
                tau: *tau,
                ..EvalOptions::default()
            };
            let result = evaluate(&source, dataset, &opts, cli.variant.is_some())?;
            result.write(out)?;
            print_json(&result.aggregate.to_json());
        }
        Command::Ablate(args) => {
            let config = cli.train_config(args)?;
            let table = ablate(&config, &config.output_dir)?;
            print!("{}", table.csv());
        }
        Command::Infer {
            checkpoint,
            sample,
            out,
            rel_map,
        } => {
            let opts = InferOptions {
                rel_map: rel_map.clone(),
                variant: cli.variant,
            };
            let result = infer(checkpoint, sample, out, &opts)?;
            for w in &result.warnings {
                log::warn!("{w}");
            }
            print_json(&serde_json::json!({
                "depth": out.join(remake_core::pipeline::infer::PRED_DEPTH_FILE),
                "object_points": result.object_points,
                "relative_depth": result.rel_origin,
                "metrics": result.metrics.map(|m| m.to_json()),
            }));
        }
        Command::AnalyzeRegions {
            dataset,
            split,
            tau,
            out,
        } => {
            let analysis = analyze_regions(dataset, split, *tau, out)?;
            print_json(&serde_json::json!({
                "samples": analysis.samples.len(),
                "pooled_fractions": analysis.pooled_fractions,
            }));
        }
        Command::ExportCloud {
            sample,
            depth,
            object_only,
            out,
        } => {
            let source = match depth.as_str() {
                "gt" => CloudDepth::GroundTruth,
                "raw" => CloudDepth::Raw,
                path => CloudDepth::File(Path::new(path).to_path_buf()),
            };
            let cloud = export_cloud(sample, &source, *object_only, out)?;
            print_json(&serde_json::json!({ "points": cloud.len(), "out": out }));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
