use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use occloc::pipeline::{
    load_config, run_baseline, run_dataset, run_eval, run_gen, run_infer, run_train, BaselineConfig, DatasetConfig,
    GenConfig, InferCommandConfig, TrainCommandConfig,
};
use occloc::Error;

/// Localize internal structures from a single-view surface point cloud.
#[derive(Parser)]
#[command(name = "occloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config; flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and evaluation phantoms.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
    },
    /// Build (cloud, samples) training pairs from generated phantoms.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Output of `gen`, or a directory of .olv volumes.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        augmentations: Option<usize>,
    },
    /// Train the occupancy network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output of `dataset`, or a directory of .pair files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct atlases and boxes for point clouds.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One .xyz cloud or a directory of them.
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        /// Also write one OBJ mesh per class.
        #[arg(long)]
        meshes: bool,
        /// Fail unless the checkpoint predicts this many classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Compare predicted boxes with reference boxes.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Template-matching baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Template library, or a `gen` output holding one.
        #[arg(long)]
        templates: PathBuf,
        /// Directory of patient .xyz clouds (with optional reference boxes).
        #[arg(long)]
        patients: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Json(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> occloc::Result<()> {
    match cli.command {
        Command::Gen { common, train, eval } => {
            let mut cfg: GenConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.train = train.unwrap_or(cfg.train);
            cfg.eval = eval.unwrap_or(cfg.eval);
            run_gen(&cfg, &common.out)?;
        }
        Command::Dataset { common, input, augmentations } => {
            let mut cfg: DatasetConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.augmentations = augmentations.unwrap_or(cfg.augmentations);
            run_dataset(&cfg, &input, &common.out)?;
        }
        Command::Train { common, input, epochs, resume } => {
            let mut cfg: TrainCommandConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.resume |= resume;
            run_train(&cfg, &input, &common.out)?;
        }
        Command::Infer { common, checkpoint, cloud, resolution, probes, margin, meshes, classes } => {
            let mut cfg: InferCommandConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.params.resolution = resolution.unwrap_or(cfg.params.resolution);
            cfg.params.probes = probes.unwrap_or(cfg.params.probes);
            cfg.params.margin = margin.unwrap_or(cfg.params.margin);
            cfg.meshes |= meshes;
            cfg.expect_classes = classes.or(cfg.expect_classes);
            run_infer(&cfg, &checkpoint, &cloud, &common.out)?;
        }
        Command::Eval { predictions, references, out } => {
            run_eval(&predictions, &references, &out)?;
        }
        Command::Baseline { common, templates, patients } => {
            let cfg: BaselineConfig = load_config(common.config.as_deref())?;
            run_baseline(&cfg, &templates, &patients, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
