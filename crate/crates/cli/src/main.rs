use clap::{Parser, Subcommand, ValueEnum};
use diffseg::config::RunConfig;
use diffseg::model::SamplerKind;
use diffseg_cli as cmd;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "diffseg", version, about = "Diffusion-based temporal action segmentation")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict labels for the evaluation split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        sampler: Sampler,
        /// Subsample, recombine and median-filter; defaults to the config.
        #[arg(long, value_enum)]
        augment: Option<Switch>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare fixed and adaptive sampling and sweep fixed step budgets.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> diffseg::Result<(RunConfig, bool)> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, path.is_some() || seed.is_some()))
}

fn run(cli: Cli) -> diffseg::Result<String> {
    let (cfg, explicit) = resolve_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData => json(&cmd::cmd_gen_data(&cfg, out)?),
        Command::Train { data, resume } => json(&cmd::cmd_train(&cfg, &data, out, resume.as_deref())?),
        Command::Infer {
            checkpoint,
            data,
            sampler,
            augment,
        } => {
            let model = cmd::load_model(&checkpoint, explicit.then_some(&cfg))?;
            let kind = match sampler {
                Sampler::Fixed => SamplerKind::Fixed,
                Sampler::Adaptive => SamplerKind::Adaptive,
            };
            let augment = augment.map_or(model.cfg.augment, |a| matches!(a, Switch::On));
            json(&cmd::cmd_infer(&model, &data, out, kind, augment)?)
        }
        Command::Eval { pred, data } => json(&cmd::cmd_eval(&cfg, &pred, &data, out)?),
        Command::Bench { checkpoint, data } => {
            let model = cmd::load_model(&checkpoint, explicit.then_some(&cfg))?;
            json(&cmd::cmd_bench(&model, &data, out)?)
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> diffseg::Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            // A closed pipe on stdout is not a command failure.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
