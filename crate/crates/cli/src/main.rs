//! `essd` — signal adverse drug reactions with an ensemble of simple study
//! designs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use essd::par;
use essd::pipeline::{self, GenerateSource, Manifest, Overrides, PipelineError};

#[derive(Parser)]
#[command(
    name = "essd",
    version,
    about = "Ensemble signalling of adverse drug reactions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (flat key = value file).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, value_name = "INT", default_value_t = 0)]
    workers: usize,
    /// Output directory; overrides the config file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Generate {
        /// Built-in preset: smoke, standard or confounded.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute features for every risk medical event.
    Features(Common),
    /// Tune mtry and train the forest on labelled pairs.
    Train(Common),
    /// Leave-one-family-out evaluation against each single design.
    Evaluate(Common),
    /// Score pairs with a trained model.
    Signal(Common),
}

type Action =
    Box<dyn FnOnce(&Overrides, Option<PathBuf>) -> Result<Manifest, PipelineError> + Send>;

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (common, action): (Common, Action) = match cli.command {
        Command::Generate { preset, common } => {
            let source = match (preset, &common.config) {
                (Some(p), _) => GenerateSource::Preset(p),
                (None, Some(c)) => GenerateSource::Config(c.clone()),
                (None, None) => {
                    return Err(PipelineError::Usage(
                        "generate needs --preset NAME or --config PATH".into(),
                    ))
                }
            };
            (
                common,
                Box::new(move |ov: &Overrides, _| pipeline::cmd_generate(&source, ov)),
            )
        }
        Command::Features(c) => (
            c,
            Box::new(|ov: &Overrides, cfg| pipeline::cmd_features(&need(cfg)?, ov)),
        ),
        Command::Train(c) => (
            c,
            Box::new(|ov: &Overrides, cfg| pipeline::cmd_train(&need(cfg)?, ov)),
        ),
        Command::Evaluate(c) => (
            c,
            Box::new(|ov: &Overrides, cfg| pipeline::cmd_evaluate(&need(cfg)?, ov)),
        ),
        Command::Signal(c) => (
            c,
            Box::new(|ov: &Overrides, cfg| pipeline::cmd_signal(&need(cfg)?, ov)),
        ),
    };
    let ov = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        workers: common.workers,
    };
    let manifest = par::with_workers(common.workers, || action(&ov, common.config.clone()))?;
    log::info!(
        "{} done: {} output file(s)",
        manifest.command,
        manifest.outputs.len()
    );
    for o in &manifest.outputs {
        println!("{}", o.file);
    }
    Ok(())
}

fn need(config: Option<PathBuf>) -> Result<PathBuf, PipelineError> {
    config.ok_or_else(|| PipelineError::Usage("--config PATH is required".into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ESSD_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            ExitCode::from(match e {
                PipelineError::Usage(_) => 2,
                _ => 1,
            })
        }
    }
}
