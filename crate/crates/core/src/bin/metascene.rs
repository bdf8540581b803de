//! Command-line entry point: pretrain, meta-train, adapt, evaluate,
//! generate synthetic data, and assemble reports.

use clap::{Args, Parser, Subcommand};
use metascene::config::RunConfig;
use metascene::error::Error;
use metascene::pipeline::{self, Method};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "metascene",
    about = "Few-shot scene-adaptive video anomaly detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.sets {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {assignment:?}"))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially pre-train the prediction backbone on the train scenes.
    Pretrain(ConfigArgs),
    /// Meta-train from the pre-trained checkpoint.
    Metatrain(ConfigArgs),
    /// Adapt the meta-trained model to one scene and save the result.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scene to adapt to.
        #[arg(long)]
        scene: String,
        /// Number of adaptation frame pairs; defaults to the config's `k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the evaluation grid over methods and K values.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Methods to evaluate (pre-trained, fine-tuned, ours). Defaults to all.
        #[arg(long)]
        method: Vec<String>,
    },
    /// Generate a synthetic multi-scene corpus.
    SynthGen {
        /// Number of scenes.
        #[arg(long)]
        scenes: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
    },
    /// Assemble the comparison table from recorded results.
    Report(ConfigArgs),
}

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

fn run(cli: Cli) -> Result<(), (u8, Error)> {
    let usage = |e: Error| (EXIT_USAGE, e);
    let runtime = |e: Error| (EXIT_RUNTIME, e);
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve().map_err(usage)?;
            let path = pipeline::run_pretrain(&cfg).map_err(runtime)?;
            println!("wrote {}", path.display());
        }
        Command::Metatrain(args) => {
            let cfg = args.resolve().map_err(usage)?;
            let path = pipeline::run_metatrain(&cfg).map_err(runtime)?;
            println!("wrote {}", path.display());
        }
        Command::Adapt { config, scene, k } => {
            let cfg = config.resolve().map_err(usage)?;
            let k = k.unwrap_or(cfg.k);
            let path = pipeline::run_adapt(&cfg, &scene, k).map_err(runtime)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { config, method } => {
            let cfg = config.resolve().map_err(usage)?;
            let methods = if method.is_empty() {
                vec![Method::PreTrained, Method::FineTuned, Method::Ours]
            } else {
                method
                    .iter()
                    .map(|m| Method::parse(m))
                    .collect::<Result<_, _>>()
                    .map_err(usage)?
            };
            let records =
                pipeline::run_experiment_grid(&cfg, &cfg.k_grid, &methods).map_err(runtime)?;
            for r in &records {
                println!("{} K={} scene={} auc={:.4}", r.method, r.k, r.scene, r.auc);
            }
            println!("appended {} records to {}", records.len(), pipeline::results_path(&cfg).display());
        }
        Command::SynthGen { scenes, out, seed, resolution, frames } => {
            pipeline::run_synth_gen(scenes, &out, seed, resolution, frames).map_err(runtime)?;
            println!("wrote {scenes} scenes under {}", out.display());
        }
        Command::Report(args) => {
            let cfg = args.resolve().map_err(usage)?;
            let path = pipeline::run_report(&cfg).map_err(runtime)?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| runtime(e.into()))?);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Clap handles its own usage errors with exit code 2.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
