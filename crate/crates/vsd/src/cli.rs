//! Argument parsing and dispatch for the `vsd` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use crate::commands::{self, Context, ModelKind, Prompts, TrainFlags};
use crate::config::Settings;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vsd", version, about = "Sticker-video toolkit: curate, generate, train, sample, evaluate")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, env = "VSD_SEED")]
    pub seed: Option<u64>,
    /// JSON config file with flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a manifest, assign train/test splits and report statistics.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trigger words per domain that seed the test splits.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate a synthetic sticker corpus.
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(value_enum)]
        model: Model,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Temporal layer of the denoiser: sti, conv1d or none.
        #[arg(long)]
        temporal: Option<String>,
        #[arg(long)]
        gamma: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sample clips from a denoiser or VQ checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Prompt; may be repeated. Cycled when fewer than `count`.
        #[arg(long, conflicts_with = "prompts")]
        caption: Vec<String>,
        /// Manifest whose test captions serve as prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Score generated samples against real clips.
    Eval {
        /// Dual-encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Manifest of real clips; its test split is used when present.
        #[arg(long)]
        real: PathBuf,
        /// Output directory of `sample`.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Denoiser,
    Vq,
    Dual,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Denoiser => ModelKind::Denoiser,
            Model::Vq => ModelKind::Vq,
            Model::Dual => ModelKind::Dual,
        }
    }
}

fn settings(global: &GlobalArgs) -> Result<Settings> {
    let mut s = match &global.config {
        Some(p) => Settings::load(p)?,
        None => Settings::new(),
    };
    for o in &global.overrides {
        s.set_assignment(o)?;
    }
    if let Some(seed) = global.seed {
        s.set("seed", seed.into());
    }
    Ok(s)
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    let mut ctx = Context::new(settings(&cli.global)?, None)?;
    match cli.command {
        Command::Gen { n, out } => {
            commands::gen(&ctx, n, &out)?;
        }
        Command::Curate { manifest, out, k } => {
            commands::curate(&ctx, &manifest, k, &out)?;
        }
        Command::Train {
            model,
            manifest,
            out,
            steps,
            temporal,
            gamma,
            k,
        } => {
            let flags = TrainFlags { steps, temporal, gamma, k };
            commands::train(&mut ctx, model.into(), &manifest, &flags, &out)?;
        }
        Command::Sample {
            checkpoint,
            out,
            count,
            caption,
            prompts,
        } => {
            let prompts = match prompts {
                Some(m) => Prompts::Manifest(m),
                None if !caption.is_empty() => Prompts::Captions(caption),
                None => return Err(Error::Config("sample needs --caption or --prompts".into())),
            };
            commands::sample(&ctx, &checkpoint, &prompts, count, &out)?;
        }
        Command::Eval {
            encoder,
            real,
            generated,
            out,
        } => {
            let report = commands::eval(&ctx, &encoder, &real, &generated, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Gradcheck { out } => {
            let report = commands::gradcheck(&ctx, out.as_deref())?;
            for c in &report.checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<28} {:>10.3e} {:>6} {verdict}", c.name, c.max_rel_error, c.coordinates);
            }
            if !report.passed {
                return Err(Error::Config(format!(
                    "gradient suite exceeded the {:e} tolerance",
                    report.tolerance
                )));
            }
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}
