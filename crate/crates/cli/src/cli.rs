use std::path::PathBuf;

use boostdet::detector::Variant;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "boostdet", version, about = "Toy two-stage detector with object priors, score fusion and boosting reweighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides dataset.n_scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Overrides dataset.vagueness_mix.
        #[arg(long)]
        mix: Option<f64>,
    },
    /// Train a detector and write checkpoints plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write metrics and detections.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Also score with the classification-only and prior-only rankings.
        #[arg(long)]
        all_modes: bool,
    },
    /// Run the ablation ladder and the eta / omega sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AblateMode::Ladder)]
        mode: AblateMode,
        /// Overrides ablation.seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference checks of every loss and layer gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = boostdet::gradsuite::SUITE_POINTS)]
        points: usize,
        #[arg(long, default_value_t = boostdet::gradsuite::SUITE_TOLERANCE)]
        tolerance: f64,
    },
    /// Render SVG figures and CSV series from eval / ablate outputs.
    Plot {
        #[command(flatten)]
        common: Common,
        /// `pr_curves.csv` or `ablation.csv` files.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    Ladder,
    Eta,
    Omega,
    All,
}

impl Common {
    /// Loads the configuration and applies the command-line overrides.
    pub fn resolve(&self, data: Option<&PathBuf>) -> CliResult<RunConfig> {
        let mut run = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(o) = &self.out {
            run.out = Some(o.clone());
        }
        if let Some(v) = self.variant {
            run.variant = Some(v);
        }
        if let Some(d) = data {
            run.data = Some(d.clone());
        }
        run.validate()?;
        Ok(run)
    }
}

pub fn require_out(run: &RunConfig) -> CliResult<PathBuf> {
    run.out.clone().ok_or_else(|| CliError::new("usage", "no output directory; pass --out or set `out`"))
}

pub fn threads() -> CliResult<usize> {
    match std::env::var("BOOSTDET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::new("config", format!("BOOSTDET_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
