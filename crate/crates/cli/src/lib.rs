//! Command-line pipeline: data generation, tokenizer and predictor
//! training, evaluation, cost accounting, the K sweep and plotting.
//!
//! Output layout under the output root:
//!
//! ```text
//! data/train, data/test          datasets
//! data/toyvfm, data/head         frozen extractor and segmentation probe
//! tokenizer-<mode>/              checkpoint, train_log.csv, summary.json
//! predictor-<mode>/              checkpoint, train_log.csv, summary.json
//! eval-<mode>/                   metrics.csv, summary.json, bars.csv
//! flops/                         flops.csv, flops.txt, counter_check.csv
//! sweep-<mode>/                  sweep.csv, heatmap.csv, k<K>/ checkpoints
//! plots/                         <name>.png and the <name>.csv it shows
//! ```

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand, ValueEnum};
use deltaworld::bom::Objective;
use deltaworld::predictor::Variant;
use deltaworld::tokenizer::TokenizerMode;

pub use config::RunConfig;

/// Environment variable naming the output root.
pub const OUTPUT_ROOT_ENV: &str = "DELTAWORLD_OUTPUT_ROOT";

/// Bad invocation: unknown key, wrong mode for a command and the like.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "deltaworld", version, about = "Delta-token world model experiments at desk scale")]
pub struct Cli {
    /// TOML run config; keys not given fall back to defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set predictor_train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; defaults to $DELTAWORLD_OUTPUT_ROOT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// No progress output on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test corpora, the frozen extractor and the probe.
    GenData,
    /// Train a frame or delta tokenizer.
    TrainTokenizer {
        #[arg(long, value_enum)]
        mode: TokMode,
        /// Continue from the existing checkpoint up to the configured steps.
        #[arg(long)]
        resume: bool,
    },
    /// Train a predictor in one of the ladder modes.
    TrainPredictor {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        resume: bool,
    },
    /// Best/mean/copy-last/present metrics for a trained predictor.
    Eval {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Analytic inference cost breakdown.
    Flops,
    /// Train one predictor per train-K and score each at every eval-K.
    Sweep {
        #[arg(long, value_enum, default_value = "bom-delta")]
        mode: Mode,
    },
    /// Render bar charts and heatmaps from emitted plot data.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokMode {
    Frame,
    Delta,
}

impl TokMode {
    pub fn mode(self) -> TokenizerMode {
        match self {
            TokMode::Frame => TokenizerMode::Frame,
            TokMode::Delta => TokenizerMode::Delta,
        }
    }
}

/// Predictor training modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Patch tokens, learned query, plain regression.
    DiscSpatial,
    /// Patch tokens, best-of-many.
    BomSpatial,
    /// Frame tokens, best-of-many.
    BomFrame,
    /// Delta tokens, best-of-many.
    BomDelta,
    /// Delta tokens, learned query, plain regression.
    DiscDelta,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::DiscSpatial, Mode::BomSpatial, Mode::BomFrame, Mode::BomDelta, Mode::DiscDelta];

    pub fn name(self) -> &'static str {
        match self {
            Mode::DiscSpatial => "disc-spatial",
            Mode::BomSpatial => "bom-spatial",
            Mode::BomFrame => "bom-frame",
            Mode::BomDelta => "bom-delta",
            Mode::DiscDelta => "disc-delta",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Mode::DiscSpatial | Mode::BomSpatial => Variant::Spatial,
            Mode::BomFrame => Variant::Frame,
            Mode::BomDelta | Mode::DiscDelta => Variant::Delta,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Mode::DiscSpatial | Mode::DiscDelta => Objective::Discriminative,
            _ => Objective::BestOfMany,
        }
    }
}

static QUIET: AtomicBool = AtomicBool::new(false);

/// Progress line on stdout unless `--quiet`.
pub(crate) fn note(msg: impl std::fmt::Display) {
    if !QUIET.load(Ordering::Relaxed) {
        println!("{msg}");
    }
}

/// Resolve the output root: flag, then environment, then `runs`.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Run a parsed command line.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let mut sets = cli.sets;
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    let cfg = config::resolve(cli.config.as_deref(), &sets)?;
    let layout = commands::Layout::new(output_root(cli.out));
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &layout),
        Command::TrainTokenizer { mode, resume } => commands::train_tokenizer(&cfg, &layout, mode.mode(), resume),
        Command::TrainPredictor { mode, resume } => commands::train_predictor(&cfg, &layout, mode, resume),
        Command::Eval { mode } => commands::eval(&cfg, &layout, mode),
        Command::Flops => commands::flops(&cfg, &layout),
        Command::Sweep { mode } => commands::sweep(&cfg, &layout, mode),
        Command::Plot { inputs } => plot::plot(&cfg, &layout, &inputs),
    }
}

/// Short machine-readable tag for the one-line error report.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<deltaworld::Error>() {
            return d.kind();
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return "parse";
        }
    }
    "internal"
}

/// `error: kind=<kind> msg=<message on one line>`
pub fn error_line(e: &anyhow::Error) -> String {
    let msg = format!("{e:#}").replace(['\n', '\r'], " ");
    format!("error: kind={} msg={msg}", error_kind(e))
}
