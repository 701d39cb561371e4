//! `vitbench`: generate dose-parameterized synthetic CT datasets, train and
//! evaluate the 3D residual classifier, and emit stratified ROC reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vitbench_core::metrics::MetricsError;
use vitbench_core::model::ModelError;
use vitbench_core::phantom::PhantomError;
use vitbench_core::trial::TrialError;
use vitbench_core::volume::VolumeError;

/// Exit codes: 0 success, 2 config, 3 I/O, 4 numerical, 5 statistical
/// degeneracy.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numerical(String),
    Degenerate(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Degenerate(m) => write!(f, "statistical degeneracy: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Degenerate(_) => 5,
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::InvalidClipRange { .. }
            | VolumeError::InvalidPatchSize(_)
            | VolumeError::InvalidSpacing(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Io { .. } | PhantomError::Manifest(_) => CliError::Io(e.to_string()),
            PhantomError::Volume(v) => v.into(),
            PhantomError::TargetUnreachable { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::TrainingDiverged { .. } | ModelError::NonFiniteActivation { .. } => {
                CliError::Numerical(e.to_string())
            }
            ModelError::SingleClassSplit { .. } | ModelError::EmptySplit { .. } => {
                CliError::Degenerate(e.to_string())
            }
            ModelError::Checkpoint(_) | ModelError::Case { .. } => CliError::Io(e.to_string()),
            ModelError::Volume(v) => v.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::SingleClass { .. } | MetricsError::TooFewPerClass { .. } => {
                CliError::Degenerate(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrialError> for CliError {
    fn from(e: TrialError) -> Self {
        match e {
            TrialError::SingleClassStratum { .. }
            | TrialError::EmptyPositiveStratum { .. }
            | TrialError::TooFewPatients(_)
            | TrialError::NoCasesSelected(_) => CliError::Degenerate(e.to_string()),
            TrialError::Io { .. }
            | TrialError::MalformedScoreRow { .. }
            | TrialError::MissingSliceScores { .. } => CliError::Io(e.to_string()),
            TrialError::Metrics(m) => m.into(),
            TrialError::Model(m) => m.into(),
            TrialError::Phantom(p) => p.into(),
            TrialError::Volume(v) => v.into(),
            TrialError::Aggregate(a) => CliError::Io(a.to_string()),
            TrialError::InvalidConfig(_) | TrialError::BadRatios(_) | TrialError::DoseNotConfigured { .. } => {
                CliError::Config(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vitbench",
    version,
    about = "Virtual-imaging-trial bench: synthetic chest-CT generation, 3D CNN training, stratified ROC evaluation"
)]
struct Cli {
    /// Bound the worker pool for parallel case processing (default: all cores).
    /// Outputs are identical for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-key config overrides, e.g. --set train.lr0=0.005
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (beats the config file and VITBENCH_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: volumes, masks and a manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Named dataset preset (`cvit-covid`: 50/40 pos/neg at 28.5 and 57 mAs).
        #[arg(long)]
        preset: Option<String>,
        /// Explicit counts, e.g. pos:5@28.5,neg:5@28.5
        #[arg(long)]
        counts: Option<String>,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Split by patient and train the 3D residual CNN from scratch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint path.
        #[arg(short, long)]
        out: PathBuf,
        /// Per-epoch history CSV (default: history.csv next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Where to write the split-assigned manifest
        /// (default: <manifest_stem>.split.csv next to the input manifest).
        #[arg(long)]
        split_manifest: Option<PathBuf>,
    },
    /// Score cases and emit report.json plus per-stratum ROC CSVs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest CSV (with split assignments for --split auto/test).
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to score with (not needed with --slice-scores).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Aggregate externally produced per-slice scores instead of running
        /// the 3D model. CSV: patient_id,slice_index,score
        #[arg(long)]
        slice_scores: Option<PathBuf>,
        /// Which split to evaluate: auto, train, val, test, all.
        #[arg(long, default_value = "auto")]
        split: String,
        /// Output directory for report.json, roc_*.csv and scores.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Finite-difference verification of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Pass/fail threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Inject a non-finite parameter to prove the failure path.
        #[arg(long)]
        inject_nonfinite: bool,
    },
    /// Re-stratify an existing per-case score table into a report.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Score table CSV: case_id,label,score,dose_mas,lesion_fraction
        #[arg(long)]
        scores: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Gen {
            cfg,
            preset,
            counts,
            out,
        } => commands::gen(&cfg, preset.as_deref(), counts.as_deref(), &out),
        Command::Train {
            cfg,
            manifest,
            out,
            history,
            split_manifest,
        } => commands::train(&cfg, &manifest, &out, history.as_deref(), split_manifest.as_deref()),
        Command::Eval {
            cfg,
            manifest,
            checkpoint,
            slice_scores,
            split,
            out,
        } => commands::eval(
            &cfg,
            &manifest,
            checkpoint.as_deref(),
            slice_scores.as_deref(),
            &split,
            &out,
        ),
        Command::Gradcheck {
            cfg,
            eps,
            tol,
            inject_nonfinite,
        } => commands::gradcheck(&cfg, eps, tol, inject_nonfinite),
        Command::Report { cfg, scores, out } => commands::report(&cfg, &scores, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vitbench: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
