//! Command-line front end. Every run first writes a manifest holding the
//! fully resolved configuration; `replay` re-executes a manifest.
//!
//! Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 data error,
//! 4 numeric divergence.

mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use run::{execute, Run, RunManifest};

use crate::attacks::{builtin_attack, AttackConfig, BUILTIN_ATTACKS};
use crate::error::Error;
use crate::imagecore::{load_cifar_binary, synth_dataset, LabeledDataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrainingDiverged { .. } | Error::AttackDiverged { .. } => EXIT_DIVERGED,
            Error::Io { .. } | Error::Format { .. } => EXIT_DATA,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "advcompose", version, about = "Composable adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier, optionally adversarially.
    Train(TrainArgs),
    /// Accuracy of defended models (rows) under attacks (columns).
    Matrix(MatrixArgs),
    /// Combined-attack strength grid with heatmaps.
    Sweep(SweepArgs),
    /// Local-contrast scan and witness certificates.
    Theorem(TheoremArgs),
    /// Attack one image.
    Attack(AttackArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Re-run a manifest written by an earlier command.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `synth`, `synth:SEED:PER_CLASS:SIZE` or `cifar:PATH`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attack (builtin name or JSON path) for adversarial training with the
    /// hardening recipe (30 epochs, lr 0.02, mix 1, 10 PGD steps).
    #[arg(long)]
    pub adversarial: Option<String>,
    /// Fraction of each batch replaced by adversarial examples.
    #[arg(long)]
    pub mix: Option<f64>,
    /// PGD steps per adversarial example.
    #[arg(long)]
    pub adv_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Comma-separated `NAME=CHECKPOINT` (or bare checkpoint paths).
    #[arg(long, value_delimiter = ',', required = true)]
    pub defenses: Vec<String>,
    /// Comma-separated builtin attack names or JSON config paths.
    #[arg(long, value_delimiter = ',', default_value = "identity,delta,stadv,delta+stadv")]
    pub attacks: Vec<String>,
    /// Evaluation data, as for `train`.
    #[arg(long, default_value = "synth:2:100:16")]
    pub data: String,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint to attack.
    #[arg(long)]
    pub defense: PathBuf,
    /// Delta bounds on the 0-255 scale.
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,8")]
    pub delta_grid: Vec<f64>,
    /// Flow bounds in pixels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.4,0.8,1.6")]
    pub flow_grid: Vec<f64>,
    /// Template attack holding one delta and one flow layer.
    #[arg(long, default_value = "delta+stadv")]
    pub attack: String,
    /// Evaluation data, as for `train`.
    #[arg(long, default_value = "synth:2:100:16")]
    pub data: String,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// CSV path; heatmaps are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    /// Single PPM/PGM image instead of a dataset.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Dataset to scan (default `synth:1:128:16`).
    #[arg(long)]
    pub data: Option<String>,
    /// Delta bound on the 0-255 scale.
    #[arg(long, default_value_t = 8.0)]
    pub delta: f64,
    /// Flow bound in pixels, used as the fraction `min(eps, 1)`.
    #[arg(long, default_value_t = 1.6)]
    pub eps: f64,
    /// Images to scan (default: all, at most 384).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Certificate JSON path; the scan CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// PPM (P6) or PGM (P5) image.
    #[arg(long)]
    pub input: PathBuf,
    /// True class of the input.
    #[arg(long)]
    pub label: usize,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Builtin attack name or JSON config path.
    #[arg(long, default_value = "delta")]
    pub attack: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Scale one op's analytic gradient (test hook).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest JSON written next to an earlier run's output.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Redirect the primary output (and everything derived from it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `out` with its extension replaced by `suffix`, e.g. `a/b.csv` + `.json`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Parses a data source spec and loads it, optionally truncated.
pub fn load_data(spec: &str, limit: Option<usize>) -> CliResult<LabeledDataset> {
    let data = if spec == "synth" {
        synth_dataset(1, 200, 16)?
    } else if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let parsed: Option<Vec<u64>> = parts.iter().map(|p| p.parse().ok()).collect();
        match parsed.as_deref() {
            Some([seed, count, size]) => synth_dataset(*seed, *count as usize, *size as usize)?,
            _ => return Err(CliError::config(format!("bad synth spec '{spec}' (want synth:SEED:PER_CLASS:SIZE)"))),
        }
    } else if let Some(path) = spec.strip_prefix("cifar:") {
        load_cifar_binary(path).map_err(|e| CliError::data(format!("cannot load data '{path}': {e}")))?
    } else {
        return Err(CliError::config(format!(
            "unknown data source '{spec}' (want synth, synth:SEED:PER_CLASS:SIZE or cifar:PATH)"
        )));
    };
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

/// Builtin attack name or a JSON config file.
pub fn resolve_attack(spec: &str) -> CliResult<AttackConfig> {
    if let Some(c) = builtin_attack(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read attack config '{spec}': {e}")))?;
        let cfg: AttackConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("bad attack config '{spec}': {e}")))?;
        cfg.validate()?;
        return Ok(cfg);
    }
    Err(CliError::config(format!(
        "unknown attack '{spec}' (builtins: {}; or a .json config)",
        BUILTIN_ATTACKS.join(", ")
    )))
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}
