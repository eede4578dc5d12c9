//! `mvface`: generate synthetic scenes, fit them, evaluate fits and check
//! gradients.
//!
//! Exit codes are part of the interface:
//!
//! | code | meaning |
//! |------|---------|
//! | 0    | success |
//! | 1    | any other error |
//! | 2    | views do not overlap |
//! | 3    | a view renders no pixels at the initial parameters |
//! | 4    | malformed weights JSON |
//! | 5    | parameters do not match the scene's model |
//! | 6    | a smooth loss term failed the gradient check |
//! | 64   | command-line usage error |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvface_core::objective::{Ablation, Term};

pub const EXIT_GENERIC: u8 = 1;
pub const EXIT_NO_OVERLAP: u8 = 2;
pub const EXIT_EMPTY_RENDER: u8 = 3;
pub const EXIT_BAD_WEIGHTS: u8 = 4;
pub const EXIT_MODEL_MISMATCH: u8 = 5;
pub const EXIT_GRADCHECK: u8 = 6;
pub const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "mvface", version, about = "Multi-view morphable face fitting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    Gen(GenArgs),
    /// Fit a scene from a perturbed (or given) initialization.
    Fit(FitArgs),
    /// Compare parameters with a scene's ground truth and report losses.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of each loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PivotArg {
    Head,
    Camera,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub views: usize,
    /// Yaw step between neighboring views, degrees.
    #[arg(long, default_value_t = 20.0)]
    pub yaw: f64,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Requested mesh vertex count.
    #[arg(long, default_value_t = 1500)]
    pub vertices: usize,
    /// Scale of the ground-truth coefficients.
    #[arg(long, default_value_t = 1.0)]
    pub coeff_scale: f64,
    /// Standard deviation of random pitch and roll per view, degrees.
    #[arg(long, default_value_t = 2.0)]
    pub jitter: f64,
    /// `camera` keeps every camera center fixed (pure rotation rig).
    #[arg(long, value_enum, default_value_t = PivotArg::Head)]
    pub pivot: PivotArg,
}

/// Initialization by perturbing the ground truth.
#[derive(Args, Debug, Clone)]
pub struct InitArgs {
    /// Rotation perturbation per view, degrees.
    #[arg(long, default_value_t = 10.0)]
    pub init_rot: f64,
    /// Translation perturbation as a fraction of camera distance.
    #[arg(long, default_value_t = 0.0)]
    pub init_trans: f64,
    /// Standard deviation of additive coefficient noise.
    #[arg(long, default_value_t = 0.0)]
    pub init_coeff: f64,
    /// Seed of the perturbation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this parameter file instead of perturbing the ground truth.
    #[arg(long)]
    pub init_params: Option<PathBuf>,
}

/// Loss weights and ablations.
#[derive(Args, Debug, Clone)]
pub struct ObjectiveArgs {
    /// JSON file of loss weights; missing fields keep their defaults.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Terms to switch off: no-multiview, no-covisible, no-pixel, no-depth, no-epi.
    #[arg(long, value_delimiter = ',', value_parser = PossibleValuesParser::new(Ablation::NAMES))]
    pub ablate: Vec<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Scene directory written by `gen`.
    pub scene: PathBuf,
    /// Output directory; defaults to `<scene>/fit`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub init: InitArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub scene: PathBuf,
    /// Parameter file to evaluate, e.g. `<fit dir>/params.json`.
    #[arg(long)]
    pub params: PathBuf,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    pub scene: PathBuf,
    /// Check only this term: regularization, landmark, epipolar, render, identity, pixel, depth.
    #[arg(long, value_parser = PossibleValuesParser::new(Term::ALL.map(|t| t.name())))]
    pub term: Option<String>,
    #[command(flatten)]
    pub init: InitArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<mvface_core::Error> for Failure {
    fn from(e: mvface_core::Error) -> Self {
        let code = match e {
            mvface_core::Error::NoOverlap { .. } => EXIT_NO_OVERLAP,
            mvface_core::Error::EmptyRender { .. } => EXIT_EMPTY_RENDER,
            _ => EXIT_GENERIC,
        };
        Failure::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<mvface_core::Error>() {
            Ok(core) => core.into(),
            Err(other) => Failure::new(EXIT_GENERIC, other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_GENERIC, e)
    }
}

pub type CmdResult = Result<(), Failure>;

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("MVFACE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::new(EXIT_USAGE, anyhow::anyhow!("MVFACE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_GENERIC, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
