use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use cph_core::StructureKind;

#[derive(Debug, Parser)]
#[command(name = "cph", version, about = "Fit, evaluate and inspect scaled phase-type distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV sample by EM.
    Fit(FitArgs),
    /// Evaluate pdf, cdf, survival or quantiles of a saved model.
    Eval(EvalArgs),
    /// Draw a sample from a saved model.
    Simulate(SimulateArgs),
    /// Tail asymptotics and regular-variation checks of a saved model.
    Diagnose(DiagnoseArgs),
    /// Fit a model to a known density.
    FitDensity(FitDensityArgs),
    /// Emit plot-ready CSV comparing a model with data.
    Plotdata(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MixingArg {
    Gamma,
    Stable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    General,
    Coxian,
    Hyperexponential,
}

impl From<StructureArg> for StructureKind {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::General => StructureKind::General,
            StructureArg::Coxian => StructureKind::Coxian,
            StructureArg::Hyperexponential => StructureKind::Hyperexponential,
        }
    }
}

/// Options shared by the two fitting commands.
#[derive(Debug, Clone, Args)]
pub struct EmArgs {
    /// Number of phases.
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = StructureArg::Coxian)]
    pub structure: StructureArg,
    #[arg(long, value_enum, default_value_t = MixingArg::Gamma)]
    pub mixing: MixingArg,
    /// Starting mixing index (default 1 for gamma, 0.9 for stable).
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Scale of the stable law, held fixed.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// Stop when the log-likelihood changes by less than this.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Quadrature nodes for the scaling variable.
    #[arg(long, default_value_t = 100)]
    pub nodes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Estimate the initial distribution of a Coxian model.
    #[arg(long)]
    pub free_pi: bool,
    /// Worker threads for the E-step.
    #[arg(long, env = "CPH_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with a `value` column or `lower,upper` columns.
    pub data: PathBuf,
    #[command(flatten)]
    pub em: EmArgs,
    /// Subtracted from every value before fitting.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub shift: f64,
    /// Multiplies every shifted value before fitting.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    Pdf,
    Cdf,
    Survival,
    Quantile,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("functional").required(true).args(["pdf", "cdf", "survival", "quantile"])))]
#[command(group(ArgGroup::new("where").required(true).multiple(true).args(["points", "grid", "log_grid"])))]
pub struct EvalArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub pdf: bool,
    #[arg(long)]
    pub cdf: bool,
    #[arg(long)]
    pub survival: bool,
    /// Points are probabilities.
    #[arg(long)]
    pub quantile: bool,
    #[arg(allow_hyphen_values = true)]
    pub points: Vec<String>,
    /// Evenly spaced points `LO,HI,N`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Log-spaced points `LO,HI,N`.
    #[arg(long)]
    pub log_grid: Option<String>,
    /// Points and results are in the units of the original data.
    #[arg(long)]
    pub original_scale: bool,
}

impl EvalArgs {
    pub fn functional(&self) -> Functional {
        match (self.pdf, self.cdf, self.survival) {
            (true, _, _) => Functional::Pdf,
            (_, true, _) => Functional::Cdf,
            (_, _, true) => Functional::Survival,
            _ => Functional::Quantile,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub original_scale: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub model: PathBuf,
    #[arg(long, default_value_t = cph_core::tails::DEFAULT_ETA_MAX)]
    pub eta_max: f64,
    #[arg(long, default_value_t = cph_core::tails::DEFAULT_ETA_POINTS)]
    pub eta_points: usize,
    /// Index for the rvd check; defaults to the mixing index.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetKind {
    /// `π exp(S x^β) s β x^{β−1}` from `--pi`, `--matrix`, `--beta`.
    MatrixWeibull,
    /// `F̄(x) = π (1 + x/β)^T e` from `--pi`, `--matrix`, `--beta`.
    MatrixPareto1,
    /// CSV with `x,density` columns, interpolated linearly.
    Tabulated,
    /// Density of a saved model given by `--target-model`.
    Model,
}

#[derive(Debug, Args)]
pub struct FitDensityArgs {
    #[arg(long, value_enum)]
    pub target: TargetKind,
    /// Comma-separated initial distribution of the target.
    #[arg(long)]
    pub pi: Option<String>,
    /// Comma-separated sub-intensity matrix of the target, row-major.
    #[arg(long, allow_hyphen_values = true)]
    pub matrix: Option<String>,
    /// Shape (matrix-Weibull) or scale (matrix-Pareto I) of the target.
    #[arg(long)]
    pub beta: Option<f64>,
    /// CSV with `x,density` columns for `--target tabulated`.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Model file for `--target model`.
    #[arg(long)]
    pub target_model: Option<PathBuf>,
    /// Integration range `LO,HI`; found from the target's tails when omitted.
    #[arg(long)]
    pub support: Option<String>,
    /// Nodes of the outer quadrature over x.
    #[arg(long, default_value_t = cph_core::emfit::DEFAULT_X_NODES)]
    pub x_nodes: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Hist,
    Qq,
    Cumhazard,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Histogram bins; defaults to √n clamped to [5, 100].
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// The data and the output are in the units of the original data.
    #[arg(long)]
    pub original_scale: bool,
}
