use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Debiased inference for functionals of nonparametric IV estimators.
///
/// Values given on the command line override those in `--config`.
#[derive(Debug, Parser)]
#[command(name = "admliv", version)]
pub struct Cli {
    /// Worker threads [default: logical cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo for the average derivative under endogeneity (Double Lasso + PGMM)
    McAvgDeriv(AvgDerivArgs),
    /// Monte Carlo for the mean own-price elasticity of product 1 (KIV + double cross-fitting)
    McElasticity(ElasticityArgs),
    /// Solve one penalized GMM system read from CSV files
    SolvePgmm(SolvePgmmArgs),
}

#[derive(Debug, Args)]
pub struct CommonMc {
    /// TOML file with the same keys as the long flags (underscores for dashes)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Replications [default: 200 avg-deriv, 100 elasticity]
    #[arg(long)]
    pub reps: Option<usize>,

    /// Cross-fitting folds [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,

    /// Master seed [default: 0]
    #[arg(long, env = "ADMLIV_SEED")]
    pub seed: Option<u64>,

    /// Riesz penalty multiplier [default: 1e-2 / 1e-3 / 1e-4 for k = 2 / 5 / 10, 1e-7 elasticity]
    #[arg(long)]
    pub c1: Option<f64>,

    /// Intercept penalty factor [default: 0.1]
    #[arg(long)]
    pub c0: Option<f64>,

    /// Polynomial dictionary degree [default: 3 avg-deriv, 2 elasticity]
    #[arg(long)]
    pub degree: Option<u32>,

    /// Output directory for summary.csv, replications.csv and run.json [default: .]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AvgDerivArgs {
    /// Number of regressors (required here or in the config)
    #[arg(long)]
    pub k: Option<usize>,

    /// Sample size (required here or in the config)
    #[arg(long)]
    pub n: Option<usize>,

    /// Double Lasso first-stage penalty [default: 1e-4]
    #[arg(long)]
    pub stage1_alpha: Option<f64>,

    /// Fixed second-stage penalty [default: 3-fold CV over 1e-7..1e-1]
    #[arg(long)]
    pub stage2_alpha: Option<f64>,

    /// Scale of the structural error [default: 1]
    #[arg(long)]
    pub noise_scale: Option<f64>,

    #[command(flatten)]
    pub common: CommonMc,
}

#[derive(Debug, Args)]
pub struct ElasticityArgs {
    /// Products per market (required here or in the config)
    #[arg(long = "J", id = "J")]
    pub num_products: Option<usize>,

    /// Markets (required here or in the config)
    #[arg(long = "T", id = "T")]
    pub num_markets: Option<usize>,

    /// KIV bandwidth multiplier on the median heuristic [default: 25]
    #[arg(long)]
    pub bandwidth_scale: Option<f64>,

    /// Fixed KIV ridge for both stages [default: tuned over 1e-8..1e-1]
    #[arg(long)]
    pub kiv_ridge: Option<f64>,

    /// Known truth, skipping the pre-simulation
    #[arg(long, allow_negative_numbers = true)]
    pub theta0: Option<f64>,

    /// Markets in the truth pre-simulation [default: 100000]
    #[arg(long)]
    pub theta0_presim: Option<usize>,

    #[command(flatten)]
    pub common: CommonMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Cd,
    ActiveSet,
}

#[derive(Debug, Args)]
pub struct SolvePgmmArgs {
    /// q x p moment matrix, header-free CSV
    #[arg(long = "G", id = "G")]
    pub g: PathBuf,

    /// Length-q target vector, one column or one row
    #[arg(long = "M", id = "M")]
    pub m: PathBuf,

    /// q x q weight matrix, or a length-q vector for a diagonal weight [default: identity]
    #[arg(long)]
    pub omega: Option<PathBuf>,

    /// Absolute penalty level; overrides --c1
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Penalty multiplier on sqrt(log q / n), needs --n-obs [default: 1e-2]
    #[arg(long)]
    pub c1: Option<f64>,

    /// Sample size behind G and M
    #[arg(long)]
    pub n_obs: Option<usize>,

    /// Intercept (first coordinate) penalty factor
    #[arg(long, default_value_t = 0.1)]
    pub c0: f64,

    /// Pilot fit, then a refit with weights 1 / |pilot|
    #[arg(long)]
    pub adaptive: bool,

    #[arg(long, value_enum, default_value_t = AlgorithmArg::ActiveSet)]
    pub algorithm: AlgorithmArg,

    /// Convergence tolerance on the largest coordinate change
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,

    #[arg(long, default_value_t = 100_000)]
    pub max_sweeps: usize,

    /// Output directory for rho.csv and diagnostics.json
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}
