//! TOML run files. Keys mirror the long flags; flags win over file values.

use std::path::{Path, PathBuf};

use admliv::experiments::McConfig;
use serde::Deserialize;

use crate::args::{AvgDerivArgs, CommonMc, ElasticityArgs};
use crate::CliError;

pub const DEFAULT_AVG_REPS: usize = 200;
pub const DEFAULT_ELASTICITY_REPS: usize = 100;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvgDerivFile {
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub stage1_alpha: Option<f64>,
    pub stage2_alpha: Option<f64>,
    pub noise_scale: Option<f64>,
    pub reps: Option<usize>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub c1: Option<f64>,
    pub c0: Option<f64>,
    pub degree: Option<u32>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticityFile {
    #[serde(rename = "J")]
    pub num_products: Option<usize>,
    #[serde(rename = "T")]
    pub num_markets: Option<usize>,
    pub bandwidth_scale: Option<f64>,
    pub kiv_ridge: Option<f64>,
    pub theta0: Option<f64>,
    pub theta0_presim: Option<usize>,
    pub reps: Option<usize>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub c1: Option<f64>,
    pub c0: Option<f64>,
    pub degree: Option<u32>,
    pub out: Option<PathBuf>,
}

fn load<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn required<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required value --{name} (flag or config key)")))
}

/// A resolved Monte Carlo run: the library config plus where to write it.
#[derive(Debug, Clone, PartialEq)]
pub struct McRunSpec {
    pub config: McConfig,
    pub out: PathBuf,
}

struct Common {
    reps: Option<usize>,
    folds: Option<usize>,
    seed: Option<u64>,
    c1: Option<f64>,
    c0: Option<f64>,
    degree: Option<u32>,
    out: Option<PathBuf>,
}

impl Common {
    fn merge(flags: &CommonMc, file: Common) -> Common {
        Common {
            reps: flags.reps.or(file.reps),
            folds: flags.folds.or(file.folds),
            seed: flags.seed.or(file.seed),
            c1: flags.c1.or(file.c1),
            c0: flags.c0.or(file.c0),
            degree: flags.degree.or(file.degree),
            out: flags.out.clone().or(file.out),
        }
    }

    fn apply(self, config: &mut McConfig) -> PathBuf {
        if let Some(v) = self.folds {
            config.folds = v;
        }
        if let Some(v) = self.c0 {
            config.c0 = v;
        }
        if let Some(v) = self.degree {
            config.degree = v;
        }
        config.c1 = self.c1;
        self.out.unwrap_or_else(|| PathBuf::from("."))
    }
}

fn validated(config: McConfig, out: PathBuf) -> Result<McRunSpec, CliError> {
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(McRunSpec { config, out })
}

pub fn resolve_avg_derivative(args: &AvgDerivArgs) -> Result<McRunSpec, CliError> {
    let file: AvgDerivFile = load(args.common.config.as_deref())?;
    let common = Common::merge(
        &args.common,
        Common {
            reps: file.reps,
            folds: file.folds,
            seed: file.seed,
            c1: file.c1,
            c0: file.c0,
            degree: file.degree,
            out: file.out,
        },
    );
    let k = required(args.k.or(file.k), "k")?;
    let n = required(args.n.or(file.n), "n")?;
    let mut config = McConfig::avg_derivative(
        k,
        n,
        common.reps.unwrap_or(DEFAULT_AVG_REPS),
        common.seed.unwrap_or(0),
    );
    if let Some(v) = args.stage1_alpha.or(file.stage1_alpha) {
        config.stage1_alpha = v;
    }
    config.stage2_alpha = args.stage2_alpha.or(file.stage2_alpha);
    if let Some(v) = args.noise_scale.or(file.noise_scale) {
        config.noise_scale = v;
    }
    let out = common.apply(&mut config);
    validated(config, out)
}

pub fn resolve_elasticity(args: &ElasticityArgs) -> Result<McRunSpec, CliError> {
    let file: ElasticityFile = load(args.common.config.as_deref())?;
    let common = Common::merge(
        &args.common,
        Common {
            reps: file.reps,
            folds: file.folds,
            seed: file.seed,
            c1: file.c1,
            c0: file.c0,
            degree: file.degree,
            out: file.out,
        },
    );
    let j = required(args.num_products.or(file.num_products), "J")?;
    let t = required(args.num_markets.or(file.num_markets), "T")?;
    let mut config = McConfig::elasticity(
        j,
        t,
        common.reps.unwrap_or(DEFAULT_ELASTICITY_REPS),
        common.seed.unwrap_or(0),
    );
    if let Some(v) = args.bandwidth_scale.or(file.bandwidth_scale) {
        config.bandwidth_scale = v;
    }
    config.kiv_ridge = args.kiv_ridge.or(file.kiv_ridge);
    config.theta0 = args.theta0.or(file.theta0);
    if let Some(v) = args.theta0_presim.or(file.theta0_presim) {
        config.presim_markets = v;
    }
    let out = common.apply(&mut config);
    validated(config, out)
}
