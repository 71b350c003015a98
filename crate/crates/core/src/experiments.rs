//! Monte Carlo harness for the average-derivative and own-price elasticity
//! designs.
//!
//! Replication `r` of a run with master seed `s` draws everything from
//! `derive_seed(s, r)`, so results do not depend on scheduling and any single
//! replication can be rerun in isolation.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Dictionary;
use crate::debias::{estimate_linear, estimate_nonlinear, make_folds, DebiasedResult, Estimates, IvData};
use crate::demand::{market_data, simulate_logit_markets, simulate_market, DemandParams};
use crate::error::{Error, Result};
use crate::functionals::{avg_derivative_spec, logit_elasticity_oracle, OwnPriceElasticity};
use crate::io::format_f64;
use crate::mliv::{log_grid, DoubleLassoConfig, KivConfig, MlivConfig, Stage2Penalty};
use crate::pgmm::{PenaltyConfig, PenaltyRate, RieszConfig, SolverConfig};
use crate::rng::{derive_seed, seeded_rng};

/// KIV ridge candidates: `1e-8, 1e-7.5, ..., 1e-1`. Smaller ridges let pair
/// fits nearly zero the share Jacobian in single markets.
pub fn kiv_ridge_grid() -> Vec<f64> {
    log_grid(1e-8, 1e-1, 15)
}

/// Seed of the elasticity pre-simulation when none is given.
pub const PRESIM_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    AvgDerivative,
    Elasticity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "PI")]
    Plugin,
    #[serde(rename = "ADML")]
    Adml,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Plugin => "PI",
            Estimator::Adml => "ADML",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub design: Design,
    /// Number of regressors `k`, or products `J`.
    pub dim: usize,
    /// Observations `n`, or markets `T`.
    pub size: usize,
    pub replications: usize,
    pub folds: usize,
    pub seed: u64,
    /// Penalty multiplier; the design default when absent.
    pub c1: Option<f64>,
    pub c0: f64,
    /// Polynomial degree of the `gamma` and instrument dictionaries.
    pub degree: u32,
    /// Double Lasso first-stage penalty (average-derivative design).
    pub stage1_alpha: f64,
    /// Fixed second-stage penalty; cross-validated when absent.
    pub stage2_alpha: Option<f64>,
    /// KIV bandwidth scale (elasticity design).
    pub bandwidth_scale: f64,
    /// Fixed KIV ridge for both stages; tuned over [`kiv_ridge_grid`] when absent.
    pub kiv_ridge: Option<f64>,
    /// Known truth; pre-simulated for the elasticity design when absent.
    pub theta0: Option<f64>,
    pub presim_markets: usize,
    /// Noise scale on `v` (average-derivative design).
    pub noise_scale: f64,
}

impl McConfig {
    pub fn avg_derivative(k: usize, n: usize, replications: usize, seed: u64) -> Self {
        Self {
            design: Design::AvgDerivative,
            dim: k,
            size: n,
            replications,
            folds: 5,
            seed,
            c1: None,
            c0: 0.1,
            degree: 3,
            stage1_alpha: 1e-4,
            stage2_alpha: None,
            bandwidth_scale: 25.0,
            kiv_ridge: None,
            theta0: None,
            presim_markets: 100_000,
            noise_scale: 1.0,
        }
    }

    pub fn elasticity(num_products: usize, num_markets: usize, replications: usize, seed: u64) -> Self {
        Self {
            design: Design::Elasticity,
            dim: num_products,
            size: num_markets,
            degree: 2,
            ..Self::avg_derivative(num_products, num_markets, replications, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if self.folds < 2 || self.folds > self.size {
            return Err(Error::InvalidArgument(format!(
                "{} folds for {} observations",
                self.folds, self.size
            )));
        }
        if let Some(c1) = self.c1 {
            if !(c1 >= 0.0) {
                return Err(Error::InvalidArgument(format!("c1 = {c1} must be non-negative")));
            }
        }
        if self.degree == 0 || !(self.stage1_alpha >= 0.0) || self.stage2_alpha.is_some_and(|a| !(a >= 0.0)) {
            return Err(Error::InvalidArgument("degree and lasso penalties out of range".into()));
        }
        if self.kiv_ridge.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidArgument("KIV ridge must be positive".into()));
        }
        if !(self.c0 >= 0.0) || !(self.bandwidth_scale > 0.0) {
            return Err(Error::InvalidArgument("c0 and bandwidth scale must be positive".into()));
        }
        if self.design == Design::Elasticity && self.theta0.is_none() && self.presim_markets < 1000 {
            return Err(Error::InvalidArgument("pre-simulation needs at least 1000 markets".into()));
        }
        Ok(())
    }

    /// `1e-2`, `1e-3`, `1e-4` for `k = 2, 5, 10` and `1e-7` for elasticities.
    pub fn effective_c1(&self) -> f64 {
        self.c1.unwrap_or(match self.design {
            Design::Elasticity => 1e-7,
            Design::AvgDerivative => match self.dim {
                0..=2 => 1e-2,
                3..=5 => 1e-3,
                _ => 1e-4,
            },
        })
    }

    pub fn riesz_config(&self) -> RieszConfig {
        let rate = match self.design {
            Design::AvgDerivative => PenaltyRate::RootLogQOverN,
            Design::Elasticity => PenaltyRate::QuarterPower,
        };
        RieszConfig {
            penalty: PenaltyConfig {
                c1: self.effective_c1(),
                c0: self.c0,
                rate,
                ..PenaltyConfig::default()
            },
            solver: SolverConfig {
                max_sweeps: 100_000,
                ..SolverConfig::default()
            },
            two_stage: true,
            adaptive: true,
        }
    }
}

/// One replication's estimates, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub plugin: Option<EstimateRow>,
    pub adml: Option<EstimateRow>,
    pub excluded: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateRow {
    pub theta_hat: f64,
    pub se: f64,
    pub ci_95: [f64; 2],
}

impl From<&DebiasedResult> for EstimateRow {
    fn from(r: &DebiasedResult) -> Self {
        Self {
            theta_hat: r.theta_hat,
            se: r.se,
            ci_95: r.ci_95,
        }
    }
}

impl EstimateRow {
    fn covers(&self, theta: f64) -> bool {
        self.ci_95[0] <= theta && theta <= self.ci_95[1]
    }
}

impl ReplicationRecord {
    fn from_estimates(replication: usize, seed: u64, result: Result<Estimates>) -> Self {
        match result {
            Ok(est) => Self {
                replication,
                seed,
                plugin: Some((&est.plugin).into()),
                adml: Some((&est.debiased).into()),
                excluded: est.debiased.excluded.len(),
                error: None,
            },
            Err(e) => Self {
                replication,
                seed,
                plugin: None,
                adml: None,
                excluded: 0,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn row(&self, estimator: Estimator) -> Option<&EstimateRow> {
        match estimator {
            Estimator::Plugin => self.plugin.as_ref(),
            Estimator::Adml => self.adml.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub abs_bias: f64,
    pub median_se: f64,
    pub coverage: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub theta0: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl McSummary {
    pub fn get(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == estimator)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `|mean theta - theta0|`, median SE and CI coverage over successful
/// replications, per estimator.
pub fn summarize(records: &[ReplicationRecord], theta0: f64) -> Result<McSummary> {
    let mut estimators = Vec::new();
    for est in [Estimator::Plugin, Estimator::Adml] {
        let rows: Vec<&EstimateRow> = records
            .iter()
            .filter_map(|r| r.row(est))
            .filter(|r| r.theta_hat.is_finite() && r.se.is_finite())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let k = rows.len() as f64;
        let mean = rows.iter().map(|r| r.theta_hat).sum::<f64>() / k;
        let mut ses: Vec<f64> = rows.iter().map(|r| r.se).collect();
        let covered = rows.iter().filter(|r| r.covers(theta0)).count();
        estimators.push(EstimatorSummary {
            estimator: est,
            abs_bias: (mean - theta0).abs(),
            median_se: median(&mut ses),
            coverage: covered as f64 / k,
            successes: rows.len(),
            failures: records.len() - rows.len(),
        });
    }
    if estimators.is_empty() {
        return Err(Error::AllReplicationsFailed(records.len()));
    }
    Ok(McSummary { theta0, estimators })
}

/// Output of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRun {
    pub config: McConfig,
    pub c1: f64,
    pub records: Vec<ReplicationRecord>,
    pub summary: McSummary,
}

/// Draws of the average-derivative design: per coordinate,
/// `(X_j, Z_j, u_j)` is normal with unit variances, `corr(X, Z) = 0.8`,
/// `corr(X, u) = 0.5`, `corr(Z, u) = 0`; `Y = X_1 + exp(-|X_{-1}|^2 / 2) + sum_j u_j`.
pub fn simulate_avg_derivative(k: usize, n: usize, noise_scale: f64, seed: u64) -> Result<IvData> {
    if k == 0 || n == 0 {
        return Err(Error::InvalidArgument("need k >= 1 and n >= 1".into()));
    }
    let cov = Matrix3::new(1.0, 0.8, 0.5, 0.8, 1.0, 0.0, 0.5, 0.0, 1.0);
    let chol = cov.cholesky().expect("covariance is positive definite").l();
    let mut rng = seeded_rng(seed, 0);
    let mut x = DMatrix::zeros(n, k);
    let mut z = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut v = 0.0;
        for j in 0..k {
            let e = nalgebra::Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let w = chol * e;
            x[(i, j)] = w[0];
            z[(i, j)] = w[1];
            v += w[2];
        }
        let rest: f64 = (1..k).map(|j| x[(i, j)].powi(2)).sum();
        y[i] = x[(i, 0)] + (-0.5 * rest).exp() + noise_scale * v;
    }
    IvData::new(y, x, z)
}

/// Plug-in and debiased estimates for one average-derivative replication seed.
pub fn avg_derivative_replication(config: &McConfig, seed: u64) -> Result<Estimates> {
    let k = config.dim;
    let data = simulate_avg_derivative(k, config.size, config.noise_scale, seed)?;
    let dict = Dictionary::polynomial(k, config.degree, true)?;
    let mut lasso = DoubleLassoConfig {
        stage1_alpha: config.stage1_alpha,
        ..DoubleLassoConfig::default()
    };
    if let Some(a) = config.stage2_alpha {
        lasso.stage2 = Stage2Penalty::Fixed(a);
    }
    let mliv = MlivConfig::DoubleLasso {
        x_dict: dict.clone(),
        z_dict: dict.clone(),
        config: lasso,
    };
    let folds = make_folds(config.size, config.folds, derive_seed(seed, 1))?;
    let spec = avg_derivative_spec(0, None);
    estimate_linear(&spec, &data, &dict, &dict, &mliv, &config.riesz_config(), &folds)
}

/// Plug-in and debiased estimates for one elasticity replication seed.
pub fn elasticity_replication(config: &McConfig, seed: u64) -> Result<Estimates> {
    let markets = market_data(simulate_logit_markets(
        config.dim,
        config.size,
        &DemandParams::default(),
        seed,
    )?)?;
    let state_dim = markets[0].state_dim();
    let z_dim = markets[0].instruments[0].len();
    let d_dict = Dictionary::polynomial(state_dim, config.degree, true)?;
    let b_dict = Dictionary::polynomial(z_dim, config.degree, false)?;
    let mliv = MlivConfig::KernelIv(match config.kiv_ridge {
        Some(r) => KivConfig {
            bandwidth_scale: config.bandwidth_scale,
            ridge1: r,
            ridge2: r,
            ..KivConfig::default()
        },
        None => KivConfig {
            bandwidth_scale: config.bandwidth_scale,
            ridge_grid: Some(kiv_ridge_grid()),
            ..KivConfig::default()
        },
    });
    let folds = make_folds(config.size, config.folds, derive_seed(seed, 1))?;
    let spec = OwnPriceElasticity { product: 1 };
    estimate_nonlinear(
        &spec,
        &markets,
        &d_dict,
        &b_dict,
        &mliv,
        &config.riesz_config(),
        &folds,
        1,
    )
}

fn run(config: &McConfig, theta0: f64, rep: impl Fn(&McConfig, u64) -> Result<Estimates> + Sync) -> Result<McRun> {
    let records: Vec<ReplicationRecord> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.seed, r as u64);
            ReplicationRecord::from_estimates(r, seed, rep(config, seed))
        })
        .collect();
    let summary = summarize(&records, theta0)?;
    Ok(McRun {
        config: config.clone(),
        c1: config.effective_c1(),
        records,
        summary,
    })
}

pub fn run_avg_derivative_mc(config: &McConfig) -> Result<McRun> {
    config.validate()?;
    if config.design != Design::AvgDerivative {
        return Err(Error::InvalidArgument("expected the average-derivative design".into()));
    }
    run(config, config.theta0.unwrap_or(1.0), avg_derivative_replication)
}

pub fn run_elasticity_mc(config: &McConfig) -> Result<McRun> {
    config.validate()?;
    if config.design != Design::Elasticity {
        return Err(Error::InvalidArgument("expected the elasticity design".into()));
    }
    let theta0 = match config.theta0 {
        Some(t) => t,
        None => approximate_theta0_elasticity(config.dim, config.presim_markets, PRESIM_SEED)?,
    };
    run(config, theta0, elasticity_replication)
}

/// Mean logit own-price elasticity `beta_p p_1 (1 - s_1)` of product 1 over
/// `presim_markets` simulated markets.
pub fn approximate_theta0_elasticity(num_products: usize, presim_markets: usize, seed: u64) -> Result<f64> {
    if presim_markets < 1000 {
        return Err(Error::InvalidArgument(format!(
            "pre-simulation with {presim_markets} markets; need at least 1000"
        )));
    }
    if num_products == 0 {
        return Err(Error::InvalidArgument("need at least one product".into()));
    }
    let params = DemandParams::default();
    let total = (0..presim_markets)
        .into_par_iter()
        .map(|t| {
            let m = simulate_market(num_products, &params, seed, t);
            logit_elasticity_oracle(params.beta_p, m.price(1), m.share(1))
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok(total / presim_markets as f64)
}

/// One row per estimator: `k_or_J, n_or_T, estimator, abs_bias, median_se,
/// coverage, successes, failures`.
pub fn write_summary_csv<W: Write>(writer: W, run: &McRun) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let (dim, size) = match run.config.design {
        Design::AvgDerivative => ("k", "n"),
        Design::Elasticity => ("J", "T"),
    };
    wtr.write_record([
        dim, size, "estimator", "abs_bias", "median_se", "coverage", "successes", "failures",
    ])?;
    for e in &run.summary.estimators {
        wtr.write_record([
            run.config.dim.to_string(),
            run.config.size.to_string(),
            e.estimator.label().to_string(),
            format_f64(e.abs_bias),
            format_f64(e.median_se),
            format_f64(e.coverage),
            e.successes.to_string(),
            e.failures.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row per replication with both estimators.
pub fn write_replications_csv<W: Write>(writer: W, run: &McRun) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "replication",
        "seed",
        "pi_theta",
        "pi_se",
        "adml_theta",
        "adml_se",
        "excluded",
        "error",
    ])?;
    let cell = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for r in &run.records {
        wtr.write_record([
            r.replication.to_string(),
            r.seed.to_string(),
            cell(r.plugin.map(|p| p.theta_hat)),
            cell(r.plugin.map(|p| p.se)),
            cell(r.adml.map(|p| p.theta_hat)),
            cell(r.adml.map(|p| p.se)),
            r.excluded.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Config, seeds and summary as one JSON document.
pub fn write_sidecar_json<W: Write>(writer: W, run: &McRun) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        config: &'a McConfig,
        c1: f64,
        replication_seeds: Vec<u64>,
        summary: &'a McSummary,
    }
    let doc = Sidecar {
        config: &run.config,
        c1: run.c1,
        replication_seeds: run.records.iter().map(|r| r.seed).collect(),
        summary: &run.summary,
    };
    serde_json::to_writer_pretty(writer, &doc).map_err(|e| Error::Io(e.to_string()))
}
