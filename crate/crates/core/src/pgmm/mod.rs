//! Penalized GMM estimation of Riesz representer coefficients.
//!
//! The problem is
//! `min_rho (M - G rho)' Omega_q (M - G rho) + 2 lambda sum_j w_j |rho_j|`
//! with `Omega_q = Omega / q`, solved by coordinate-wise descent with an
//! optional active-set strategy.

mod cv;
mod estimate;
pub(crate) mod solver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cv::{cross_validate_c1, CvReport};
pub use estimate::{
    adaptive_weights, diagonal_weights, estimate_riesz, two_stage_solve, MomentData, RieszConfig,
    RieszEstimate, TwoStageFit, ADAPTIVE_WEIGHT_FLOOR, VARIANCE_FLOOR,
};
pub use solver::soft_threshold;

use solver::{Quadratic, Solution};

/// Weight matrix of the quadratic form, before division by `q`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Identity,
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Weight {
    fn validate(&self, q: usize) -> Result<()> {
        match self {
            Weight::Identity => Ok(()),
            Weight::Diagonal(d) => {
                if d.len() != q {
                    return Err(Error::dims("diagonal weight", q, d.len()));
                }
                if d.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "diagonal weights must be strictly positive".into(),
                    ));
                }
                Ok(())
            }
            Weight::Dense(w) => {
                if w.nrows() != q || w.ncols() != q {
                    return Err(Error::dims("weight matrix", q, w.nrows().max(w.ncols())));
                }
                let scale = w.amax().max(1.0);
                for i in 0..q {
                    for j in 0..i {
                        if (w[(i, j)] - w[(j, i)]).abs() > 1e-10 * scale {
                            return Err(Error::InvalidArgument(
                                "weight matrix is not symmetric".into(),
                            ));
                        }
                    }
                }
                let min_eig = w.clone().symmetric_eigenvalues().min();
                if min_eig < -1e-10 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "weight matrix is not positive semidefinite (eigenvalue {min_eig:.3e})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// `Omega v`.
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Weight::Identity => v.clone(),
            Weight::Diagonal(d) => v.component_mul(d),
            Weight::Dense(w) => w * v,
        }
    }

    /// `Omega A` for a matrix with `q` rows.
    fn apply_rows(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Weight::Identity => a.clone(),
            Weight::Diagonal(d) => {
                let mut out = a.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            Weight::Dense(w) => w * a,
        }
    }

    /// Multiply by a positive scalar.
    pub fn scaled(&self, kappa: f64, q: usize) -> Weight {
        match self {
            Weight::Identity => Weight::Diagonal(DVector::from_element(q, kappa)),
            Weight::Diagonal(d) => Weight::Diagonal(d * kappa),
            Weight::Dense(w) => Weight::Dense(w * kappa),
        }
    }
}

/// One PGMM problem: `G` is `q x p`, `M` has length `q`.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    g: DMatrix<f64>,
    m: DVector<f64>,
    omega: Weight,
    n_obs: Option<usize>,
}

impl MomentSystem {
    pub fn new(g: DMatrix<f64>, m: DVector<f64>, omega: Weight) -> Result<Self> {
        let (q, p) = g.shape();
        if q == 0 || p == 0 {
            return Err(Error::Empty("moment matrix"));
        }
        if m.len() != q {
            return Err(Error::dims("moment vector", q, m.len()));
        }
        if g.iter().chain(m.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite entry in G or M".into()));
        }
        omega.validate(q)?;
        Ok(Self {
            g,
            m,
            omega,
            n_obs: None,
        })
    }

    /// Records the sample size behind `G` and `M`, used by the default penalty.
    pub fn with_n_obs(mut self, n: usize) -> Self {
        self.n_obs = Some(n);
        self
    }

    pub fn with_weight(&self, omega: Weight) -> Result<Self> {
        omega.validate(self.q())?;
        Ok(Self {
            omega,
            ..self.clone()
        })
    }

    pub fn q(&self) -> usize {
        self.g.nrows()
    }

    pub fn p(&self) -> usize {
        self.g.ncols()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn m(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn omega(&self) -> &Weight {
        &self.omega
    }

    pub fn n_obs(&self) -> Option<usize> {
        self.n_obs
    }

    /// `H = G' Omega_q G` and `c = G' Omega_q M`.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.q() as f64;
        let wg = self.omega.apply_rows(&self.g) / q;
        let h = self.g.transpose() * &wg;
        let h = (&h + h.transpose()) * 0.5;
        let c = wg.transpose() * &self.m;
        (h, c)
    }

    fn quadratic(&self, thresholds: Vec<f64>) -> Quadratic {
        let (h, c) = self.normal_equations();
        let constant = self.m.dot(&self.omega.apply(&self.m)) / self.q() as f64;
        Quadratic {
            h,
            c,
            constant,
            thresholds,
        }
    }
}

/// How `lambda` shrinks with the sample size when it is not set absolutely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyRate {
    /// `sqrt(log q / n)`.
    #[default]
    RootLogQOverN,
    /// `n^{-1/4}`, the slower rate used for nonlinear functionals.
    QuarterPower,
}

impl PenaltyRate {
    pub fn value(self, q: usize, n: usize) -> f64 {
        let n = n as f64;
        match self {
            PenaltyRate::RootLogQOverN => ((q.max(2) as f64).ln() / n).sqrt(),
            PenaltyRate::QuarterPower => n.powf(-0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub c1: f64,
    pub c0: f64,
    pub rate: PenaltyRate,
    /// Absolute `lambda`, bypassing `c1` and the rate.
    pub lambda: Option<f64>,
    /// Adaptive weights; the intercept entry is still multiplied by `c0`.
    pub weights: Option<Vec<f64>>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            c1: 1e-2,
            c0: 0.1,
            rate: PenaltyRate::RootLogQOverN,
            lambda: None,
            weights: None,
        }
    }
}

impl PenaltyConfig {
    pub fn with_c1(c1: f64) -> Self {
        Self {
            c1,
            ..Self::default()
        }
    }

    /// Fixed `lambda` with the default intercept factor.
    pub fn absolute(lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::default()
        }
    }

    /// Fixed `lambda`, every coordinate weighted 1.
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            c0: 1.0,
            ..Self::default()
        }
    }

    pub fn lambda_for(&self, q: usize, n: Option<usize>) -> Result<f64> {
        let lambda = match (self.lambda, n) {
            (Some(l), _) => l,
            (None, Some(n)) if n > 0 => self.c1 * self.rate.value(q, n),
            (None, _) => {
                return Err(Error::InvalidArgument(
                    "penalty needs an absolute lambda or a sample size".into(),
                ))
            }
        };
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid lambda {lambda}")));
        }
        Ok(lambda)
    }

    /// Effective per-coordinate weights `w_j`.
    pub fn coordinate_weights(&self, p: usize) -> Result<Vec<f64>> {
        if !(self.c0 >= 0.0) {
            return Err(Error::InvalidArgument("c0 must be nonnegative".into()));
        }
        let mut w = match &self.weights {
            Some(w) if w.len() != p => return Err(Error::dims("adaptive weights", p, w.len())),
            Some(w) => {
                if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "adaptive weights must be positive".into(),
                    ));
                }
                w.clone()
            }
            None => vec![1.0; p],
        };
        w[0] *= self.c0;
        Ok(w)
    }

    fn thresholds(&self, system: &MomentSystem) -> Result<(f64, Vec<f64>)> {
        let lambda = self.lambda_for(system.q(), system.n_obs())?;
        let w = self.coordinate_weights(system.p())?;
        let t = w.iter().map(|w| w * lambda).collect();
        Ok((lambda, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    CoordinateDescent,
    #[default]
    ActiveSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    /// Defaults to `p` when absent.
    pub max_outer: Option<usize>,
    pub algorithm: Algorithm,
    /// Active set only: periodically jump to the exact minimiser over the
    /// current support with signs held fixed, kept when it lowers the objective.
    #[serde(default = "default_polish")]
    pub polish: bool,
}

fn default_polish() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 10_000,
            max_outer: None,
            algorithm: Algorithm::ActiveSet,
            polish: true,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidArgument("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RieszFit {
    #[serde(serialize_with = "crate::io::serialize_dvector")]
    pub rho: DVector<f64>,
    pub active_set: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub kkt_max_violation: f64,
    pub sweeps_used: usize,
    pub outer_iters_used: usize,
    /// Coordinates with zero curvature, held at zero.
    pub frozen: Vec<usize>,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl RieszFit {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// `alpha(z) = b(z)' rho`.
    pub fn riesz_value(&self, b: &[f64]) -> f64 {
        b.iter().zip(self.rho.iter()).map(|(b, r)| b * r).sum()
    }
}

fn finish(quad: &Quadratic, sol: Solution, lambda: f64, weights: Vec<f64>) -> RieszFit {
    let r = quad.residual(&sol.rho);
    let kkt = kkt_magnitudes(&r, &sol.rho, &quad.thresholds)
        .into_iter()
        .enumerate()
        .filter(|(j, _)| !sol.frozen.contains(j))
        .map(|(_, v)| v)
        .fold(0.0_f64, f64::max);
    let active_set = (0..sol.rho.len()).filter(|&j| sol.rho[j] != 0.0).collect();
    RieszFit {
        rho: sol.rho,
        active_set,
        objective_trace: sol.objective_trace,
        kkt_max_violation: kkt,
        sweeps_used: sol.sweeps,
        outer_iters_used: sol.outer_iters,
        frozen: sol.frozen,
        lambda,
        weights,
    }
}

fn run(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
    init: Option<&DVector<f64>>,
    algorithm: Algorithm,
) -> Result<RieszFit> {
    config.validate()?;
    let (lambda, thresholds) = penalty.thresholds(system)?;
    let weights = penalty.coordinate_weights(system.p())?;
    let quad = system.quadratic(thresholds);
    let sol = match algorithm {
        Algorithm::CoordinateDescent => quad.solve_cd(config, init)?,
        Algorithm::ActiveSet => quad.solve_active_set(config, init)?,
    }
    .require_converged()?;
    Ok(finish(&quad, sol, lambda, weights))
}

/// `(M - G rho)' Omega_q (M - G rho) + 2 lambda sum_j w_j |rho_j|`.
pub fn objective_value(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    rho: &DVector<f64>,
) -> Result<f64> {
    if rho.len() != system.p() {
        return Err(Error::dims("rho", system.p(), rho.len()));
    }
    let (_, thresholds) = penalty.thresholds(system)?;
    let resid = system.m() - system.g() * rho;
    let quad = resid.dot(&system.omega().apply(&resid)) / system.q() as f64;
    let pen: f64 = rho
        .iter()
        .zip(&thresholds)
        .map(|(r, t)| t * r.abs())
        .sum();
    Ok(quad + 2.0 * pen)
}

/// Plain cyclic coordinate descent over all coordinates.
pub fn solve_cd(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<RieszFit> {
    run(system, penalty, config, init, Algorithm::CoordinateDescent)
}

/// Coordinate descent restricted to an active set grown by KKT checks.
pub fn solve_active_set(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<RieszFit> {
    run(system, penalty, config, init, Algorithm::ActiveSet)
}

/// Dispatches on `config.algorithm`.
pub fn solve(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<RieszFit> {
    run(system, penalty, config, init, config.algorithm)
}

/// Pilot fit with unit weights, then a refit with weights `1 / |rho_j|`
/// started from the pilot.
pub fn adaptive_solve(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<(RieszFit, RieszFit)> {
    let plain = PenaltyConfig {
        weights: None,
        ..penalty.clone()
    };
    let pilot = solve(system, &plain, config, init)?;
    let refit_penalty = PenaltyConfig {
        weights: Some(adaptive_weights(&pilot.rho)),
        ..penalty.clone()
    };
    let refit = solve(system, &refit_penalty, config, Some(&pilot.rho))?;
    Ok((pilot, refit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktViolation {
    pub index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub violations: Vec<KktViolation>,
    pub max_violation: f64,
}

impl KktReport {
    pub fn is_optimal(&self) -> bool {
        self.violations.is_empty()
    }
}

fn kkt_magnitudes(r: &DVector<f64>, rho: &DVector<f64>, thresholds: &[f64]) -> Vec<f64> {
    (0..rho.len())
        .map(|j| {
            if rho[j] != 0.0 {
                (r[j] - thresholds[j] * rho[j].signum()).abs()
            } else {
                (r[j].abs() - thresholds[j]).max(0.0)
            }
        })
        .collect()
}

/// Subgradient optimality check of `rho` at the given slack.
pub fn kkt_violations(
    system: &MomentSystem,
    penalty: &PenaltyConfig,
    rho: &DVector<f64>,
    slack: f64,
) -> Result<KktReport> {
    if rho.len() != system.p() {
        return Err(Error::dims("rho", system.p(), rho.len()));
    }
    let (_, thresholds) = penalty.thresholds(system)?;
    let quad = system.quadratic(thresholds);
    let r = quad.residual(rho);
    let mags = kkt_magnitudes(&r, rho, &quad.thresholds);
    let violations: Vec<KktViolation> = mags
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > slack)
        .map(|(index, &magnitude)| KktViolation { index, magnitude })
        .collect();
    let max_violation = mags.iter().copied().fold(0.0_f64, f64::max);
    Ok(KktReport {
        violations,
        max_violation,
    })
}

/// Unpenalized minimizer `(G' Omega_q G)^{-1} G' Omega_q M`.
pub fn closed_form_gmm(system: &MomentSystem) -> Result<DVector<f64>> {
    if system.p() > system.q() {
        return Err(Error::Singular("normal matrix (p > q)"));
    }
    let (h, c) = system.normal_equations();
    let chol = h.cholesky().ok_or(Error::Singular("normal matrix"))?;
    Ok(chol.solve(&c))
}
