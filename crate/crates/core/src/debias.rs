//! Cross-fitted plug-in and debiased estimators.
//!
//! For fold `l`, `gamma_l` and the Riesz representer `alpha_l` are trained
//! off-fold and evaluated on-fold:
//!
//! ```text
//! theta = (1/n) sum_l sum_{i in I_l} m(W_i, gamma_l) + alpha_l(Z_i) (Y_i - gamma_l(X_i))
//! V     = (1/n) sum psi_i^2
//! ```
//!
//! Nonlinear functionals need `gamma` inside the Riesz moment vector `M`. The
//! summand for market `t` in `M_l` uses the fit that excludes both fold `l` and
//! the fold of `t`, so one fit per unordered fold pair is shared between the
//! two folds of the pair.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::Dictionary;
use crate::demand::MarketData;
use crate::error::{Error, Result};
pub use crate::folds::FoldPlan;
use crate::functionals::{linear_moment_data, FunctionalSpec};
use crate::mliv::{GammaEstimate, MlivConfig, StructuralFunction};
use crate::pgmm::{estimate_riesz, MomentData, RieszConfig, RieszEstimate};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

pub fn make_folds(n: usize, num_folds: usize, seed: u64) -> Result<FoldPlan> {
    FoldPlan::new(n, num_folds, seed)
}

/// `Y`, regressors `X` and instruments `Z`, one row per observation.
#[derive(Debug, Clone)]
pub struct IvData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl IvData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Empty("IV sample"));
        }
        if x.nrows() != n {
            return Err(Error::dims("regressor rows", n, x.nrows()));
        }
        if z.nrows() != n {
            return Err(Error::dims("instrument rows", n, z.nrows()));
        }
        Ok(Self { y, x, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            y: self.y.select_rows(rows),
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
        }
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn z_row(&self, i: usize) -> Vec<f64> {
        self.z.row(i).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSummary {
    DoubleLasso {
        stage2_alpha: f64,
        stage1_unconverged: usize,
        stage2_converged: bool,
    },
    KernelIv {
        sigma_x: f64,
        sigma_z: f64,
        ridge1: f64,
        ridge2: f64,
    },
}

impl GammaSummary {
    pub fn of(gamma: &GammaEstimate) -> Self {
        match gamma {
            GammaEstimate::DoubleLasso { diagnostics, .. } => GammaSummary::DoubleLasso {
                stage2_alpha: diagnostics.stage2_alpha,
                stage1_unconverged: diagnostics.stage1_unconverged,
                stage2_converged: diagnostics.stage2_converged,
            },
            GammaEstimate::KernelIv(f) => GammaSummary::KernelIv {
                sigma_x: f.sigma_x,
                sigma_z: f.sigma_z,
                ridge1: f.ridge1,
                ridge2: f.ridge2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RieszSummary {
    pub active_set_size: usize,
    pub kkt_max_violation: f64,
    pub lambda: f64,
    pub fallback: Option<String>,
}

impl RieszSummary {
    fn of(est: &RieszEstimate) -> Self {
        Self {
            active_set_size: est.fit.active_set.len(),
            kkt_max_violation: est.fit.kkt_max_violation,
            lambda: est.fit.lambda,
            fallback: est.fallback.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub gamma: GammaSummary,
    pub riesz: Option<RieszSummary>,
    /// Markets dropped from this fold's moment vector for a singular share Jacobian.
    pub excluded_from_moments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebiasedResult {
    pub theta_hat: f64,
    pub variance_hat: f64,
    pub se: f64,
    pub ci_95: [f64; 2],
    /// Observations entering the average.
    pub n: usize,
    /// Indices of those observations, aligned with `psi_values`.
    pub observations: Vec<usize>,
    pub psi_values: Vec<f64>,
    /// Observations dropped for a singular share Jacobian.
    pub excluded: Vec<usize>,
    pub per_fold: Vec<FoldDiagnostics>,
    pub pair_fits: usize,
}

impl DebiasedResult {
    /// `theta` is the mean of `terms`, `psi_i = terms_i - theta` and `V` is
    /// `mean psi^2` times `n / (n - dof)`.
    fn from_terms(observations: Vec<usize>, terms: Vec<f64>, dof: usize) -> Result<Self> {
        let n = terms.len();
        if n <= dof {
            return Err(Error::Empty("evaluated observations"));
        }
        let theta = terms.iter().sum::<f64>() / n as f64;
        let psi: Vec<f64> = terms.iter().map(|t| t - theta).collect();
        let variance = psi.iter().map(|p| p * p).sum::<f64>() / (n - dof) as f64;
        let se = (variance / n as f64).sqrt();
        Ok(Self {
            theta_hat: theta,
            variance_hat: variance,
            se,
            ci_95: [theta - Z_95 * se, theta + Z_95 * se],
            n,
            observations,
            psi_values: psi,
            excluded: Vec::new(),
            per_fold: Vec::new(),
            pair_fits: 0,
        })
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.ci_95[0] <= theta && theta <= self.ci_95[1]
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["theta_hat", "se", "ci_lo", "ci_hi", "variance_hat", "n", "excluded"];

    pub fn csv_row(&self) -> Vec<String> {
        let f = crate::io::format_f64;
        vec![
            f(self.theta_hat),
            f(self.se),
            f(self.ci_95[0]),
            f(self.ci_95[1]),
            f(self.variance_hat),
            self.n.to_string(),
            self.excluded.len().to_string(),
        ]
    }
}

/// Plug-in and debiased estimates from one set of cross-fitted nuisances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimates {
    pub plugin: DebiasedResult,
    pub debiased: DebiasedResult,
}

/// One `gamma` per fold, each trained off-fold.
pub fn cross_fit_gammas(data: &IvData, mliv: &MlivConfig, folds: &FoldPlan) -> Result<Vec<GammaEstimate>> {
    check_plan(folds, data.n())?;
    (0..folds.num_folds())
        .into_par_iter()
        .map(|l| {
            let train = data.subset(&folds.complement(l));
            mliv.fit(&train.y, &train.x, &train.z).map_err(|e| e.in_fold(l))
        })
        .collect()
}

fn check_plan(folds: &FoldPlan, n: usize) -> Result<()> {
    if folds.n() != n {
        return Err(Error::dims("fold plan", n, folds.n()));
    }
    Ok(())
}

fn check_gammas(gammas: &[GammaEstimate], folds: &FoldPlan) -> Result<()> {
    if gammas.len() != folds.num_folds() {
        return Err(Error::dims("per-fold gamma fits", folds.num_folds(), gammas.len()));
    }
    Ok(())
}

/// `theta = mean m(W_i, gamma_{l(i)})`, SE from the sample standard deviation.
pub fn plugin_estimate<F>(
    spec: &F,
    gammas: &[GammaEstimate],
    data: &IvData,
    folds: &FoldPlan,
) -> Result<DebiasedResult>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    check_plan(folds, data.n())?;
    check_gammas(gammas, folds)?;
    let terms = (0..data.n())
        .map(|i| spec.eval(&data.x_row(i), &gammas[folds.fold_of(i)]))
        .collect::<Result<Vec<_>>>()?;
    DebiasedResult::from_terms((0..data.n()).collect(), terms, 1)
}

/// Debiased estimate given per-fold `gamma` and Riesz values on each fold.
fn debias_with<F>(
    spec: &F,
    gammas: &[GammaEstimate],
    data: &IvData,
    folds: &FoldPlan,
    alpha: impl Fn(usize, usize) -> f64,
) -> Result<DebiasedResult>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    let terms = (0..data.n())
        .map(|i| {
            let l = folds.fold_of(i);
            let x = data.x_row(i);
            let g = &gammas[l];
            Ok(spec.eval(&x, g)? + alpha(l, i) * (data.y[i] - g.value(&x)))
        })
        .collect::<Result<Vec<_>>>()?;
    DebiasedResult::from_terms((0..data.n()).collect(), terms, 0)
}

/// Debiased estimate with a known Riesz representer `alpha(z)`.
pub fn debias_with_known_riesz<F>(
    spec: &F,
    gammas: &[GammaEstimate],
    data: &IvData,
    folds: &FoldPlan,
    alpha: impl Fn(&[f64]) -> f64,
) -> Result<DebiasedResult>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    check_plan(folds, data.n())?;
    check_gammas(gammas, folds)?;
    debias_with(spec, gammas, data, folds, |_, i| alpha(&data.z_row(i)))
}

/// Plug-in and debiased estimates of a linear functional.
#[allow(clippy::too_many_arguments)]
pub fn estimate_linear<F>(
    spec: &F,
    data: &IvData,
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    mliv: &MlivConfig,
    pgmm: &RieszConfig,
    folds: &FoldPlan,
) -> Result<Estimates>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    if !spec.is_linear() {
        return Err(Error::InvalidArgument(
            "nonlinear functionals need the double cross-fitted estimator".into(),
        ));
    }
    let gammas = cross_fit_gammas(data, mliv, folds)?;
    let moments = linear_moment_data(spec, d_dict, b_dict, &data.x, &data.z)?;
    let riesz = (0..folds.num_folds())
        .into_par_iter()
        .map(|l| {
            estimate_riesz(&moments.subset(&folds.complement(l))?, pgmm).map_err(|e| e.in_fold(l))
        })
        .collect::<Result<Vec<_>>>()?;
    let b = moments.b();
    let alpha = |l: usize, i: usize| -> f64 {
        b.row(i).iter().zip(riesz[l].rho().iter()).map(|(u, v)| u * v).sum()
    };
    let mut debiased = debias_with(spec, &gammas, data, folds, alpha)?;
    debiased.per_fold = (0..folds.num_folds())
        .map(|l| FoldDiagnostics {
            fold: l,
            train_size: data.n() - folds.fold(l).len(),
            eval_size: folds.fold(l).len(),
            gamma: GammaSummary::of(&gammas[l]),
            riesz: Some(RieszSummary::of(&riesz[l])),
            excluded_from_moments: 0,
        })
        .collect();
    let plugin = plugin_estimate(spec, &gammas, data, folds)?;
    Ok(Estimates { plugin, debiased })
}

#[allow(clippy::too_many_arguments)]
pub fn debias_linear<F>(
    spec: &F,
    data: &IvData,
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    mliv: &MlivConfig,
    pgmm: &RieszConfig,
    folds: &FoldPlan,
) -> Result<DebiasedResult>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    Ok(estimate_linear(spec, data, d_dict, b_dict, mliv, pgmm, folds)?.debiased)
}

/// Pooled `(y, omega, z)` over every product of the given markets.
pub fn pooled_products(markets: &[MarketData], rows: &[usize]) -> Result<IvData> {
    let first = markets.first().ok_or(Error::Empty("markets"))?;
    let (dx, dz) = (first.omegas[0].len(), first.instruments[0].len());
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for &t in rows {
        let md = &markets[t];
        if md.omegas[0].len() != dx {
            return Err(Error::dims("market layout", dx, md.omegas[0].len()));
        }
        for j in 0..md.num_products() {
            y.push(md.outcomes[j]);
            x.extend_from_slice(&md.omegas[j]);
            z.extend_from_slice(&md.instruments[j]);
        }
    }
    let n = y.len();
    IvData::new(
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, dx, &x),
        DMatrix::from_row_slice(n, dz, &z),
    )
}

/// A `gamma` fit with the markets it was trained on.
#[derive(Debug, Clone)]
pub struct TrainedGamma {
    pub gamma: GammaEstimate,
    pub training: Vec<usize>,
}

fn fit_on_markets(markets: &[MarketData], rows: Vec<usize>, mliv: &MlivConfig) -> Result<TrainedGamma> {
    let data = pooled_products(markets, &rows)?;
    Ok(TrainedGamma {
        gamma: mliv.fit(&data.y, &data.x, &data.z)?,
        training: rows,
    })
}

/// Fits trained off each unordered fold pair.
#[derive(Debug, Clone)]
pub struct PairFits {
    fits: BTreeMap<(usize, usize), TrainedGamma>,
}

impl PairFits {
    pub fn from_fits(fits: BTreeMap<(usize, usize), TrainedGamma>) -> Self {
        Self { fits }
    }

    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }

    pub fn get(&self, a: usize, b: usize) -> Result<&TrainedGamma> {
        self.fits
            .get(&(a.min(b), a.max(b)))
            .ok_or(Error::MissingPairFit(a, b))
    }
}

/// One fit per unordered fold pair, trained on the markets outside both folds.
pub fn fit_pair_gammas(markets: &[MarketData], mliv: &MlivConfig, folds: &FoldPlan) -> Result<PairFits> {
    check_plan(folds, markets.len())?;
    let fits = folds
        .pairs()
        .into_par_iter()
        .map(|(a, b)| {
            let fit = fit_on_markets(markets, folds.excluding(&[a, b]), mliv)
                .map_err(|e| e.in_fold(a))?;
            Ok(((a, b), fit))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(PairFits { fits })
}

/// One fit per fold, trained on the markets outside it.
pub fn fit_fold_gammas(
    markets: &[MarketData],
    mliv: &MlivConfig,
    folds: &FoldPlan,
) -> Result<Vec<TrainedGamma>> {
    check_plan(folds, markets.len())?;
    (0..folds.num_folds())
        .into_par_iter()
        .map(|l| fit_on_markets(markets, folds.complement(l), mliv).map_err(|e| e.in_fold(l)))
        .collect()
}

/// Moment rows of one fold for a nonlinear functional.
#[derive(Debug, Clone)]
pub struct FoldMoments {
    pub fold: usize,
    /// Off-fold markets contributing a row, in row order.
    pub markets: Vec<usize>,
    /// Pair fit used for each row.
    pub sources: Vec<(usize, usize)>,
    /// Row `r` holds the Gateaux derivatives at market `markets[r]`.
    pub m_rows: DMatrix<f64>,
    pub excluded: Vec<usize>,
}

impl FoldMoments {
    #[allow(non_snake_case)]
    pub fn M_hat(&self) -> DVector<f64> {
        self.m_rows.row_mean().transpose()
    }
}

fn is_singular(e: &Error) -> bool {
    matches!(e, Error::SingularShareJacobian { .. })
}

/// `M_lk = mean over off-fold markets t of D(W_t, gamma_{l, l(t)}, d_k)`.
/// Markets with a singular share Jacobian under the pair fit are dropped.
#[allow(non_snake_case)]
pub fn build_M_nonlinear<F>(
    spec: &F,
    d_dict: &Dictionary,
    folds: &FoldPlan,
    pairs: &PairFits,
    markets: &[MarketData],
) -> Result<Vec<FoldMoments>>
where
    F: FunctionalSpec<Obs = MarketData>,
{
    check_plan(folds, markets.len())?;
    (0..folds.num_folds())
        .into_par_iter()
        .map(|l| {
            let mut rows = Vec::new();
            let mut kept = Vec::new();
            let mut sources = Vec::new();
            let mut excluded = Vec::new();
            for t in folds.complement(l) {
                let other = folds.fold_of(t);
                let fit = pairs.get(l, other).map_err(|e| e.in_fold(l))?;
                match spec.gateaux_dictionary(&markets[t], Some(&fit.gamma), d_dict) {
                    Ok(v) => {
                        rows.extend(v);
                        kept.push(t);
                        sources.push((l.min(other), l.max(other)));
                    }
                    Err(e) if is_singular(&e) => excluded.push(t),
                    Err(e) => return Err(e.in_fold(l)),
                }
            }
            if kept.is_empty() {
                return Err(Error::Empty("off-fold markets").in_fold(l));
            }
            Ok(FoldMoments {
                fold: l,
                m_rows: DMatrix::from_row_slice(kept.len(), d_dict.size(), &rows),
                markets: kept,
                sources,
                excluded,
            })
        })
        .collect()
}

/// Plug-in and debiased estimates of a nonlinear market-level functional for
/// product `target`, with double cross-fitting of the Riesz moment vector.
#[allow(clippy::too_many_arguments)]
pub fn estimate_nonlinear<F>(
    spec: &F,
    markets: &[MarketData],
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    mliv: &MlivConfig,
    pgmm: &RieszConfig,
    folds: &FoldPlan,
    target: usize,
) -> Result<Estimates>
where
    F: FunctionalSpec<Obs = MarketData>,
{
    check_plan(folds, markets.len())?;
    if let Some(md) = markets.iter().find(|md| target == 0 || target > md.num_products()) {
        return Err(Error::InvalidArgument(format!(
            "target product {target} missing from market {}",
            md.market.id
        )));
    }
    let r = target - 1;
    let pairs = fit_pair_gammas(markets, mliv, folds)?;
    let gammas = fit_fold_gammas(markets, mliv, folds)?;
    let moments = build_M_nonlinear(spec, d_dict, folds, &pairs, markets)?;

    let riesz = moments
        .par_iter()
        .map(|fm| {
            let mut d = DMatrix::zeros(fm.markets.len(), d_dict.size());
            let mut b = DMatrix::zeros(fm.markets.len(), b_dict.size());
            for (row, &t) in fm.markets.iter().enumerate() {
                d.row_mut(row).copy_from_slice(&d_dict.evaluate(&markets[t].omegas[r])?);
                b.row_mut(row).copy_from_slice(&b_dict.evaluate(&markets[t].instruments[r])?);
            }
            let data = MomentData::new(fm.m_rows.clone(), d, b)?;
            estimate_riesz(&data, pgmm).map_err(|e| e.in_fold(fm.fold))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    let mut plugin_terms = Vec::new();
    let mut debiased_terms = Vec::new();
    let mut excluded = Vec::new();
    for t in 0..markets.len() {
        let l = folds.fold_of(t);
        let md = &markets[t];
        let gamma = &gammas[l].gamma;
        let m = match spec.eval(md, gamma) {
            Ok(v) => v,
            Err(e) if is_singular(&e) => {
                excluded.push(t);
                continue;
            }
            Err(e) => return Err(e.in_fold(l)),
        };
        let alpha = riesz[l].fit.riesz_value(&b_dict.evaluate(&md.instruments[r])?);
        let resid = md.outcomes[r] - gamma.value(&md.omegas[r]);
        observations.push(t);
        plugin_terms.push(m);
        debiased_terms.push(m + alpha * resid);
    }

    let per_fold: Vec<FoldDiagnostics> = (0..folds.num_folds())
        .map(|l| FoldDiagnostics {
            fold: l,
            train_size: gammas[l].training.len(),
            eval_size: folds.fold(l).len(),
            gamma: GammaSummary::of(&gammas[l].gamma),
            riesz: Some(RieszSummary::of(&riesz[l])),
            excluded_from_moments: moments[l].excluded.len(),
        })
        .collect();
    let mut plugin = DebiasedResult::from_terms(observations.clone(), plugin_terms, 1)?;
    let mut debiased = DebiasedResult::from_terms(observations, debiased_terms, 0)?;
    for res in [&mut plugin, &mut debiased] {
        res.excluded = excluded.clone();
        res.pair_fits = pairs.len();
    }
    debiased.per_fold = per_fold;
    Ok(Estimates { plugin, debiased })
}

#[allow(clippy::too_many_arguments)]
pub fn debias_nonlinear<F>(
    spec: &F,
    markets: &[MarketData],
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    mliv: &MlivConfig,
    pgmm: &RieszConfig,
    folds: &FoldPlan,
    target: usize,
) -> Result<DebiasedResult>
where
    F: FunctionalSpec<Obs = MarketData>,
{
    Ok(estimate_nonlinear(spec, markets, d_dict, b_dict, mliv, pgmm, folds, target)?.debiased)
}
