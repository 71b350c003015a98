//! Functionals `theta = E[m(W, gamma)]` and their Gateaux derivatives, plus
//! the builders of the sample moments `G` and `M` used by the Riesz solver.
//!
//! Linear functionals act on a regressor row `x`. The own-price elasticity
//! acts on a whole market, differentiating the inverse demand
//! `log(s_j / s_0) - x1_j = gamma(omega_j) + xi_j` by the implicit function
//! theorem: `ds/dp = (L - Gamma_s)^{-1} Gamma_p`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::Dictionary;
use crate::demand::{Market, MarketData, OMEGA_BLOCK, PRICE_ENTRY, SHARE_ENTRY};
use crate::error::{Error, Result};
use crate::mliv::{design_matrix, StructuralFunction};
use crate::pgmm::MomentData;

/// Condition number above which `L - Gamma_s` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Shares must sum to one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// `m(W, gamma)` and its directional derivative in `gamma`.
pub trait FunctionalSpec: Send + Sync {
    type Obs: ?Sized + Sync;

    fn is_linear(&self) -> bool;

    fn eval(&self, w: &Self::Obs, gamma: &dyn StructuralFunction) -> Result<f64>;

    /// Derivative in direction `direction`. Linear functionals ignore `gamma`.
    fn gateaux(
        &self,
        w: &Self::Obs,
        gamma: Option<&dyn StructuralFunction>,
        direction: &dyn StructuralFunction,
    ) -> Result<f64>;

    /// Derivatives in the direction of every dictionary element.
    fn gateaux_dictionary(
        &self,
        w: &Self::Obs,
        gamma: Option<&dyn StructuralFunction>,
        dict: &Dictionary,
    ) -> Result<Vec<f64>> {
        (0..dict.size())
            .map(|k| self.gateaux(w, gamma, &BasisFunction::new(dict, k)))
            .collect()
    }
}

/// Element `index` of a dictionary as a function.
#[derive(Debug, Clone, Copy)]
pub struct BasisFunction<'a> {
    dict: &'a Dictionary,
    index: usize,
}

impl<'a> BasisFunction<'a> {
    pub fn new(dict: &'a Dictionary, index: usize) -> Self {
        assert!(index < dict.size(), "basis index {index} out of range");
        Self { dict, index }
    }
}

impl StructuralFunction for BasisFunction<'_> {
    fn input_dim(&self) -> usize {
        self.dict.input_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.dict.evaluate(x).expect("input dimension checked by caller")[self.index]
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|c| self.dict.partial(x, c).expect("input dimension checked by caller")[self.index])
            .collect()
    }
}

/// `sum_i c_i f_i`.
#[derive(Clone, Default)]
pub struct LinearCombination<'a> {
    terms: Vec<(f64, &'a dyn StructuralFunction)>,
}

impl<'a> LinearCombination<'a> {
    pub fn new() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn term(mut self, coef: f64, f: &'a dyn StructuralFunction) -> Self {
        self.terms.push((coef, f));
        self
    }
}

impl StructuralFunction for LinearCombination<'_> {
    fn input_dim(&self) -> usize {
        self.terms.first().map_or(0, |(_, f)| f.input_dim())
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.value(x)).sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (c, f) in &self.terms {
            for (a, b) in g.iter_mut().zip(f.gradient(x)) {
                *a += c * b;
            }
        }
        g
    }
}

type WeightFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type TransformFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

fn check_point(x: &[f64], f: &dyn StructuralFunction) -> Result<()> {
    if x.len() != f.input_dim() {
        return Err(Error::dims("functional argument", f.input_dim(), x.len()));
    }
    Ok(())
}

/// `E[w(X) d gamma(X) / dX_coord]`.
#[derive(Clone)]
pub struct AverageDerivative {
    pub coord: usize,
    weight: Option<WeightFn>,
}

pub fn avg_derivative_spec(coord: usize, weight: Option<WeightFn>) -> AverageDerivative {
    AverageDerivative { coord, weight }
}

impl AverageDerivative {
    fn weight_at(&self, x: &[f64]) -> Result<f64> {
        if self.coord >= x.len() {
            return Err(Error::InvalidArgument(format!(
                "derivative coordinate {} for a {}-dimensional regressor",
                self.coord,
                x.len()
            )));
        }
        Ok(self.weight.as_ref().map_or(1.0, |w| w(x)))
    }
}

impl FunctionalSpec for AverageDerivative {
    type Obs = [f64];

    fn is_linear(&self) -> bool {
        true
    }

    fn eval(&self, x: &[f64], gamma: &dyn StructuralFunction) -> Result<f64> {
        check_point(x, gamma)?;
        Ok(self.weight_at(x)? * gamma.gradient(x)[self.coord])
    }

    fn gateaux(
        &self,
        x: &[f64],
        _gamma: Option<&dyn StructuralFunction>,
        direction: &dyn StructuralFunction,
    ) -> Result<f64> {
        self.eval(x, direction)
    }

    fn gateaux_dictionary(
        &self,
        x: &[f64],
        _gamma: Option<&dyn StructuralFunction>,
        dict: &Dictionary,
    ) -> Result<Vec<f64>> {
        let w = self.weight_at(x)?;
        let mut v = dict.partial(x, self.coord)?;
        if w != 1.0 {
            v.iter_mut().for_each(|a| *a *= w);
        }
        Ok(v)
    }
}

/// `E[gamma(g(X)) - gamma(X)]`.
#[derive(Clone)]
pub struct PolicyEffect {
    transform: TransformFn,
}

pub fn policy_effect_spec(transform: TransformFn) -> PolicyEffect {
    PolicyEffect { transform }
}

impl PolicyEffect {
    fn moved(&self, x: &[f64]) -> Result<Vec<f64>> {
        let gx = (self.transform)(x);
        if gx.len() != x.len() {
            return Err(Error::dims("policy transform output", x.len(), gx.len()));
        }
        Ok(gx)
    }
}

impl FunctionalSpec for PolicyEffect {
    type Obs = [f64];

    fn is_linear(&self) -> bool {
        true
    }

    fn eval(&self, x: &[f64], gamma: &dyn StructuralFunction) -> Result<f64> {
        check_point(x, gamma)?;
        let gx = self.moved(x)?;
        Ok(gamma.value(&gx) - gamma.value(x))
    }

    fn gateaux(
        &self,
        x: &[f64],
        _gamma: Option<&dyn StructuralFunction>,
        direction: &dyn StructuralFunction,
    ) -> Result<f64> {
        self.eval(x, direction)
    }

    fn gateaux_dictionary(
        &self,
        x: &[f64],
        _gamma: Option<&dyn StructuralFunction>,
        dict: &Dictionary,
    ) -> Result<Vec<f64>> {
        let after = dict.evaluate(&self.moved(x)?)?;
        let before = dict.evaluate(x)?;
        Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
    }
}

fn rows_of(points: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    points.row_iter().map(|r| r.iter().copied().collect())
}

/// `G = (1/n) sum d(X_i) b(Z_i)'`, a `q x p` matrix.
#[allow(non_snake_case)]
pub fn build_G_hat(
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("moment sample"));
    }
    if z.nrows() != n {
        return Err(Error::dims("instrument rows", n, z.nrows()));
    }
    let d = design_matrix(d_dict, x)?;
    let b = design_matrix(b_dict, z)?;
    Ok(d.tr_mul(&b) / n as f64)
}

/// Per-observation Gateaux rows `m(W_i, d_k)` of a linear functional.
pub fn linear_moment_rows<F>(spec: &F, d_dict: &Dictionary, x: &DMatrix<f64>) -> Result<DMatrix<f64>>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    if !spec.is_linear() {
        return Err(Error::InvalidArgument(
            "a nonlinear functional needs a fitted gamma for its moments".into(),
        ));
    }
    if x.ncols() != d_dict.input_dim() {
        return Err(Error::dims("regressor columns", d_dict.input_dim(), x.ncols()));
    }
    let mut m = DMatrix::zeros(x.nrows(), d_dict.size());
    for (i, row) in rows_of(x).enumerate() {
        let g = spec.gateaux_dictionary(&row, None, d_dict)?;
        m.row_mut(i).copy_from_slice(&g);
    }
    Ok(m)
}

/// `M_k = (1/n) sum_i m(W_i, d_k)`.
#[allow(non_snake_case)]
pub fn build_M_linear<F>(spec: &F, d_dict: &Dictionary, x: &DMatrix<f64>) -> Result<DVector<f64>>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    if x.nrows() == 0 {
        return Err(Error::Empty("moment sample"));
    }
    let m = linear_moment_rows(spec, d_dict, x)?;
    Ok(m.row_mean().transpose())
}

/// Moment data for a linear functional over the full sample.
pub fn linear_moment_data<F>(
    spec: &F,
    d_dict: &Dictionary,
    b_dict: &Dictionary,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<MomentData>
where
    F: FunctionalSpec<Obs = [f64]>,
{
    MomentData::new(
        linear_moment_rows(spec, d_dict, x)?,
        design_matrix(d_dict, x)?,
        design_matrix(b_dict, z)?,
    )
}

/// `L_jk = d log(s_j/s_0) / d s_k = 1[j=k]/s_j + 1/s_0` for shares
/// `(s_0, s_1, ..., s_J)`.
pub fn log_share_jacobian(shares: &[f64]) -> Result<DMatrix<f64>> {
    if shares.len() < 2 {
        return Err(Error::InvalidShares("need the outside share and at least one product".into()));
    }
    if let Some(s) = shares.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidShares(format!("share {s} is not positive")));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidShares(format!("shares sum to {total}")));
    }
    let j = shares.len() - 1;
    let inv0 = 1.0 / shares[0];
    Ok(DMatrix::from_fn(j, j, |a, b| {
        if a == b {
            1.0 / shares[a + 1] + inv0
        } else {
            inv0
        }
    }))
}

/// Chain rule from the state of product `j` to prices and shares of the
/// inside goods: returns rows `(d f / d p_k, d f / d s_k)` for `k = 1..=J`
/// given the gradient of `f` in state coordinates.
fn chain_rows(j: usize, num_products: usize, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let outside_share = grad[SHARE_ENTRY];
    let mut dp = vec![0.0; num_products];
    let mut ds = vec![0.0; num_products];
    for k in 1..=num_products {
        if k == j {
            dp[k - 1] = grad
                .chunks(OMEGA_BLOCK)
                .map(|b| b[PRICE_ENTRY])
                .sum();
            ds[k - 1] = -outside_share;
        } else {
            let base = Market::block_of(j, k) * OMEGA_BLOCK;
            dp[k - 1] = -grad[base + PRICE_ENTRY];
            ds[k - 1] = grad[base + SHARE_ENTRY] - outside_share;
        }
    }
    (dp, ds)
}

fn check_layout(md: &MarketData, f: &dyn StructuralFunction) -> Result<()> {
    if f.input_dim() != md.state_dim() {
        return Err(Error::dims("state layout", md.state_dim(), f.input_dim()));
    }
    Ok(())
}

/// `(Gamma_p, Gamma_s)` with row `j` holding the derivatives of
/// `gamma(omega_j)` in the prices and shares of every inside good.
pub fn gamma_jacobians(
    gamma: &dyn StructuralFunction,
    md: &MarketData,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_layout(md, gamma)?;
    let nj = md.num_products();
    let mut gp = DMatrix::zeros(nj, nj);
    let mut gs = DMatrix::zeros(nj, nj);
    for j in 1..=nj {
        let (dp, ds) = chain_rows(j, nj, &gamma.gradient(&md.omegas[j - 1]));
        gp.row_mut(j - 1).copy_from_slice(&dp);
        gs.row_mut(j - 1).copy_from_slice(&ds);
    }
    Ok((gp, gs))
}

/// Quantities of the implicit-function solve at one market.
struct Ift {
    ainv: DMatrix<f64>,
    /// `A^{-1} Gamma_p`, i.e. `ds/dp`.
    ds_dp: DMatrix<f64>,
}

fn implicit_function(md: &MarketData, gamma: &dyn StructuralFunction) -> Result<Ift> {
    let l = log_share_jacobian(&md.market.shares)?;
    let (gp, gs) = gamma_jacobians(gamma, md)?;
    let a = l - gs;
    let sv = a.singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularShareJacobian {
            market: md.market.id,
            condition,
        });
    }
    let ainv = a
        .try_inverse()
        .ok_or(Error::SingularShareJacobian {
            market: md.market.id,
            condition,
        })?;
    let ds_dp = &ainv * gp;
    Ok(Ift { ainv, ds_dp })
}

/// `eps_jk = (p_k / s_j) [ (L - Gamma_s)^{-1} Gamma_p ]_jk`.
pub fn elasticity_matrix(md: &MarketData, gamma: &dyn StructuralFunction) -> Result<DMatrix<f64>> {
    let ift = implicit_function(md, gamma)?;
    let m = &md.market;
    Ok(DMatrix::from_fn(m.num_products(), m.num_products(), |a, b| {
        m.prices[b] / m.shares[a + 1] * ift.ds_dp[(a, b)]
    }))
}

fn check_product(md: &MarketData, j: usize) -> Result<()> {
    if j == 0 || j > md.num_products() {
        return Err(Error::InvalidArgument(format!(
            "product {j} outside 1..={}",
            md.num_products()
        )));
    }
    Ok(())
}

/// `(p_j/s_j) [ (A^{-1} Z_p)_jj + (A^{-1} Z_s A^{-1} Gamma_p)_jj ]`.
fn directional(md: &MarketData, ift: &Ift, j: usize, zp: &DMatrix<f64>, zs: &DMatrix<f64>) -> f64 {
    let r = j - 1;
    let row = ift.ainv.row(r);
    let direct = (row * zp.column(r))[(0, 0)];
    let feedback = (row * zs * ift.ds_dp.column(r))[(0, 0)];
    md.market.prices[r] / md.market.shares[j] * (direct + feedback)
}

/// Gateaux derivative of `eps_jj` at `gamma` in direction `zeta`.
pub fn elasticity_gateaux(
    md: &MarketData,
    gamma: &dyn StructuralFunction,
    zeta: &dyn StructuralFunction,
    j: usize,
) -> Result<f64> {
    check_product(md, j)?;
    check_layout(md, zeta)?;
    let ift = implicit_function(md, gamma)?;
    let (zp, zs) = gamma_jacobians(zeta, md)?;
    Ok(directional(md, &ift, j, &zp, &zs))
}

/// Gateaux derivatives of `eps_jj` in the direction of each dictionary element.
pub fn elasticity_gateaux_dictionary(
    md: &MarketData,
    gamma: &dyn StructuralFunction,
    dict: &Dictionary,
    j: usize,
) -> Result<Vec<f64>> {
    check_product(md, j)?;
    if dict.input_dim() != md.state_dim() {
        return Err(Error::dims("state layout", md.state_dim(), dict.input_dim()));
    }
    let ift = implicit_function(md, gamma)?;
    let nj = md.num_products();
    let size = dict.size();
    let mut zp = vec![DMatrix::zeros(nj, nj); size];
    let mut zs = vec![DMatrix::zeros(nj, nj); size];
    for jj in 1..=nj {
        let jac = dict.jacobian(&md.omegas[jj - 1])?;
        for (k, grad) in jac.iter().enumerate() {
            let (dp, ds) = chain_rows(jj, nj, grad);
            zp[k].row_mut(jj - 1).copy_from_slice(&dp);
            zs[k].row_mut(jj - 1).copy_from_slice(&ds);
        }
    }
    Ok((0..size)
        .map(|k| directional(md, &ift, j, &zp[k], &zs[k]))
        .collect())
}

/// `beta_p p (1 - s)`.
pub fn logit_elasticity_oracle(beta_p: f64, price: f64, share: f64) -> Result<f64> {
    if !(share > 0.0 && share < 1.0) {
        return Err(Error::InvalidShares(format!("share {share} outside (0, 1)")));
    }
    Ok(beta_p * price * (1.0 - share))
}

/// Own-price elasticity of one product, averaged over markets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OwnPriceElasticity {
    pub product: usize,
}

impl FunctionalSpec for OwnPriceElasticity {
    type Obs = MarketData;

    fn is_linear(&self) -> bool {
        false
    }

    fn eval(&self, md: &MarketData, gamma: &dyn StructuralFunction) -> Result<f64> {
        check_product(md, self.product)?;
        let r = self.product - 1;
        Ok(elasticity_matrix(md, gamma)?[(r, r)])
    }

    fn gateaux(
        &self,
        md: &MarketData,
        gamma: Option<&dyn StructuralFunction>,
        direction: &dyn StructuralFunction,
    ) -> Result<f64> {
        let gamma = gamma.ok_or_else(|| {
            Error::InvalidArgument("elasticity derivative needs a fitted gamma".into())
        })?;
        elasticity_gateaux(md, gamma, direction, self.product)
    }

    fn gateaux_dictionary(
        &self,
        md: &MarketData,
        gamma: Option<&dyn StructuralFunction>,
        dict: &Dictionary,
    ) -> Result<Vec<f64>> {
        let gamma = gamma.ok_or_else(|| {
            Error::InvalidArgument("elasticity derivative needs a fitted gamma".into())
        })?;
        elasticity_gateaux_dictionary(md, gamma, dict, self.product)
    }
}

#[cfg(test)]
mod tests;
