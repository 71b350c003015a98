//! Least-squares lasso `(1/2n)||y - F b||^2 + alpha ||b_{-0}||_1` with an
//! unpenalized intercept column, solved by the PGMM coordinate descent
//! (`H = F'F/n`, `c = F'y/n`, thresholds `alpha`).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pgmm::solver::Quadratic;
use crate::pgmm::SolverConfig;

/// Sufficient statistics of a regression sample.
#[derive(Debug, Clone)]
pub struct Gram {
    h: DMatrix<f64>,
    c: DVector<f64>,
    yy: f64,
}

impl Gram {
    pub fn new(f: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let n = f.nrows();
        if n == 0 {
            return Err(Error::Empty("regression sample"));
        }
        if y.len() != n {
            return Err(Error::dims("regression outcome", n, y.len()));
        }
        let nf = n as f64;
        let h = f.transpose() * f / nf;
        let c = f.tr_mul(y) / nf;
        Ok(Self {
            h,
            c,
            yy: y.norm_squared() / nf,
        })
    }

    /// Same design, new outcome.
    pub fn with_outcome(&self, f: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let n = f.nrows();
        if y.len() != n {
            return Err(Error::dims("regression outcome", n, y.len()));
        }
        let nf = n as f64;
        Ok(Self {
            h: self.h.clone(),
            c: f.tr_mul(y) / nf,
            yy: y.norm_squared() / nf,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    fn quadratic(&self, alpha: f64) -> Quadratic {
        let mut thresholds = vec![alpha; self.dim()];
        thresholds[0] = 0.0;
        Quadratic {
            h: self.h.clone(),
            c: self.c.clone(),
            constant: self.yy,
            thresholds,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoFit {
    #[serde(serialize_with = "crate::io::serialize_dvector")]
    pub coef: DVector<f64>,
    pub alpha: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Column 0 of the design is treated as the unpenalized intercept.
pub fn lasso_gram(
    gram: &Gram,
    alpha: f64,
    solver: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<LassoFit> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("lasso penalty {alpha} is negative")));
    }
    let sol = gram.quadratic(alpha).solve(solver, init)?;
    Ok(LassoFit {
        coef: sol.rho,
        alpha,
        sweeps: sol.sweeps,
        converged: sol.converged,
    })
}

pub fn lasso(
    f: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    solver: &SolverConfig,
) -> Result<LassoFit> {
    lasso_gram(&Gram::new(f, y)?, alpha, solver, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoCvFit {
    pub fit: LassoFit,
    pub grid: Vec<f64>,
    /// Mean held-out squared error per grid value; `None` if non-finite.
    pub cv_error: Vec<Option<f64>>,
    pub selected_index: usize,
}

/// `num` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, num: usize) -> Vec<f64> {
    if num == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..num)
        .map(|i| (a + (b - a) * i as f64 / (num - 1) as f64).exp())
        .collect()
}

/// K-fold cross-validated lasso over `grid` with contiguous, unshuffled folds.
///
/// Each training split solves the whole path from the largest penalty down
/// with warm starts. Ties in the CV error go to the larger penalty.
pub fn lasso_cv(
    f: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    num_folds: usize,
    solver: &SolverConfig,
) -> Result<LassoCvFit> {
    let n = f.nrows();
    if grid.is_empty() {
        return Err(Error::Empty("lasso penalty grid"));
    }
    if num_folds < 2 || num_folds > n {
        return Err(Error::InvalidArgument(format!(
            "{num_folds} CV folds for {n} observations"
        )));
    }
    if y.len() != n {
        return Err(Error::dims("regression outcome", n, y.len()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut sse = vec![0.0; grid.len()];
    for k in 0..num_folds {
        let lo = k * n / num_folds;
        let hi = (k + 1) * n / num_folds;
        let train: Vec<usize> = (0..lo).chain(hi..n).collect();
        let test: Vec<usize> = (lo..hi).collect();
        let gram = Gram::new(&f.select_rows(&train), &y.select_rows(&train))?;
        let ft = f.select_rows(&test);
        let yt = y.select_rows(&test);
        let mut warm: Option<DVector<f64>> = None;
        for &g in &order {
            let fit = lasso_gram(&gram, grid[g], solver, warm.as_ref())?;
            let resid = &yt - &ft * &fit.coef;
            sse[g] += resid.norm_squared();
            warm = Some(fit.coef);
        }
    }
    let cv_error: Vec<Option<f64>> = sse
        .iter()
        .map(|&s| {
            let v = s / n as f64;
            v.is_finite().then_some(v)
        })
        .collect();

    let mut selected = None;
    for &g in &order {
        if let Some(v) = cv_error[g] {
            if selected.is_none_or(|(_, b)| v < b) {
                selected = Some((g, v));
            }
        }
    }
    let (selected_index, _) =
        selected.ok_or_else(|| Error::InvalidArgument("lasso CV produced no finite error".into()))?;

    let gram = Gram::new(f, y)?;
    let mut warm: Option<DVector<f64>> = None;
    let mut fit = None;
    for &g in &order {
        let f = lasso_gram(&gram, grid[g], solver, warm.as_ref())?;
        let done = g == selected_index;
        warm = Some(f.coef.clone());
        if done {
            fit = Some(f);
            break;
        }
    }
    Ok(LassoCvFit {
        fit: fit.expect("selected index lies on the path"),
        grid: grid.to_vec(),
        cv_error,
        selected_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let f = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => (i as f64 * 0.37).sin(),
            _ => (i as f64 * 0.11).cos(),
        });
        let y = DVector::from_fn(n, |i, _| 0.5 + 2.0 * f[(i, 1)] - f[(i, 2)]);
        (f, y)
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let (f, y) = design(60);
        let tight = SolverConfig {
            tol: 1e-13,
            max_sweeps: 1_000_000,
            ..SolverConfig::default()
        };
        let fit = lasso(&f, &y, 0.0, &tight).unwrap();
        let ols = (f.tr_mul(&f)).cholesky().unwrap().solve(&f.tr_mul(&y));
        assert!((fit.coef - ols).amax() < 1e-9);
    }

    #[test]
    fn intercept_is_unpenalized() {
        let (f, _) = design(40);
        let y = DVector::from_element(40, 3.0);
        let fit = lasso(&f, &y, 10.0, &SolverConfig::default()).unwrap();
        assert!((fit.coef[0] - 3.0).abs() < 1e-12);
        assert_eq!(fit.coef[1], 0.0);
        assert_eq!(fit.coef[2], 0.0);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-7, 1e-1, 100);
        assert_eq!(g.len(), 100);
        assert!((g[0] - 1e-7).abs() < 1e-20);
        assert!((g[99] - 1e-1).abs() < 1e-14);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn cv_prefers_small_penalty_on_noiseless_data() {
        let (f, y) = design(90);
        let grid = log_grid(1e-6, 1.0, 13);
        let cv = lasso_cv(&f, &y, &grid, 3, &SolverConfig::default()).unwrap();
        assert!(cv.fit.alpha <= 1e-4, "selected {}", cv.fit.alpha);
        assert!((cv.fit.coef[1] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn cv_rejects_bad_folds() {
        let (f, y) = design(10);
        assert!(lasso_cv(&f, &y, &[0.1], 1, &SolverConfig::default()).is_err());
        assert!(lasso_cv(&f, &y, &[], 3, &SolverConfig::default()).is_err());
    }
}
