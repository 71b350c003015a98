//! Two-stage kernel ridge instrumental variable regression with Gaussian
//! kernels.
//!
//! Stage 1 estimates the conditional mean embedding of the X-feature map given
//! Z on the first split; stage 2 ridge-regresses Y on the embedded features of
//! the second split. Stage 2 is solved in the span of the embeddings, which
//! only needs the Gram matrix `w' K_XX w` and keeps every linear solve
//! ridge-regularized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subsample cap for the median heuristic.
pub const MEDIAN_HEURISTIC_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KivConfig {
    pub bandwidth_scale: f64,
    /// Stage-1 ridge; the regularizer is `ridge1 * n1`.
    pub ridge1: f64,
    /// Stage-2 ridge; the regularizer is `ridge2 * n2`.
    pub ridge2: f64,
    pub split_fraction: f64,
    /// When set, both ridges are chosen from this grid by the out-of-stage
    /// losses of the two-stage procedure.
    pub ridge_grid: Option<Vec<f64>>,
}

impl Default for KivConfig {
    fn default() -> Self {
        Self {
            bandwidth_scale: 25.0,
            ridge1: 1e-3,
            ridge2: 1e-3,
            split_fraction: 0.5,
            ridge_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelIvFit {
    /// Stage-1 inputs `x_a`, one per row.
    #[serde(skip)]
    pub(crate) centers: DMatrix<f64>,
    #[serde(skip)]
    pub(crate) alpha: DVector<f64>,
    pub sigma_x: f64,
    pub sigma_z: f64,
    pub ridge1: f64,
    pub ridge2: f64,
    pub n1: usize,
    pub n2: usize,
}

impl KernelIvFit {
    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.sigma_x * self.sigma_x);
        let mut total = 0.0;
        for (a, row) in self.centers.row_iter().enumerate() {
            let d2: f64 = row.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
            total += self.alpha[a] * (-d2 * inv).exp();
        }
        total
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.sigma_x * self.sigma_x;
        let inv = 1.0 / (2.0 * s2);
        let mut g = vec![0.0; x.len()];
        for (a, row) in self.centers.row_iter().enumerate() {
            let d2: f64 = row.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
            let w = self.alpha[a] * (-d2 * inv).exp() / s2;
            for (gc, (c, v)) in g.iter_mut().zip(row.iter().zip(x)) {
                *gc += w * (c - v);
            }
        }
        g
    }
}

/// Median pairwise Euclidean distance times `scale`. Inputs with more than
/// the cap of rows are subsampled at a fixed stride. If the median is zero
/// but some points differ, the median over the positive distances is used.
pub fn median_heuristic(points: &DMatrix<f64>, scale: f64) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least two points".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth scale {scale}")));
    }
    let rows: Vec<usize> = if n > MEDIAN_HEURISTIC_CAP {
        (0..MEDIAN_HEURISTIC_CAP)
            .map(|i| i * n / MEDIAN_HEURISTIC_CAP)
            .collect()
    } else {
        (0..n).collect()
    };
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            d.push((points.row(i) - points.row(j)).norm());
        }
    }
    let mut med = median(&mut d);
    if med == 0.0 {
        let mut pos: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
        if pos.is_empty() {
            return Err(Error::DegenerateBandwidth);
        }
        med = median(&mut pos);
    }
    Ok(med * scale)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn gaussian_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let d2: f64 = a
            .row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (-d2 * inv).exp()
    })
}

/// Row block of the blocked triangular solves.
const BLOCK: usize = 128;

/// `(K + reg I)^{-1} rhs` by Cholesky, with blocked substitution so that the
/// bulk of the work runs as matrix products.
fn ridge_solve(k: &DMatrix<f64>, reg: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += reg;
    }
    let l = a
        .cholesky()
        .ok_or(Error::Singular("kernel ridge system"))?
        .unpack();
    let n = l.nrows();
    let mut x = rhs.clone();
    let singular = || Error::Singular("kernel ridge system");

    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let b = end - start;
        let xk = l
            .view((start, start), (b, b))
            .solve_lower_triangular(&x.rows(start, b))
            .ok_or_else(singular)?;
        if end < n {
            let update = l.view((end, start), (n - end, b)) * &xk;
            let mut rest = x.rows_mut(end, n - end);
            rest -= update;
        }
        x.rows_mut(start, b).copy_from(&xk);
        start = end;
    }

    let mut end = n;
    while end > 0 {
        let start = end.saturating_sub(BLOCK);
        let b = end - start;
        let yk = l
            .view((start, start), (b, b))
            .transpose()
            .solve_upper_triangular(&x.rows(start, b))
            .ok_or_else(singular)?;
        if start > 0 {
            let update = l.view((start, 0), (b, start)).transpose() * &yk;
            let mut rest = x.rows_mut(0, start);
            rest -= update;
        }
        x.rows_mut(start, b).copy_from(&yk);
        end = start;
    }
    Ok(x)
}

struct Kernels {
    k_xx: DMatrix<f64>,
    k_zz: DMatrix<f64>,
    k_z12: DMatrix<f64>,
    y2: DVector<f64>,
}

fn stage_weights(k: &Kernels, n1: usize, ridge1: f64) -> Result<DMatrix<f64>> {
    ridge_solve(&k.k_zz, ridge1 * n1 as f64, &k.k_z12)
}

fn stage_two(k: &Kernels, w: &DMatrix<f64>, ridge2: f64) -> Result<DVector<f64>> {
    let m = w.ncols();
    let q = w.transpose() * (&k.k_xx * w);
    let q = (&q + q.transpose()) * 0.5;
    let beta = ridge_solve(&q, ridge2 * m as f64, &DMatrix::from_column_slice(m, 1, k.y2.as_slice()))?;
    Ok(w * beta.column(0))
}

pub fn fit_kernel_iv(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    config: &KivConfig,
) -> Result<KernelIvFit> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::dims("KIV regressors", n, x.nrows()));
    }
    if z.nrows() != n {
        return Err(Error::dims("KIV instruments", n, z.nrows()));
    }
    if n < 20 {
        return Err(Error::InvalidArgument(format!(
            "kernel IV needs at least 20 observations, got {n}"
        )));
    }
    if !(config.split_fraction > 0.0 && config.split_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {} outside (0, 1)",
            config.split_fraction
        )));
    }
    let n1 = ((n as f64 * config.split_fraction).floor() as usize).clamp(1, n - 1);
    let n2 = n - n1;
    let sigma_x = median_heuristic(x, config.bandwidth_scale)?;
    let sigma_z = median_heuristic(z, config.bandwidth_scale)?;

    let s1: Vec<usize> = (0..n1).collect();
    let s2: Vec<usize> = (n1..n).collect();
    let x1 = x.select_rows(&s1);
    let z1 = z.select_rows(&s1);
    let z2 = z.select_rows(&s2);
    let kernels = Kernels {
        k_xx: gaussian_gram(&x1, &x1, sigma_x),
        k_zz: gaussian_gram(&z1, &z1, sigma_z),
        k_z12: gaussian_gram(&z1, &z2, sigma_z),
        y2: y.select_rows(&s2),
    };

    let (ridge1, ridge2) = match &config.ridge_grid {
        None => (config.ridge1, config.ridge2),
        Some(grid) => tune_ridges(&kernels, x, y, &s1, &s2, sigma_x, grid)?,
    };
    if !(ridge1 > 0.0 && ridge2 > 0.0) {
        return Err(Error::InvalidArgument("KIV ridges must be positive".into()));
    }
    let w = stage_weights(&kernels, n1, ridge1)?;
    let alpha = stage_two(&kernels, &w, ridge2)?;
    Ok(KernelIvFit {
        centers: x1,
        alpha,
        sigma_x,
        sigma_z,
        ridge1,
        ridge2,
        n1,
        n2,
    })
}

/// Stage-1 ridge by the held-out embedding loss on the second split, then
/// stage-2 ridge by the outcome loss on the first split.
fn tune_ridges(
    k: &Kernels,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    s1: &[usize],
    s2: &[usize],
    sigma_x: f64,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument("KIV ridge grid must be positive and nonempty".into()));
    }
    let n1 = s1.len();
    let x1 = x.select_rows(s1);
    let x2 = x.select_rows(s2);
    let k_x12 = gaussian_gram(&x1, &x2, sigma_x);

    let mut best1 = (f64::INFINITY, grid[0]);
    for &r in grid {
        let w = stage_weights(k, n1, r)?;
        // mean over the second split of ||phi(x2_i) - mu(z2_i)||^2, up to the constant K(x, x) = 1
        let kw = &k.k_xx * &w;
        let mut loss = 0.0;
        for i in 0..w.ncols() {
            loss += -2.0 * k_x12.column(i).dot(&w.column(i)) + w.column(i).dot(&kw.column(i));
        }
        if loss < best1.0 {
            best1 = (loss, r);
        }
    }
    let ridge1 = best1.1;
    let w = stage_weights(k, n1, ridge1)?;
    let w11 = ridge_solve(&k.k_zz, ridge1 * n1 as f64, &k.k_zz)?;
    let y1 = y.select_rows(s1);
    let mut best2 = (f64::INFINITY, grid[0]);
    for &r in grid {
        let alpha = stage_two(k, &w, r)?;
        let pred = w11.transpose() * (&k.k_xx * &alpha);
        let loss = (&y1 - pred).norm_squared();
        if loss < best2.0 {
            best2 = (loss, r);
        }
    }
    Ok((ridge1, best2.1))
}
