//! Coordinate-wise descent for l1-penalized quadratics
//! `constant - 2 c'rho + rho' H rho + 2 sum_j t_j |rho_j|`.
//!
//! Both the PGMM objective and the lasso least-squares objective reduce to this
//! form, so the two share the same sweeps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::{Algorithm, SolverConfig};

/// Inner active-set sweeps between polish attempts.
const POLISH_INTERVAL: usize = 10;

/// Soft-thresholding operator `sign(z) * max(|z| - tau, 0)`.
#[inline]
pub fn soft_threshold(z: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if z > tau {
        z - tau
    } else if z < -tau {
        z + tau
    } else {
        0.0
    }
}

/// Penalized quadratic in canonical form. `thresholds[j]` is the effective
/// per-coordinate penalty `w_j * lambda` and may be zero for unpenalized terms.
#[derive(Debug, Clone)]
pub(crate) struct Quadratic {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub constant: f64,
    pub thresholds: Vec<f64>,
}

/// Raw solver output before it is wrapped with problem metadata.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub rho: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub outer_iters: usize,
    pub frozen: Vec<usize>,
    /// Largest coordinate change of the final cycle.
    pub last_change: f64,
    pub converged: bool,
}

impl Solution {
    /// Turns an exhausted sweep budget into an error.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                sweeps: self.sweeps,
                max_change: self.last_change,
            })
        }
    }
}

impl Quadratic {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, rho: &DVector<f64>) -> f64 {
        let hr = &self.h * rho;
        let penalty: f64 = rho
            .iter()
            .zip(&self.thresholds)
            .map(|(r, t)| t * r.abs())
            .sum();
        self.constant - 2.0 * self.c.dot(rho) + rho.dot(&hr) + 2.0 * penalty
    }

    fn objective_on(&self, rho: &DVector<f64>, support: &[usize]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut pen = 0.0;
        for &j in support {
            let rj = rho[j];
            if rj == 0.0 {
                continue;
            }
            lin += self.c[j] * rj;
            pen += self.thresholds[j] * rj.abs();
            for &k in support {
                quad += rj * self.h[(j, k)] * rho[k];
            }
        }
        self.constant - 2.0 * lin + quad + 2.0 * pen
    }

    /// Gradient of the smooth part, up to the factor 2: `r = c - H rho`.
    pub fn residual(&self, rho: &DVector<f64>) -> DVector<f64> {
        &self.c - &self.h * rho
    }

    /// Coordinates whose curvature is numerically zero; they stay at zero.
    fn degenerate(&self) -> Vec<bool> {
        let max_b = (0..self.dim())
            .map(|j| self.h[(j, j)].abs())
            .fold(0.0_f64, f64::max);
        (0..self.dim())
            .map(|j| {
                let b = self.h[(j, j)];
                !(b > 1e-14 * max_b) || !b.is_finite()
            })
            .collect()
    }

    /// One coordinate update. `support` lists the coordinates that may be
    /// nonzero; all others are known to be zero.
    #[inline]
    fn update(&self, rho: &mut DVector<f64>, j: usize, support: Option<&[usize]>) -> f64 {
        let mut partial = 0.0;
        match support {
            Some(s) => {
                for &k in s {
                    if k != j {
                        partial += self.h[(j, k)] * rho[k];
                    }
                }
            }
            None => {
                for k in 0..self.dim() {
                    if k != j {
                        partial += self.h[(j, k)] * rho[k];
                    }
                }
            }
        }
        let a = self.c[j] - partial;
        let b = self.h[(j, j)];
        let old = rho[j];
        rho[j] = soft_threshold(a / b, self.thresholds[j] / b);
        (rho[j] - old).abs()
    }

    fn full_sweep(&self, rho: &mut DVector<f64>, frozen: &[bool]) -> f64 {
        let mut max_change = 0.0_f64;
        for j in 0..self.dim() {
            if frozen[j] {
                rho[j] = 0.0;
                continue;
            }
            max_change = max_change.max(self.update(rho, j, None));
        }
        max_change
    }

    pub fn solve(&self, config: &SolverConfig, init: Option<&DVector<f64>>) -> Result<Solution> {
        match config.algorithm {
            Algorithm::CoordinateDescent => self.solve_cd(config, init),
            Algorithm::ActiveSet => self.solve_active_set(config, init),
        }
    }

    pub fn solve_cd(&self, config: &SolverConfig, init: Option<&DVector<f64>>) -> Result<Solution> {
        let p = self.dim();
        let frozen_mask = self.degenerate();
        let mut rho = initial(p, init)?;
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let (change, converged) = loop {
            let change = self.full_sweep(&mut rho, &frozen_mask);
            sweeps += 1;
            trace.push(self.objective(&rho));
            if change < config.tol {
                break (change, true);
            }
            if sweeps >= config.max_sweeps {
                break (change, false);
            }
        };
        Ok(Solution {
            rho,
            objective_trace: trace,
            sweeps,
            outer_iters: 0,
            frozen: mask_indices(&frozen_mask),
            last_change: change,
            converged,
        })
    }

    /// Moves the non-zero coordinates of `rho` towards the solution `x` of
    /// `H_SS x = c_S - t_S sign(rho_S)` on the support `S`, stopping where the
    /// first coordinate changes sign (that coordinate is set to zero). With
    /// signs fixed the objective is a convex quadratic along the segment, so
    /// the step never increases it; the check below guards rounding.
    /// Returns whether the step was taken and, if so, whether a sign change
    /// blocked it.
    fn polish(&self, rho: &mut DVector<f64>, active: &[usize]) -> Option<bool> {
        let support: Vec<usize> = active.iter().copied().filter(|&j| rho[j] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let k = support.len();
        let h = DMatrix::from_fn(k, k, |a, b| self.h[(support[a], support[b])]);
        let rhs = DVector::from_fn(k, |a, _| {
            let j = support[a];
            self.c[j] - self.thresholds[j] * rho[j].signum()
        });
        let x = h.cholesky()?.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut step = 1.0;
        let mut crossing = None;
        for (a, &j) in support.iter().enumerate() {
            let (from, to) = (rho[j], x[a]);
            if to.signum() != from.signum() || to == 0.0 {
                let t = from / (from - to);
                if t < step {
                    step = t;
                    crossing = Some(j);
                }
            }
        }
        let mut candidate = rho.clone();
        for (a, &j) in support.iter().enumerate() {
            candidate[j] = rho[j] + step * (x[a] - rho[j]);
        }
        if let Some(j) = crossing {
            candidate[j] = 0.0;
        }
        if self.objective_on(&candidate, active) <= self.objective_on(rho, active) {
            *rho = candidate;
            Some(crossing.is_some())
        } else {
            None
        }
    }

    pub fn solve_active_set(
        &self,
        config: &SolverConfig,
        init: Option<&DVector<f64>>,
    ) -> Result<Solution> {
        let p = self.dim();
        let frozen_mask = self.degenerate();
        let max_outer = config.max_outer.unwrap_or(p).max(1);
        let mut rho = initial(p, init)?;
        let mut trace = Vec::new();

        let change = self.full_sweep(&mut rho, &frozen_mask);
        let mut sweeps = 1;
        trace.push(self.objective(&rho));

        let mut in_active = vec![false; p];
        let mut active: Vec<usize> = Vec::new();
        for j in 0..p {
            if rho[j] != 0.0 {
                in_active[j] = true;
                active.push(j);
            }
        }

        let mut outer = 0;
        let mut inner_change = change;
        loop {
            // inner loop over the active set
            if !active.is_empty() {
                loop {
                    let mut max_change = 0.0_f64;
                    for &j in &active {
                        max_change = max_change.max(self.update(&mut rho, j, Some(&active)));
                    }
                    sweeps += 1;
                    trace.push(self.objective_on(&rho, &active));
                    inner_change = max_change;
                    if max_change < config.tol {
                        break;
                    }
                    if config.polish && sweeps % POLISH_INTERVAL == 0 {
                        // each blocked step drops one coordinate from the support
                        for _ in 0..active.len() {
                            let Some(blocked) = self.polish(&mut rho, &active) else {
                                break;
                            };
                            trace.push(self.objective_on(&rho, &active));
                            if !blocked {
                                break;
                            }
                        }
                    }
                    if sweeps >= config.max_sweeps {
                        return Ok(Solution {
                            rho,
                            objective_trace: trace,
                            sweeps,
                            outer_iters: outer,
                            frozen: mask_indices(&frozen_mask),
                            last_change: max_change,
                            converged: false,
                        });
                    }
                }
            }

            // KKT check on the inactive coordinates
            let mut violators = Vec::new();
            for j in 0..p {
                if in_active[j] || frozen_mask[j] {
                    continue;
                }
                let mut r = self.c[j];
                for &k in &active {
                    r -= self.h[(j, k)] * rho[k];
                }
                if r.abs() > self.thresholds[j] {
                    violators.push(j);
                }
            }
            if violators.is_empty() {
                break;
            }
            outer += 1;
            if outer > max_outer {
                return Ok(Solution {
                    rho,
                    objective_trace: trace,
                    sweeps,
                    outer_iters: outer,
                    frozen: mask_indices(&frozen_mask),
                    last_change: inner_change,
                    converged: false,
                });
            }
            for j in violators {
                in_active[j] = true;
                active.push(j);
            }
            active.sort_unstable();
        }

        Ok(Solution {
            rho,
            objective_trace: trace,
            sweeps,
            outer_iters: outer,
            frozen: mask_indices(&frozen_mask),
            last_change: inner_change,
            converged: true,
        })
    }
}

fn initial(p: usize, init: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match init {
        Some(v) if v.len() != p => Err(Error::dims("initial coefficients", p, v.len())),
        Some(v) => Ok(v.clone()),
        None => Ok(DVector::zeros(p)),
    }
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(j, &m)| m.then_some(j))
        .collect()
}
