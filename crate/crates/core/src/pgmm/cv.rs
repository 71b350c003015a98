use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::folds::FoldPlan;

use super::estimate::{estimate_riesz, MomentData, RieszConfig, VARIANCE_FLOOR};

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub selected_index: usize,
    pub selected_c1: f64,
    /// Held-out criterion per candidate; `None` when a fold failed.
    pub curve: Vec<Option<f64>>,
    pub failures: Vec<(usize, String)>,
}

/// K-fold selection of the penalty multiplier `c1`.
///
/// Each candidate is fit on every leave-fold-out sample (so `lambda` uses the
/// training size) and scored by the held-out GMM objective, summed over
/// folds. The held-out weight is the diagonal weight estimated on the held-out
/// fold at the training solution; moments with degenerate held-out variance
/// get weight 1. Ties go to the smallest index.
pub fn cross_validate_c1(
    data: &MomentData,
    folds: &FoldPlan,
    grid: &[f64],
    config: &RieszConfig,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Empty("c1 grid"));
    }
    if folds.n() != data.n() {
        return Err(Error::dims("fold plan", data.n(), folds.n()));
    }
    if let Some(bad) = grid.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::InvalidArgument(format!("c1 candidate {bad} is not positive")));
    }
    let splits: Vec<(MomentData, MomentData)> = (0..folds.num_folds())
        .map(|k| Ok((data.subset(&folds.complement(k))?, data.subset(folds.fold(k))?)))
        .collect::<Result<_>>()?;

    let scores: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&c1| {
            let mut cfg = config.clone();
            cfg.penalty.c1 = c1;
            cfg.penalty.lambda = None;
            let mut total = 0.0;
            for (k, (train, test)) in splits.iter().enumerate() {
                let fit = estimate_riesz(train, &cfg).map_err(|e| e.in_fold(k))?;
                total += held_out_objective(test, fit.rho())?;
            }
            Ok(total)
        })
        .collect();

    let mut curve = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut first_error = None;
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(v) if v.is_finite() => {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((i, v));
                }
                curve.push(Some(v));
            }
            Ok(v) => {
                failures.push((i, format!("non-finite criterion {v}")));
                curve.push(None);
            }
            Err(e) => {
                failures.push((i, e.to_string()));
                first_error.get_or_insert(e);
                curve.push(None);
            }
        }
    }
    match best {
        Some((i, _)) => Ok(CvReport {
            selected_index: i,
            selected_c1: grid[i],
            curve,
            failures,
        }),
        None => Err(first_error.unwrap_or(Error::InvalidArgument(
            "no c1 candidate produced a finite criterion".into(),
        ))),
    }
}

fn held_out_objective(test: &MomentData, rho: &DVector<f64>) -> Result<f64> {
    let psi = test.psi(rho)?;
    let n = psi.nrows() as f64;
    let q = psi.ncols();
    let mut total = 0.0;
    for col in psi.column_iter() {
        let mean = col.sum() / n;
        let s2 = col.iter().map(|v| v * v).sum::<f64>() / n;
        let w = if s2 >= VARIANCE_FLOOR { 1.0 / s2 } else { 1.0 };
        total += w * mean * mean;
    }
    Ok(total / q as f64)
}
