use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{solve, MomentSystem, PenaltyConfig, RieszFit, SolverConfig, Weight};

/// Floor on `|rho_j|` when forming adaptive weights.
pub const ADAPTIVE_WEIGHT_FLOOR: f64 = 1e-8;

/// Second moments below this value make a moment degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-observation ingredients of a moment system.
///
/// Row `i` of `m` holds `m(W_i, d_j)` (or its Gateaux analogue), row `i` of
/// `d` holds `d(X_i)` and row `i` of `b` holds `b(Z_i)`. Then
/// `G = mean d_i b_i'` and `M = mean m_i`.
#[derive(Debug, Clone)]
pub struct MomentData {
    m: DMatrix<f64>,
    d: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl MomentData {
    pub fn new(m: DMatrix<f64>, d: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Err(Error::Empty("moment data"));
        }
        if d.nrows() != n {
            return Err(Error::dims("d rows", n, d.nrows()));
        }
        if b.nrows() != n {
            return Err(Error::dims("b rows", n, b.nrows()));
        }
        if d.ncols() != m.ncols() {
            return Err(Error::dims("d columns", m.ncols(), d.ncols()));
        }
        if b.ncols() == 0 {
            return Err(Error::Empty("instrument dictionary"));
        }
        Ok(Self { m, d, b })
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn q(&self) -> usize {
        self.m.ncols()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("moment data subset"));
        }
        Self::new(
            self.m.select_rows(rows),
            self.d.select_rows(rows),
            self.b.select_rows(rows),
        )
    }

    pub fn g_hat(&self) -> DMatrix<f64> {
        self.d.transpose() * &self.b / self.n() as f64
    }

    pub fn m_hat(&self) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_iterator(self.q(), self.m.column_iter().map(|c| c.sum() / n))
    }

    pub fn system(&self, omega: Weight) -> Result<MomentSystem> {
        Ok(MomentSystem::new(self.g_hat(), self.m_hat(), omega)?.with_n_obs(self.n()))
    }

    /// `psi_ij = m_ij - d_ij b_i' rho`.
    pub fn psi(&self, rho: &DVector<f64>) -> Result<DMatrix<f64>> {
        if rho.len() != self.p() {
            return Err(Error::dims("rho", self.p(), rho.len()));
        }
        let alpha = &self.b * rho;
        let mut psi = self.m.clone();
        for i in 0..self.n() {
            for j in 0..self.q() {
                psi[(i, j)] -= self.d[(i, j)] * alpha[i];
            }
        }
        Ok(psi)
    }

    /// `alpha(Z_i) = b(Z_i)' rho` for every row.
    pub fn riesz_values(&self, rho: &DVector<f64>) -> DVector<f64> {
        &self.b * rho
    }
}

/// `Omega^d = diag(1 / sigma_j^2)` with uncentered `sigma_j^2 = mean_i psi_ij^2`.
pub fn diagonal_weights(psi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = psi.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "diagonal weights need at least two observations".into(),
        ));
    }
    let mut w = DVector::zeros(psi.ncols());
    for (j, col) in psi.column_iter().enumerate() {
        let s2 = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if !(s2 >= VARIANCE_FLOOR) {
            return Err(Error::DegenerateMoment {
                index: j,
                value: s2,
            });
        }
        w[j] = 1.0 / s2;
    }
    Ok(w)
}

/// `1 / max(|rho_j|, floor)`.
pub fn adaptive_weights(pilot: &DVector<f64>) -> Vec<f64> {
    pilot
        .iter()
        .map(|r| 1.0 / r.abs().max(ADAPTIVE_WEIGHT_FLOOR))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoStageFit {
    pub stage1: RieszFit,
    pub fit: RieszFit,
    #[serde(serialize_with = "crate::io::serialize_opt_dvector")]
    pub omega: Option<DVector<f64>>,
    /// Set when the stage-2 weights could not be formed and stage 1 is returned.
    pub fallback: Option<String>,
}

/// Identity-weighted fit, then a refit under the diagonal weights implied by
/// its residual moments, started from the stage-1 solution.
pub fn two_stage_solve(
    data: &MomentData,
    penalty: &PenaltyConfig,
    config: &SolverConfig,
) -> Result<TwoStageFit> {
    let stage1 = solve(&data.system(Weight::Identity)?, penalty, config, None)?;
    match diagonal_weights(&data.psi(&stage1.rho)?) {
        Ok(omega) => {
            let system = data.system(Weight::Diagonal(omega.clone()))?;
            let fit = solve(&system, penalty, config, Some(&stage1.rho))?;
            Ok(TwoStageFit {
                stage1,
                fit,
                omega: Some(omega),
                fallback: None,
            })
        }
        Err(e @ Error::DegenerateMoment { .. }) => Ok(TwoStageFit {
            fit: stage1.clone(),
            stage1,
            omega: None,
            fallback: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszConfig {
    pub penalty: PenaltyConfig,
    pub solver: SolverConfig,
    pub two_stage: bool,
    pub adaptive: bool,
}

impl Default for RieszConfig {
    fn default() -> Self {
        Self {
            penalty: PenaltyConfig::default(),
            solver: SolverConfig::default(),
            two_stage: true,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RieszEstimate {
    pub stage1: RieszFit,
    pub fit: RieszFit,
    #[serde(serialize_with = "crate::io::serialize_opt_dvector")]
    pub omega: Option<DVector<f64>>,
    pub fallback: Option<String>,
}

impl RieszEstimate {
    pub fn rho(&self) -> &DVector<f64> {
        &self.fit.rho
    }
}

/// Full Riesz representer estimate from one training sample.
///
/// Stage 1 uses the identity weight and unit coordinate weights. The final fit
/// uses the diagonal weight from stage-1 residuals (when `two_stage`) and
/// adaptive weights from the stage-1 coefficients (when `adaptive`), and is
/// started at the stage-1 solution.
pub fn estimate_riesz(data: &MomentData, config: &RieszConfig) -> Result<RieszEstimate> {
    let base = PenaltyConfig {
        weights: None,
        ..config.penalty.clone()
    };
    let identity = data.system(Weight::Identity)?;
    let stage1 = solve(&identity, &base, &config.solver, None)?;
    if !config.two_stage && !config.adaptive {
        return Ok(RieszEstimate {
            fit: stage1.clone(),
            stage1,
            omega: None,
            fallback: None,
        });
    }

    let mut omega = None;
    let mut fallback = None;
    let mut system = identity;
    if config.two_stage {
        match diagonal_weights(&data.psi(&stage1.rho)?) {
            Ok(w) => {
                system = data.system(Weight::Diagonal(w.clone()))?;
                omega = Some(w);
            }
            Err(e @ Error::DegenerateMoment { .. }) => fallback = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    let penalty = if config.adaptive {
        PenaltyConfig {
            weights: Some(adaptive_weights(&stage1.rho)),
            ..base
        }
    } else {
        base
    };
    let fit = solve(&system, &penalty, &config.solver, Some(&stage1.rho))?;
    Ok(RieszEstimate {
        stage1,
        fit,
        omega,
        fallback,
    })
}
