//! Structural-function estimators for `Y = gamma(X) + e` with `E[e | Z] = 0`.

mod kiv;
pub mod lasso;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Dictionary;
use crate::error::{Error, Result};
use crate::pgmm::SolverConfig;

pub use kiv::{fit_kernel_iv, median_heuristic, KernelIvFit, KivConfig, MEDIAN_HEURISTIC_CAP};
pub use lasso::{lasso, lasso_cv, log_grid, LassoCvFit, LassoFit};

/// A differentiable function of the regressors. Callers guarantee that
/// inputs have `input_dim` entries.
pub trait StructuralFunction: Send + Sync {
    fn input_dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// `d(x)' beta` over a fixed dictionary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesFunction {
    #[serde(skip)]
    pub dict: Dictionary,
    #[serde(serialize_with = "crate::io::serialize_dvector")]
    pub coef: DVector<f64>,
}

impl SeriesFunction {
    pub fn new(dict: Dictionary, coef: DVector<f64>) -> Result<Self> {
        if coef.len() != dict.size() {
            return Err(Error::dims("series coefficients", dict.size(), coef.len()));
        }
        Ok(Self { dict, coef })
    }
}

impl StructuralFunction for SeriesFunction {
    fn input_dim(&self) -> usize {
        self.dict.input_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.dict.evaluate(x).expect("input dimension checked by caller");
        d.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let jac = self.dict.jacobian(x).expect("input dimension checked by caller");
        let mut g = vec![0.0; x.len()];
        for (row, b) in jac.iter().zip(self.coef.iter()) {
            if *b == 0.0 {
                continue;
            }
            for (gc, r) in g.iter_mut().zip(row) {
                *gc += b * r;
            }
        }
        g
    }
}

/// `a + c'x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFunction {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearFunction {
    pub fn new(intercept: f64, coef: Vec<f64>) -> Self {
        Self { intercept, coef }
    }
}

impl StructuralFunction for LinearFunction {
    fn input_dim(&self) -> usize {
        self.coef.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.coef.clone()
    }
}

impl StructuralFunction for KernelIvFit {
    fn input_dim(&self) -> usize {
        KernelIvFit::input_dim(self)
    }

    fn value(&self, x: &[f64]) -> f64 {
        KernelIvFit::value(self, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        KernelIvFit::gradient(self, x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DoubleLassoDiagnostics {
    pub stage1_unconverged: usize,
    pub stage2_alpha: f64,
    pub stage2_converged: bool,
    pub stage2_cv_error: Option<Vec<Option<f64>>>,
}

/// A fitted structural function.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaEstimate {
    DoubleLasso {
        function: SeriesFunction,
        diagnostics: DoubleLassoDiagnostics,
    },
    KernelIv(KernelIvFit),
}

impl GammaEstimate {
    fn inner(&self) -> &dyn StructuralFunction {
        match self {
            GammaEstimate::DoubleLasso { function, .. } => function,
            GammaEstimate::KernelIv(fit) => fit,
        }
    }

    /// Predictions for each row of `points`.
    pub fn predict(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        if points.nrows() == 0 {
            return Ok(DVector::zeros(0));
        }
        if points.ncols() != self.input_dim() {
            return Err(Error::dims("prediction points", self.input_dim(), points.ncols()));
        }
        let f = self.inner();
        Ok(DVector::from_iterator(
            points.nrows(),
            points.row_iter().map(|r| {
                let x: Vec<f64> = r.iter().copied().collect();
                f.value(&x)
            }),
        ))
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.inner().value(x))
    }

    pub fn gradient_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.inner().gradient(x))
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("point", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

impl StructuralFunction for GammaEstimate {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.inner().value(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.inner().gradient(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Penalty {
    Fixed(f64),
    Cv { folds: usize, grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleLassoConfig {
    pub stage1_alpha: f64,
    pub stage2: Stage2Penalty,
    pub solver: SolverConfig,
}

impl Default for DoubleLassoConfig {
    fn default() -> Self {
        Self {
            stage1_alpha: 1e-4,
            stage2: Stage2Penalty::Cv {
                folds: 3,
                grid: log_grid(1e-7, 1e-1, 100),
            },
            solver: SolverConfig::default(),
        }
    }
}

/// Which structural-function estimator to fit, with its settings.
#[derive(Debug, Clone, PartialEq)]
pub enum MlivConfig {
    DoubleLasso {
        x_dict: Dictionary,
        z_dict: Dictionary,
        config: DoubleLassoConfig,
    },
    KernelIv(KivConfig),
}

impl MlivConfig {
    pub fn fit(&self, y: &DVector<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<GammaEstimate> {
        match self {
            MlivConfig::DoubleLasso {
                x_dict,
                z_dict,
                config,
            } => fit_double_lasso(y, x, z, x_dict, z_dict, config),
            MlivConfig::KernelIv(cfg) => Ok(GammaEstimate::KernelIv(fit_kernel_iv(y, x, z, cfg)?)),
        }
    }
}

/// Evaluates `dict` on every row.
pub fn design_matrix(dict: &Dictionary, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if points.ncols() != dict.input_dim() {
        return Err(Error::dims("design points", dict.input_dim(), points.ncols()));
    }
    let mut out = DMatrix::zeros(points.nrows(), dict.size());
    let mut x = vec![0.0; points.ncols()];
    for i in 0..points.nrows() {
        for (c, v) in x.iter_mut().enumerate() {
            *v = points[(i, c)];
        }
        let row = dict.evaluate(&x)?;
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Lasso projection of each non-constant `d_j(X)` on `b(Z)`, then a lasso of
/// `Y` on the projected features. Prediction uses the raw `d(x)`.
pub fn fit_double_lasso(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    x_dict: &Dictionary,
    z_dict: &Dictionary,
    config: &DoubleLassoConfig,
) -> Result<GammaEstimate> {
    let n = y.len();
    if x.nrows() != n || z.nrows() != n {
        return Err(Error::dims("double lasso rows", n, x.nrows().min(z.nrows())));
    }
    let d = design_matrix(x_dict, x)?;
    let b = design_matrix(z_dict, z)?;
    let gram_b = lasso::Gram::new(&b, &DVector::zeros(n))?;

    let q = d.ncols();
    let mut fitted = DMatrix::zeros(n, q);
    fitted.column_mut(0).fill(1.0);
    let mut unconverged = 0;
    for j in 1..q {
        let target = d.column(j).into_owned();
        let gram = gram_b.with_outcome(&b, &target)?;
        let fit = lasso::lasso_gram(&gram, config.stage1_alpha, &config.solver, None)?;
        if !fit.converged {
            unconverged += 1;
        }
        fitted.set_column(j, &(&b * &fit.coef));
    }

    let (fit, cv_error) = match &config.stage2 {
        Stage2Penalty::Fixed(alpha) => (lasso(&fitted, y, *alpha, &config.solver)?, None),
        Stage2Penalty::Cv { folds, grid } => {
            if n <= *folds {
                return Err(Error::InvalidArgument(format!(
                    "{n} observations for {folds} CV folds"
                )));
            }
            let cv = lasso_cv(&fitted, y, grid, *folds, &config.solver)?;
            (cv.fit, Some(cv.cv_error))
        }
    };
    if fit.coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Singular("double lasso second stage"));
    }
    Ok(GammaEstimate::DoubleLasso {
        diagnostics: DoubleLassoDiagnostics {
            stage1_unconverged: unconverged,
            stage2_alpha: fit.alpha,
            stage2_converged: fit.converged,
            stage2_cv_error: cv_error,
        },
        function: SeriesFunction::new(x_dict.clone(), fit.coef)?,
    })
}
