//! Fit results shared by both estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::quadrature::grid_dims_for_cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pl,
    #[serde(alias = "so")]
    SemiOptimal,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Pl => "pl",
            Method::SemiOptimal => "so",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pl" => Ok(Method::Pl),
            "so" | "semi-optimal" => Ok(Method::SemiOptimal),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

/// What the semi-optimal fit fell back to after a non-positive-definite system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackUsed {
    PlEstimate,
    KernelClamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// False if any kernel system met during the fit was not positive definite.
    pub positive_definite: bool,
    pub fallback_used: Option<FallbackUsed>,
    /// Envelope entries of the Cholesky factor beyond the kernel's own non-zeros.
    pub cholesky_fill_in: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub theta: Vec<f64>,
    /// Sup-norm of the estimating function (or logistic score) at `theta`.
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    /// Requested estimator.
    pub method: Method,
    /// Estimator that actually produced `theta_hat`.
    pub estimate_source: Method,
    pub report: SolverReport,
    pub sensitivity: Vec<Vec<f64>>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub stderr: Option<Vec<f64>>,
    /// Estimating function at `theta_hat`.
    pub estimating_function: Vec<f64>,
    /// Maximised logistic log-likelihood, for pseudolikelihood fits.
    pub objective: Option<f64>,
    pub trace: Vec<TraceStep>,
}

impl FitResult {
    pub fn sensitivity_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.sensitivity)
    }

    /// Attaches a covariance matrix and the implied standard errors.
    pub fn set_covariance(&mut self, cov: &DMatrix<f64>) {
        self.stderr = Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect());
        self.covariance = Some(to_rows(cov));
    }
}

/// Grid resolution given either as cell counts or as a cell side length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    Cells(usize, usize),
    CellSize(f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Cells(50, 50)
    }
}

impl GridSpec {
    pub fn dims(&self, window: &Window) -> Result<(usize, usize)> {
        match *self {
            GridSpec::Cells(nx, ny) => Ok((nx, ny)),
            GridSpec::CellSize(s) => grid_dims_for_cell(window, s),
        }
    }
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `a x = b` for a small dense system.
pub(crate) fn solve_small(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = nalgebra::DVector::from_column_slice(b);
    let lu = a.clone().lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("sensitivity matrix".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("sensitivity matrix".into()));
    }
    Ok(x.iter().copied().collect())
}

pub(crate) fn inverse_small(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what.to_string()));
    }
    Ok(inv)
}
