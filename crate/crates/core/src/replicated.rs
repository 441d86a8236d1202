//! Replicated point patterns: pooled estimation, sandwich variance and two-sample tests.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimate_pl::{fit_logistic_pl_pooled, logistic_score, wrap_replicate};
use crate::estimate_so::fredholm::{FredholmContext, Structure};
use crate::estimate_so::{evaluate_contexts, fit_contexts, SemiOptimalConfig};
use crate::fit::{inverse_small, FitResult, GridSpec, Method};
use crate::geometry::{CovariateField, PointPattern};
use crate::inference::sample_covariance;
use crate::model::GibbsModel;
use crate::quadrature::QuadratureScheme;

#[derive(Clone, Debug)]
pub struct Replicate {
    pub label: String,
    pub pattern: PointPattern,
    /// Replaces the raster covariates of the model for this replicate.
    pub covariate: Option<Arc<CovariateField>>,
}

#[derive(Clone, Debug)]
pub struct ReplicateGroup {
    pub label: String,
    pub replicates: Vec<Replicate>,
}

impl ReplicateGroup {
    pub fn new(label: impl Into<String>, replicates: Vec<Replicate>) -> Result<Self> {
        if replicates.is_empty() {
            return Err(Error::InvalidInput("a replicate group needs at least one pattern".into()));
        }
        Ok(ReplicateGroup {
            label: label.into(),
            replicates,
        })
    }

    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    fn models(&self, model: &GibbsModel) -> Vec<GibbsModel> {
        self.replicates
            .iter()
            .map(|r| match &r.covariate {
                Some(f) => model.with_covariate_field(f),
                None => model.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PooledConfig {
    /// Quadrature grid of each replicate for the semi-optimal estimator.
    pub grid: GridSpec,
    pub so: SemiOptimalConfig,
}

impl Default for PooledConfig {
    fn default() -> Self {
        PooledConfig {
            grid: GridSpec::Cells(50, 50),
            so: SemiOptimalConfig::default(),
        }
    }
}

fn contexts(models: &[GibbsModel], group: &ReplicateGroup, grid: GridSpec) -> Result<Vec<FredholmContext>> {
    let n = group.len();
    models
        .iter()
        .zip(&group.replicates)
        .enumerate()
        .map(|(i, (m, r))| {
            let x = &r.pattern;
            if !m.pattern_feasible(x.points()) {
                return Err(named(group, n, i, Error::Infeasible));
            }
            let (nx, ny) = grid.dims(x.window())?;
            let scheme = QuadratureScheme::grid(x.window(), nx, ny)?;
            Ok(FredholmContext::new(m, Arc::new(Structure::new(m, &scheme)), x.points()))
        })
        .collect()
}

fn named(group: &ReplicateGroup, n: usize, i: usize, e: Error) -> Error {
    match wrap_replicate(n, i, e) {
        Error::Replicate { index, source, .. } => Error::Replicate {
            index,
            label: group.replicates[index].label.clone(),
            source,
        },
        e => e,
    }
}

/// Fits a common parameter to all replicates by summing their estimating functions.
pub fn fit_pooled(model: &GibbsModel, group: &ReplicateGroup, method: Method, cfg: &PooledConfig) -> Result<FitResult> {
    let models = group.models(model);
    let pairs: Vec<(GibbsModel, &PointPattern)> =
        models.iter().cloned().zip(group.replicates.iter().map(|r| &r.pattern)).collect();
    let pl = fit_logistic_pl_pooled(&pairs, &cfg.so.pl).map_err(|e| relabel(group, e))?;
    match method {
        Method::Pl => Ok(pl),
        Method::SemiOptimal => {
            let ctxs = contexts(&models, group, cfg.grid)?;
            fit_contexts(model, ctxs, &cfg.so, &pl)
        }
    }
}

fn relabel(group: &ReplicateGroup, e: Error) -> Error {
    match e {
        Error::Replicate { index, source, .. } => Error::Replicate {
            index,
            label: group.replicates[index].label.clone(),
            source,
        },
        e => e,
    }
}

/// Per-replicate estimating-function values and sensitivities at `theta`.
pub fn replicate_evaluations(
    model: &GibbsModel,
    group: &ReplicateGroup,
    method: Method,
    theta: &[f64],
    cfg: &PooledConfig,
) -> Result<Vec<(Vec<f64>, DMatrix<f64>)>> {
    let models = group.models(model);
    match method {
        Method::Pl => models
            .par_iter()
            .zip(&group.replicates)
            .enumerate()
            .map(|(i, (m, r))| logistic_score(m, &r.pattern, theta, &cfg.so.pl, i).map_err(|e| named(group, group.len(), i, e)))
            .collect(),
        Method::SemiOptimal => {
            let ctxs = contexts(&models, group, cfg.grid)?;
            evaluate_contexts(&ctxs, theta)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichVariance {
    pub covariance: Vec<Vec<f64>>,
    pub stderr: Vec<f64>,
}

/// `S^{-1} V S^{-T} / n` from per-replicate values and sensitivities, where `S`
/// is their mean sensitivity and `V` the empirical covariance of the values.
pub fn sandwich_variance(evals: &[(Vec<f64>, DMatrix<f64>)]) -> Result<SandwichVariance> {
    let n = evals.len();
    if n < 2 {
        return Err(Error::InvalidInput("the sandwich variance needs at least two replicates".into()));
    }
    let p = evals[0].0.len();
    let mut s = DMatrix::zeros(p, p);
    for (_, m) in evals {
        s += m;
    }
    s /= n as f64;
    let values: Vec<Vec<f64>> = evals.iter().map(|(v, _)| v.clone()).collect();
    let v = sample_covariance(&values);
    let si = inverse_small(&s, "mean sensitivity")?;
    let mut cov = &si * v * si.transpose() / n as f64;
    let sym = (&cov + cov.transpose()) * 0.5;
    cov = sym;
    Ok(SandwichVariance {
        stderr: (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        covariance: crate::fit::to_rows(&cov),
    })
}

/// Holm step-down adjustment of a family of p-values, in input order.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleRow {
    pub coordinate: usize,
    pub z: f64,
    pub p_value: f64,
    pub p_holm: f64,
}

/// `z = (a - b) / sqrt(se_a^2 + se_b^2)` per coordinate, two-sided normal
/// p-values and their Holm adjustment over the given coordinates.
pub fn two_sample_test(a: &FitResult, b: &FitResult, coordinates: &[usize]) -> Result<Vec<TwoSampleRow>> {
    let (Some(sa), Some(sb)) = (&a.stderr, &b.stderr) else {
        return Err(Error::InvalidInput("both fits need standard errors".into()));
    };
    let normal = Normal::standard();
    let mut rows = Vec::with_capacity(coordinates.len());
    for &c in coordinates {
        if c >= a.theta_hat.len() || c >= b.theta_hat.len() {
            return Err(Error::InvalidInput(format!("coordinate {c} out of range")));
        }
        let diff = a.theta_hat[c] - b.theta_hat[c];
        let se = (sa[c] * sa[c] + sb[c] * sb[c]).sqrt();
        let z = if diff == 0.0 { 0.0 } else { diff / se };
        let p_value = (2.0 * normal.cdf(-z.abs())).min(1.0);
        rows.push(TwoSampleRow {
            coordinate: c,
            z,
            p_value,
            p_holm: 0.0,
        });
    }
    let adj = holm(&rows.iter().map(|r| r.p_value).collect::<Vec<_>>());
    for (r, q) in rows.iter_mut().zip(adj) {
        r.p_holm = q;
    }
    Ok(rows)
}
