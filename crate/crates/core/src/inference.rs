//! Sensitivity, variance and Godambe information; parametric bootstrap.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{inverse_small, to_rows};
use crate::geometry::{PointPattern, Window};
use crate::model::{GibbsModel, ModelInstance};
use crate::quadrature::QuadratureScheme;
use crate::seed::derive_seed;
use crate::simulate::{sample_gibbs, SamplerConfig};

/// Monte Carlo estimates of the sensitivity `S` and the variance `Sigma` of an estimating function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GodambeReport {
    pub s: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    /// `S^T Sigma^{-1} S`, when `Sigma` is invertible.
    pub godambe: Option<Vec<Vec<f64>>>,
    pub inverse_godambe: Option<Vec<Vec<f64>>>,
    /// `(S_ij - Sigma_ij) / Sigma_ij`.
    pub rel_dev: Vec<Vec<f64>>,
    pub frobenius_rel_dev: f64,
    pub n_sim: usize,
}

impl GodambeReport {
    /// Builds the report from per-simulation estimating-function values and sensitivities.
    pub fn from_samples(values: &[Vec<f64>], sensitivities: &[DMatrix<f64>]) -> Result<Self> {
        let n = values.len();
        if n < 2 || sensitivities.len() != n {
            return Err(Error::InvalidInput(format!("need at least two simulations, got {n}")));
        }
        let p = values[0].len();
        let mut s = DMatrix::zeros(p, p);
        for m in sensitivities {
            s += m;
        }
        s /= n as f64;
        let mut mean = vec![0.0; p];
        for v in values {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut sigma = DMatrix::zeros(p, p);
        for v in values {
            for i in 0..p {
                for j in 0..p {
                    sigma[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]);
                }
            }
        }
        sigma /= (n - 1) as f64;
        if let Some(i) = (0..p).find(|&i| !(sigma[(i, i)] > 0.0)) {
            return Err(Error::Degenerate(format!("estimating function coordinate {i} has zero variance")));
        }
        let rel_dev = DMatrix::from_fn(p, p, |i, j| (s[(i, j)] - sigma[(i, j)]) / sigma[(i, j)]);
        let frobenius_rel_dev = rel_dev.norm();
        let godambe = inverse_small(&sigma, "variance matrix")
            .ok()
            .map(|si| symmetrise(&(s.transpose() * si * &s)));
        let inverse_godambe = godambe
            .as_ref()
            .and_then(|g| inverse_small(g, "Godambe matrix").ok())
            .map(|g| symmetrise(&g));
        Ok(GodambeReport {
            s: to_rows(&s),
            sigma: to_rows(&sigma),
            godambe: godambe.as_ref().map(to_rows),
            inverse_godambe: inverse_godambe.as_ref().map(to_rows),
            rel_dev: to_rows(&rel_dev),
            frobenius_rel_dev,
            n_sim: n,
        })
    }
}

fn symmetrise(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Evaluates `ef` on every simulated pattern and summarises `S` and `Sigma`.
///
/// `ef` returns the estimating-function value and its empirical sensitivity.
pub fn monte_carlo_s_and_sigma<F>(sims: &[PointPattern], ef: F) -> Result<GodambeReport>
where
    F: Fn(&PointPattern) -> Result<(Vec<f64>, DMatrix<f64>)> + Sync,
{
    let evals: Vec<(Vec<f64>, DMatrix<f64>)> = sims.par_iter().map(&ef).collect::<Result<_>>()?;
    let (values, sens): (Vec<_>, Vec<_>) = evals.into_iter().unzip();
    GodambeReport::from_samples(&values, &sens)
}

/// Plug-in estimate of the variance of the semi-optimal estimating function,
/// `S + sum_{i != j} w_i w_j D_{u_i} phi(u_j) D_{u_j} phi(u_i)^T lambda({u_i, u_j}, x)`,
/// summed over node pairs closer than the interaction range.
pub fn plug_in_covariance(inst: &ModelInstance, x: &PointPattern, scheme: &QuadratureScheme) -> Result<DMatrix<f64>> {
    Ok(crate::estimate_so::plug_in_variance(inst, x, scheme)?.1)
}

/// Covariance of the semi-optimal estimate, `S^{-1} Sigma S^{-T}`, from plug-in estimates.
pub fn plug_in_parameter_covariance(inst: &ModelInstance, x: &PointPattern, scheme: &QuadratureScheme) -> Result<DMatrix<f64>> {
    let (s, sigma) = crate::estimate_so::plug_in_variance(inst, x, scheme)?;
    let si = inverse_small(&s, "sensitivity matrix")?;
    Ok(&si * sigma * si.transpose())
}

/// 95% confidence ellipse for a pair of coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub coords: (usize, usize),
    pub center: (f64, f64),
    /// Semi-axis lengths, major first.
    pub semi_axes: (f64, f64),
    /// Angle of the major axis to the first coordinate axis, radians.
    pub angle: f64,
    pub area: f64,
}

/// Chi-square(2) 95% quantile, `-2 ln 0.05`.
pub fn chi2_2_95() -> f64 {
    -2.0 * 0.05f64.ln()
}

impl Ellipse {
    pub fn new(coords: (usize, usize), center: (f64, f64), cov: [[f64; 2]; 2]) -> Self {
        let q = chi2_2_95();
        let m = nalgebra::Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
        let eig = SymmetricEigen::new(m);
        let (big, small) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let v = eig.eigenvectors.column(big);
        let det = (cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0]).max(0.0);
        Ellipse {
            coords,
            center,
            semi_axes: (
                (q * eig.eigenvalues[big].max(0.0)).sqrt(),
                (q * eig.eigenvalues[small].max(0.0)).sqrt(),
            ),
            angle: v[1].atan2(v[0]),
            area: std::f64::consts::PI * q * det.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub theta_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub ellipses: Vec<Ellipse>,
    pub n_sim: usize,
    pub n_failed: usize,
    /// Refitted estimates of the successful simulations, in simulation order.
    pub estimates: Vec<Vec<f64>>,
}

/// Empirical mean-free covariance (denominator `n - 1`) of a sample of vectors.
pub fn sample_covariance(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    let p = xs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; p];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut c = DMatrix::zeros(p, p);
    if n < 2 {
        return c;
    }
    for x in xs {
        for i in 0..p {
            for j in 0..p {
                c[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    c / (n - 1) as f64
}

/// Parametric bootstrap: simulate `n_sim` patterns at `theta_hat`, refit each with `fit`.
///
/// Simulation `i` uses sampler seed `derive_seed(seed, [i])`. Failed refits are
/// dropped and counted; more than half failing is an error.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_se<F>(
    model: &GibbsModel,
    theta_hat: &[f64],
    window: &Window,
    sampler: &SamplerConfig,
    n_sim: usize,
    seed: u64,
    fit: F,
) -> Result<BootstrapResult>
where
    F: Fn(&PointPattern) -> Result<Vec<f64>> + Sync,
{
    if n_sim < 2 {
        return Err(Error::InvalidInput("bootstrap needs at least two simulations".into()));
    }
    let inst = model.instance(theta_hat.to_vec())?;
    inst.model().check_existence(theta_hat)?;
    let results: Vec<Option<Vec<f64>>> = (0..n_sim)
        .into_par_iter()
        .map(|i| {
            let cfg = SamplerConfig {
                seed: derive_seed(seed, &[i as u64]),
                ..sampler.clone()
            };
            let x = sample_gibbs(&inst, window, &cfg).ok()?;
            fit(&x).ok()
        })
        .collect();
    let estimates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let n_failed = n_sim - estimates.len();
    if 2 * n_failed > n_sim {
        return Err(Error::TooManyFailures {
            failed: n_failed,
            total: n_sim,
        });
    }
    let cov = sample_covariance(&estimates);
    let p = theta_hat.len();
    let mut ellipses = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            ellipses.push(Ellipse::new(
                (i, j),
                (theta_hat[i], theta_hat[j]),
                [[cov[(i, i)], cov[(i, j)]], [cov[(j, i)], cov[(j, j)]]],
            ));
        }
    }
    Ok(BootstrapResult {
        theta_hat: theta_hat.to_vec(),
        stderr: (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        covariance: to_rows(&cov),
        ellipses,
        n_sim,
        n_failed,
        estimates,
    })
}
