//! Pseudolikelihood estimation.
//!
//! The log pseudolikelihood is approximated by the logistic regression
//! likelihood that classifies data points against stratified dummy points of
//! intensity `rho`:
//!
//! ```text
//! sum_{u in x} log(lambda(u, x\u) / (lambda(u, x\u) + rho))
//!   + sum_{d in dummies} log(rho / (lambda(d, x) + rho))
//! ```
//!
//! Dummy points blocked by the hard core have `lambda = 0` and contribute zero.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{sup_norm, to_rows, FitResult, GridSpec, Method, SolverReport, TraceStep};
use crate::geometry::{Point, PointPattern};
use crate::model::{GibbsModel, ModelInstance};
use crate::quadrature::{DummyPattern, QuadratureScheme};
use crate::seed::replicate_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticFitConfig {
    pub dummy_grid: GridSpec,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for LogisticFitConfig {
    fn default() -> Self {
        LogisticFitConfig {
            dummy_grid: GridSpec::Cells(50, 50),
            max_iter: 100,
            grad_tol: 1e-8,
            seed: 0,
        }
    }
}

const MAX_HALVINGS: usize = 30;
/// Iterates beyond this magnitude are treated as diverging to infinity.
const DIVERGENCE_BOUND: f64 = 1e3;

/// Rows of the logistic regression: sufficient statistics, offset `-log rho`, response.
#[derive(Clone, Debug, Default)]
pub(crate) struct LogisticDesign {
    p: usize,
    features: Vec<f64>,
    offset: Vec<f64>,
    is_data: Vec<bool>,
    /// Per-coordinate totals of the data rows, for the separation check.
    data_totals: Vec<f64>,
    n_data: usize,
    area: f64,
}

impl LogisticDesign {
    pub(crate) fn new(p: usize) -> Self {
        LogisticDesign {
            p,
            data_totals: vec![0.0; p],
            ..Default::default()
        }
    }

    pub(crate) fn add_pattern(&mut self, model: &GibbsModel, x: &PointPattern, dummies: &DummyPattern) -> Result<()> {
        let pts = x.points();
        let log_rho = dummies.rho.ln();
        for i in 0..pts.len() {
            let rest = x.without(i);
            if !model.hard_core_indicator(&pts[i], &rest) {
                return Err(Error::Infeasible);
            }
            let t = model.sufficient_statistic(&pts[i], &rest);
            for (tot, v) in self.data_totals.iter_mut().zip(&t) {
                *tot += v;
            }
            self.push(t, -log_rho, true);
        }
        for d in &dummies.points {
            if model.hard_core_indicator(d, pts) {
                self.push(model.sufficient_statistic(d, pts), -log_rho, false);
            }
        }
        self.n_data += pts.len();
        self.area += x.window().area();
        Ok(())
    }

    fn push(&mut self, t: Vec<f64>, offset: f64, is_data: bool) {
        debug_assert_eq!(t.len(), self.p);
        self.features.extend(t);
        self.offset.push(offset);
        self.is_data.push(is_data);
    }

    fn rows(&self) -> usize {
        self.offset.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    /// Objective, gradient and Hessian at `theta`.
    fn evaluate(&self, theta: &[f64], want_hessian: bool) -> (f64, Vec<f64>, DMatrix<f64>) {
        let p = self.p;
        let mut f = 0.0;
        let mut g = vec![0.0; p];
        let mut h = DMatrix::zeros(if want_hessian { p } else { 0 }, if want_hessian { p } else { 0 });
        for i in 0..self.rows() {
            let t = self.row(i);
            let a: f64 = t.iter().zip(theta).map(|(x, th)| x * th).sum::<f64>() + self.offset[i];
            let s = sigmoid(a);
            if self.is_data[i] {
                f -= softplus(-a);
                for k in 0..p {
                    g[k] += (1.0 - s) * t[k];
                }
            } else {
                f -= softplus(a);
                for k in 0..p {
                    g[k] -= s * t[k];
                }
            }
            if want_hessian {
                let wgt = s * (1.0 - s);
                for k in 0..p {
                    for l in 0..=k {
                        h[(k, l)] -= wgt * t[k] * t[l];
                    }
                }
            }
        }
        if want_hessian {
            for k in 0..p {
                for l in 0..k {
                    h[(l, k)] = h[(k, l)];
                }
            }
        }
        (f, g, h)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_separation(model: &GibbsModel, design: &LogisticDesign) -> Result<()> {
    for c in model.interaction_coords() {
        if design.data_totals[c] == 0.0 {
            return Err(Error::EstimateDoesNotExist(format!(
                "interaction statistic {c} is zero for every data point"
            )));
        }
    }
    Ok(())
}

/// Newton ascent with step halving on the concave logistic objective.
fn maximize(model: &GibbsModel, design: &LogisticDesign, cfg: &LogisticFitConfig) -> Result<FitResult> {
    if design.n_data == 0 {
        return Err(Error::EstimateDoesNotExist("empty pattern".into()));
    }
    check_separation(model, design)?;
    let p = model.dim();
    let mut theta = vec![0.0; p];
    theta[0] = (design.n_data as f64 / design.area).ln();
    let mut trace = Vec::new();
    let (mut f, mut g, mut h) = design.evaluate(&theta, true);
    let mut iterations = 0;
    loop {
        let gnorm = sup_norm(&g);
        trace.push(TraceStep {
            theta: theta.clone(),
            norm: gnorm,
        });
        if gnorm <= cfg.grad_tol {
            break;
        }
        if iterations >= cfg.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                last_theta: theta,
                last_norm: gnorm,
            });
        }
        let info = -&h;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&nalgebra::DVector::from_column_slice(&g)),
            None => return Err(Error::EstimateDoesNotExist("singular logistic information".into())),
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let (fc, _, _) = design.evaluate(&cand, false);
            if fc >= f - 1e-12 * f.abs() {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(Error::NoConvergence {
                iterations,
                last_theta: theta,
                last_norm: gnorm,
            });
        };
        theta = next;
        iterations += 1;
        if theta.iter().any(|t| !t.is_finite() || t.abs() > DIVERGENCE_BOUND) {
            return Err(Error::EstimateDoesNotExist("logistic iterates diverge".into()));
        }
        (f, g, h) = design.evaluate(&theta, true);
    }
    Ok(FitResult {
        theta_hat: theta,
        method: Method::Pl,
        estimate_source: Method::Pl,
        report: SolverReport {
            positive_definite: true,
            fallback_used: None,
            cholesky_fill_in: 0,
            iterations,
        },
        sensitivity: to_rows(&(-h)),
        covariance: None,
        stderr: None,
        estimating_function: g,
        objective: Some(f),
        trace,
    })
}

/// Maximum logistic-regression pseudolikelihood estimate for one pattern.
pub fn fit_logistic_pl(model: &GibbsModel, x: &PointPattern, cfg: &LogisticFitConfig) -> Result<FitResult> {
    fit_logistic_pl_pooled(&[(model.clone(), x)], cfg)
}

/// Pooled logistic fit: one design per replicate, summed objective.
///
/// Replicate `i` draws its dummies from [`replicate_seed`]`(cfg.seed, i)`, so a
/// single replicate reproduces [`fit_logistic_pl`] exactly.
pub fn fit_logistic_pl_pooled(replicates: &[(GibbsModel, &PointPattern)], cfg: &LogisticFitConfig) -> Result<FitResult> {
    let Some((model, _)) = replicates.first() else {
        return Err(Error::InvalidInput("no replicates".into()));
    };
    let mut design = LogisticDesign::new(model.dim());
    for (i, (m, x)) in replicates.iter().enumerate() {
        let (nx, ny) = cfg.dummy_grid.dims(x.window())?;
        let dummies = DummyPattern::stratified(x.window(), nx, ny, replicate_seed(cfg.seed, i))?;
        design.add_pattern(m, x, &dummies).map_err(|e| wrap_replicate(replicates.len(), i, e))?;
    }
    maximize(model, &design, cfg)
}

/// Logistic score and information at `theta` for one pattern, with the dummies
/// a pooled fit would use for replicate `index`.
pub fn logistic_score(
    model: &GibbsModel,
    x: &PointPattern,
    theta: &[f64],
    cfg: &LogisticFitConfig,
    index: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (nx, ny) = cfg.dummy_grid.dims(x.window())?;
    let dummies = DummyPattern::stratified(x.window(), nx, ny, replicate_seed(cfg.seed, index))?;
    let mut design = LogisticDesign::new(model.dim());
    design.add_pattern(model, x, &dummies)?;
    let (_, g, h) = design.evaluate(theta, true);
    Ok((g, -h))
}

pub(crate) fn wrap_replicate(n: usize, i: usize, e: Error) -> Error {
    if n == 1 {
        e
    } else {
        Error::Replicate {
            index: i,
            label: format!("replicate {i}"),
            source: Box::new(e),
        }
    }
}

/// Grid-quadrature pseudolikelihood score
/// `sum_{u in x} t(u, x\u) - sum_j w_j t(u_j, x) lambda(u_j, x)`.
pub fn pseudo_score(inst: &ModelInstance, x: &PointPattern, scheme: &QuadratureScheme) -> Vec<f64> {
    pseudo_score_with_sensitivity(inst, x.points(), scheme).0
}

/// Pseudo-score together with `sum_j w_j lambda(u_j, x) t(u_j, x) t(u_j, x)^T`.
pub fn pseudo_score_with_sensitivity(
    inst: &ModelInstance,
    x: &[Point],
    scheme: &QuadratureScheme,
) -> (Vec<f64>, DMatrix<f64>) {
    let model = inst.model();
    let p = model.dim();
    let mut score = vec![0.0; p];
    let mut rest = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        rest.clear();
        rest.extend(x[..i].iter().chain(&x[i + 1..]));
        if inst.conditional_intensity(&x[i], &rest) > 0.0 {
            for (s, v) in score.iter_mut().zip(model.sufficient_statistic(&x[i], &rest)) {
                *s += v;
            }
        }
    }
    let mut sens = DMatrix::zeros(p, p);
    for (u, w) in scheme.nodes().iter().zip(scheme.weights()) {
        let lambda = inst.conditional_intensity(u, x);
        if lambda == 0.0 {
            continue;
        }
        let t = model.sufficient_statistic(u, x);
        for k in 0..p {
            score[k] -= w * t[k] * lambda;
            for l in 0..p {
                sens[(k, l)] += w * lambda * t[k] * t[l];
            }
        }
    }
    (score, sens)
}

/// Outcome of a profile pseudolikelihood search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub best: f64,
    pub best_fit: FitResult,
    /// Maximised objective per candidate; `None` where the fit failed.
    pub trace: Vec<(f64, Option<f64>)>,
}

/// Chooses the irregular parameter maximising the (pooled) logistic objective.
///
/// Candidates whose fit fails are skipped; ties go to the smallest candidate.
pub fn profile_pseudolikelihood<F>(
    family: F,
    patterns: &[PointPattern],
    candidates: &[f64],
    cfg: &LogisticFitConfig,
) -> Result<ProfileResult>
where
    F: Fn(f64) -> Result<GibbsModel> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty candidate grid".into()));
    }
    let fits: Vec<Option<FitResult>> = candidates
        .par_iter()
        .map(|&c| {
            let model = family(c).ok()?;
            let reps: Vec<(GibbsModel, &PointPattern)> = patterns.iter().map(|x| (model.clone(), x)).collect();
            fit_logistic_pl_pooled(&reps, cfg).ok()
        })
        .collect();
    let mut best: Option<(f64, f64, &FitResult)> = None;
    for (&c, fit) in candidates.iter().zip(&fits) {
        let Some(fit) = fit else { continue };
        let obj = fit.objective.expect("logistic fits record their objective");
        let better = match best {
            None => true,
            Some((bc, bo, _)) => obj > bo || (obj == bo && c < bc),
        };
        if better {
            best = Some((c, obj, fit));
        }
    }
    let (best, _, fit) = best.ok_or_else(|| Error::EstimateDoesNotExist("every candidate failed".into()))?;
    Ok(ProfileResult {
        best,
        best_fit: fit.clone(),
        trace: candidates
            .iter()
            .zip(&fits)
            .map(|(&c, f)| (c, f.as_ref().and_then(|f| f.objective)))
            .collect(),
    })
}
