//! Semi-optimal Takacs-Fiksel estimation.
//!
//! The weight function `phi(u, y)` solves `(I + T_y) phi = t(., y)` where
//! `T_y` is the integral operator with kernel
//! `lambda(v, y) (1 - lambda(v, y + u) / lambda(v, y))`. It is discretised on a
//! grid quadrature and solved for the data pattern and every leave-one-out
//! configuration; the resulting estimating function is solved by Newton's
//! method with the empirical sensitivity as Jacobian, starting from the
//! pseudolikelihood estimate.

mod envelope;
pub(crate) mod fredholm;

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate_pl::{fit_logistic_pl, LogisticFitConfig};
use crate::fit::{solve_small, sup_norm, to_rows, FallbackUsed, FitResult, Method, SolverReport, TraceStep};
use crate::geometry::{Point, PointPattern};
use crate::model::{GibbsModel, ModelInstance};
use crate::quadrature::QuadratureScheme;
use fredholm::{Delta, FredholmContext, Structure, ThetaState};

/// Sparse symmetric matrix in compressed row form.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    dim: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl KernelMatrix {
    fn from_upper(dim: usize, upper: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(i, j, v) in upper {
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut row_start = vec![0];
        let mut cols = Vec::new();
        let mut values = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (j, v) in r {
                cols.push(j);
                values.push(v);
            }
            row_start.push(cols.len());
        }
        KernelMatrix {
            dim,
            row_start,
            cols,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, by increasing column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_start[i]..self.row_start[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_start[i]..self.row_start[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }
}

fn context(inst: &ModelInstance, y: &PointPattern, scheme: &QuadratureScheme) -> Result<FredholmContext> {
    if !inst.model().pattern_feasible(y.points()) {
        return Err(Error::Infeasible);
    }
    let structure = Arc::new(Structure::new(inst.model(), scheme));
    Ok(FredholmContext::new(inst.model(), structure, y.points()))
}

/// Symmetrised kernel matrix `sqrt(w_i w_j lambda(u_i, y) lambda(u_j, y)) kbar_j(u_i)` on the quadrature nodes,
/// where `kbar_j(u)` averages `1 - r(u, v)` with the kernel clamp over the grid cell of node `j`.
pub fn build_kernel_matrix(inst: &ModelInstance, y: &PointPattern, scheme: &QuadratureScheme) -> Result<KernelMatrix> {
    let ctx = context(inst, y, scheme)?;
    let state = ThetaState::new(&ctx, inst);
    Ok(KernelMatrix::from_upper(scheme.len(), &state.kernel_entries()))
}

/// Discretised weight function for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiOptimalSolution {
    pub config: PointPattern,
    /// Row `j` is `phi(u_j, y)`; zero where `lambda(u_j, y) = 0`.
    pub node_values: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub scheme: QuadratureScheme,
}

/// Solves the discretised Fredholm equation for the configuration `y`.
pub fn solve_semi_optimal(inst: &ModelInstance, y: &PointPattern, scheme: &QuadratureScheme) -> Result<SemiOptimalSolution> {
    let ctx = context(inst, y, scheme)?;
    let mut state = ThetaState::new(&ctx, inst);
    let z = state.base_solution()?;
    let p = inst.model().dim();
    let g = state.g();
    let node_values = DMatrix::from_fn(scheme.len(), p, |j, c| if g[j] > 0.0 { z[j * p + c] / g[j] } else { 0.0 });
    Ok(SemiOptimalSolution {
        config: y.clone(),
        node_values,
        theta: inst.theta().to_vec(),
        scheme: scheme.clone(),
    })
}

/// Nystrom interpolation of the weight function at an arbitrary location:
/// `phi(u) = t(u, y) - sum_j w_j phi(u_j) lambda(u_j, y) kbar_j(u)`, where
/// `kbar_j(u)` averages `1 - r(u, v)` over the grid cell of node `j`.
pub fn nystrom_extend(sol: &SemiOptimalSolution, inst: &ModelInstance, u: &Point) -> Vec<f64> {
    let model = inst.model();
    let y = sol.config.points();
    if inst.conditional_intensity(u, y) == 0.0 {
        return vec![0.0; model.dim()];
    }
    let mut phi = model.sufficient_statistic(u, y);
    let one_minus = fredholm::one_minus_by_code(inst);
    let index = fredholm::NodeIndex::new(&sol.scheme);
    let bands = fredholm::Bands::new(model);
    let nodes = sol.scheme.nodes();
    for (j, f) in fredholm::kernel_neighbours(&index, nodes, &bands, u) {
        let j = j as usize;
        let k = sol.scheme.weights()[j] * inst.conditional_intensity(&nodes[j], y) * fredholm::kernel_value(&f, &one_minus);
        if k != 0.0 {
            for (c, ph) in phi.iter_mut().enumerate() {
                *ph -= k * sol.node_values[(j, c)];
            }
        }
    }
    phi
}

/// Value of the semi-optimal estimating function and its empirical sensitivity.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiOptimalEf {
    pub value: Vec<f64>,
    pub sensitivity: DMatrix<f64>,
    pub report: SolverReport,
}

/// Evaluates the semi-optimal estimating function at `inst` for the pattern `x`.
pub fn semi_optimal_ef(inst: &ModelInstance, x: &PointPattern, scheme: &QuadratureScheme) -> Result<SemiOptimalEf> {
    let ctx = context(inst, x, scheme)?;
    let (value, sensitivity) = ThetaState::new(&ctx, inst).estimating_function()?;
    Ok(SemiOptimalEf {
        value,
        sensitivity,
        report: SolverReport {
            positive_definite: true,
            fallback_used: None,
            cholesky_fill_in: ctx.structure().fill_in(),
            iterations: 0,
        },
    })
}

/// Response to a kernel system that is not positive definite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// Return the pseudolikelihood estimate.
    Pl,
    /// Retry with the interaction parameters clamped at zero inside the kernel, then fall back to the pseudolikelihood.
    #[default]
    ClampThenPl,
}

impl std::str::FromStr for FallbackPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pl" => Ok(FallbackPolicy::Pl),
            "clamp-then-pl" => Ok(FallbackPolicy::ClampThenPl),
            other => Err(Error::InvalidInput(format!("unknown fallback {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiOptimalConfig {
    pub max_iter: usize,
    /// Stop when the sup-norm of the estimating function is below `rel_tol (1 + |e(theta0)|)`.
    pub rel_tol: f64,
    pub fallback: FallbackPolicy,
    /// Settings of the initial pseudolikelihood fit.
    pub pl: LogisticFitConfig,
}

impl Default for SemiOptimalConfig {
    fn default() -> Self {
        SemiOptimalConfig {
            max_iter: 25,
            rel_tol: 1e-6,
            fallback: FallbackPolicy::ClampThenPl,
            pl: LogisticFitConfig::default(),
        }
    }
}

/// Semi-optimal estimate for the pattern `x`.
pub fn fit_semi_optimal(
    model: &GibbsModel,
    x: &PointPattern,
    scheme: &QuadratureScheme,
    cfg: &SemiOptimalConfig,
) -> Result<FitResult> {
    let pl = fit_logistic_pl(model, x, &cfg.pl)?;
    fit_semi_optimal_from(model, x, scheme, cfg, &pl)
}

/// Semi-optimal estimate started from an existing pseudolikelihood fit.
pub fn fit_semi_optimal_from(
    model: &GibbsModel,
    x: &PointPattern,
    scheme: &QuadratureScheme,
    cfg: &SemiOptimalConfig,
    pl: &FitResult,
) -> Result<FitResult> {
    if !model.pattern_feasible(x.points()) {
        return Err(Error::Infeasible);
    }
    let structure = Arc::new(Structure::new(model, scheme));
    let ctx = FredholmContext::new(model, structure, x.points());
    fit_contexts(model, vec![ctx], cfg, pl)
}

/// Newton solve of the summed estimating functions of several contexts, with the fallback policy.
pub(crate) fn fit_contexts(model: &GibbsModel, ctxs: Vec<FredholmContext>, cfg: &SemiOptimalConfig, pl: &FitResult) -> Result<FitResult> {
    let fill_in = ctxs.iter().map(|c| c.structure().fill_in()).sum();
    match newton(&ctxs, &pl.theta_hat, cfg) {
        Ok(fit) => return Ok(finish(fit, fill_in, None)),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    if cfg.fallback == FallbackPolicy::ClampThenPl && !model.interaction_fully_clamped() {
        let clamped: Vec<FredholmContext> = ctxs
            .iter()
            .map(|c| c.with_model(&c.model().clone().with_interaction_clamp()))
            .collect();
        match newton(&clamped, &pl.theta_hat, cfg) {
            Ok(fit) => return Ok(finish(fit, fill_in, Some(FallbackUsed::KernelClamp))),
            Err(Error::NotPositiveDefinite { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut out = pl.clone();
    out.method = Method::SemiOptimal;
    out.estimate_source = Method::Pl;
    out.report = SolverReport {
        positive_definite: false,
        fallback_used: Some(FallbackUsed::PlEstimate),
        cholesky_fill_in: fill_in,
        iterations: 0,
    };
    Ok(out)
}

/// Per-context estimating-function values and sensitivities at `theta`.
pub(crate) fn evaluate_contexts(ctxs: &[FredholmContext], theta: &[f64]) -> Result<Vec<(Vec<f64>, DMatrix<f64>)>> {
    ctxs.par_iter()
        .map(|ctx| {
            let inst = ctx.model().instance(theta.to_vec())?;
            ThetaState::new(ctx, &inst).estimating_function()
        })
        .collect()
}

struct NewtonFit {
    theta: Vec<f64>,
    value: Vec<f64>,
    sensitivity: DMatrix<f64>,
    iterations: usize,
    trace: Vec<TraceStep>,
}

fn finish(fit: NewtonFit, fill_in: usize, fallback: Option<FallbackUsed>) -> FitResult {
    FitResult {
        theta_hat: fit.theta,
        method: Method::SemiOptimal,
        estimate_source: Method::SemiOptimal,
        report: SolverReport {
            positive_definite: fallback.is_none(),
            fallback_used: fallback,
            cholesky_fill_in: fill_in,
            iterations: fit.iterations,
        },
        sensitivity: to_rows(&fit.sensitivity),
        covariance: None,
        stderr: None,
        estimating_function: fit.value,
        objective: None,
        trace: fit.trace,
    }
}

fn newton(ctxs: &[FredholmContext], theta0: &[f64], cfg: &SemiOptimalConfig) -> Result<NewtonFit> {
    let mut theta = theta0.to_vec();
    let mut trace = Vec::new();
    let mut tol = None;
    let mut iterations = 0;
    loop {
        let mut parts = evaluate_contexts(ctxs, &theta)?.into_iter();
        let (mut value, mut sensitivity) = parts.next().expect("at least one context");
        for (v, s) in parts {
            value.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            sensitivity += s;
        }
        let norm = sup_norm(&value);
        trace.push(TraceStep {
            theta: theta.clone(),
            norm,
        });
        let tol = *tol.get_or_insert(cfg.rel_tol * (1.0 + norm));
        if norm <= tol {
            return Ok(NewtonFit {
                theta,
                value,
                sensitivity,
                iterations,
                trace,
            });
        }
        if iterations >= cfg.max_iter || !norm.is_finite() {
            return Err(Error::NoConvergence {
                iterations,
                last_theta: theta,
                last_norm: norm,
            });
        }
        let step = solve_small(&sensitivity, &value)?;
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += s;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NoConvergence {
                iterations,
                last_theta: theta,
                last_norm: norm,
            });
        }
        iterations += 1;
    }
}

/// Plug-in variance of the semi-optimal estimating function,
/// `S + sum_{i != j, |u_i - u_j| < R} w_i w_j D_ij D_ji^T lambda({u_i, u_j}, x)`
/// with `D_ij = phi(u_j, x + u_i) - phi(u_j, x)`.
pub(crate) fn plug_in_variance(inst: &ModelInstance, x: &PointPattern, scheme: &QuadratureScheme) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ctx = context(inst, x, scheme)?;
    let mut state = ThetaState::new(&ctx, inst);
    let (_, sens) = state.estimating_function()?;
    let st = ctx.structure();
    let p = inst.model().dim();
    let m = st.len();
    let z = state.base_solution()?;
    let g = state.g().to_vec();
    let phi0 = |j: usize| -> Vec<f64> {
        if g[j] > 0.0 {
            z[j * p..(j + 1) * p].iter().map(|v| v / g[j]).collect()
        } else {
            vec![0.0; p]
        }
    };
    let active: Vec<usize> = (0..m).filter(|&i| g[i] > 0.0).collect();
    let deltas: Vec<Delta<'_>> = active
        .iter()
        .map(|&i| Delta {
            add: true,
            affected: st.neighbours(i),
        })
        .collect();
    // D_ij for each active i over its neighbours j != i
    let diffs: Vec<Vec<(u32, Vec<f64>)>> = state.solve_deltas(&deltas, |k, view| {
        let i = active[k];
        st.neighbours(i)
            .iter()
            .filter(|&&(j, _)| j as usize != i)
            .map(|&(j, _)| {
                let j = j as usize;
                let gj = view.g(j);
                let base = phi0(j);
                let d = (0..p)
                    .map(|c| if gj > 0.0 { view.z(j)[c] / gj } else { 0.0 } - base[c])
                    .collect();
                (j as u32, d)
            })
            .collect()
    })?;
    let mut row_of = vec![usize::MAX; m];
    for (k, &i) in active.iter().enumerate() {
        row_of[i] = k;
    }
    let w = st.weights();
    let mut upper = DMatrix::zeros(p, p);
    for (k, &i) in active.iter().enumerate() {
        let li = g[i] * g[i] / w[i];
        for ((j, dij), &(_, code)) in diffs[k].iter().zip(st.neighbours(i).iter().filter(|&&(j, _)| j as usize != i)) {
            let j = *j as usize;
            if j < i || row_of[j] == usize::MAX {
                continue;
            }
            let lj = g[j] * g[j] / w[j];
            let a = w[i] * w[j] * li * lj * state.ratio(code);
            if a == 0.0 {
                continue;
            }
            let dji = &diffs[row_of[j]]
                .iter()
                .find(|(jj, _)| *jj as usize == i)
                .expect("neighbour relation is symmetric")
                .1;
            for c in 0..p {
                for d in 0..p {
                    upper[(c, d)] += a * dij[c] * dji[d];
                }
            }
        }
    }
    let sigma = &sens + &upper + upper.transpose();
    Ok((sens, sigma))
}
