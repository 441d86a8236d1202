//! Monte Carlo RMSE comparison of the pseudolikelihood and semi-optimal estimators.
//!
//! For every setting, `n_sim` patterns are simulated at the true parameter and
//! fitted with the logistic pseudolikelihood and (per grid) the semi-optimal
//! estimator. Simulations whose pseudolikelihood estimate does not exist are
//! dropped for both estimators. Semi-optimal fits that fall back to the
//! pseudolikelihood estimate stay in the sample and are counted.
//!
//! Seeds: simulation `i` of setting `s` samples with `derive_seed(seed, [0, s, i])`
//! and uses dummy points seeded by `derive_seed(seed, [1, s, i])`; the bootstrap
//! of setting `s`, grid `g` uses `derive_seed(seed, [2, s, g])`.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::config::ModelSpec;
use crate::error::{Error, Result};
use crate::estimate_pl::{fit_logistic_pl, LogisticFitConfig};
use crate::estimate_so::fredholm::{FredholmContext, Structure};
use crate::estimate_so::{fit_contexts, SemiOptimalConfig};
use crate::fit::{FallbackUsed, GridSpec, Method};
use crate::geometry::{PointPattern, Window};
use crate::io::WindowFile;
use crate::model::GibbsModel;
use crate::quadrature::QuadratureScheme;
use crate::report::{fmt_cell, fmt_g6, CsvTable};
use crate::seed::derive_seed;
use crate::simulate::{sample_gibbs, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySetting {
    pub label: String,
    pub model: ModelSpec,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub settings: Vec<StudySetting>,
    /// Defaults to the unit square.
    #[serde(default)]
    pub window: Option<WindowFile>,
    /// Semi-optimal quadrature grids; one table row per setting and grid.
    #[serde(default = "default_grids")]
    pub grids: Vec<GridSpec>,
    pub n_sim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// `so.pl` configures the pseudolikelihood fits; its seed is ignored.
    #[serde(default)]
    pub so: SemiOptimalConfig,
    /// Bootstrap resamples of the Monte Carlo sample.
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
}

fn default_grids() -> Vec<GridSpec> {
    vec![GridSpec::Cells(50, 50)]
}

fn default_estimators() -> Vec<Method> {
    vec![Method::Pl, Method::SemiOptimal]
}

fn default_n_boot() -> usize {
    1000
}

fn default_ci_level() -> f64 {
    0.9
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.settings.is_empty() {
            return bad("no settings".into());
        }
        if self.n_sim == 0 {
            return bad("n_sim must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        if self.estimators.contains(&Method::SemiOptimal) && self.grids.is_empty() {
            return bad("the semi-optimal estimator needs at least one grid".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} outside (0, 1)", self.ci_level));
        }
        self.sampler.validate()
    }

    fn window(&self) -> Result<Window> {
        match &self.window {
            None => Ok(Window::unit_square()),
            Some(w) if w.mask_file.is_some() => {
                Err(Error::InvalidInput("masked study windows are not supported".into()))
            }
            Some(w) => Ok(Window::rect(w.rect()?)),
        }
    }

    fn has(&self, m: Method) -> bool {
        self.estimators.contains(&m)
    }
}

/// Outcome of one simulation for one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub index: usize,
    pub n_points: usize,
    /// `None` when the pseudolikelihood estimate does not exist.
    pub pl: Option<Vec<f64>>,
    pub so: Option<Vec<f64>>,
    pub so_fallback: Option<FallbackUsed>,
    /// The semi-optimal fit failed for another reason and the pseudolikelihood
    /// estimate was substituted.
    pub so_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub rmse_pl: Option<f64>,
    pub rmse_so: Option<f64>,
    /// `(rmse_pl - rmse_so) / rmse_pl`.
    pub rel_improvement: Option<f64>,
    pub rel_improvement_se: Option<f64>,
    pub rel_improvement_lo: Option<f64>,
    pub rel_improvement_hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub setting: String,
    pub grid: Option<(usize, usize)>,
    pub theta: Vec<f64>,
    pub n_sim: usize,
    pub n_used: usize,
    pub omitted_nonexistent: usize,
    pub so_fallback_pl: usize,
    pub so_fallback_clamp: usize,
    pub so_errors: usize,
    pub available: bool,
    pub coordinates: Vec<CoordinateSummary>,
    #[serde(skip)]
    pub records: Vec<SimulationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    pub estimators: Vec<Method>,
    pub ci_level: f64,
    pub rows: Vec<RmseRow>,
}

struct Simulated {
    n_points: usize,
    pl: std::result::Result<Vec<f64>, Error>,
    so: Vec<Option<SoOutcome>>,
}

struct SoOutcome {
    theta: Vec<f64>,
    fallback: Option<FallbackUsed>,
    error: Option<String>,
}

struct SettingPlan {
    model: GibbsModel,
    structures: Vec<(usize, usize, Arc<Structure>)>,
}

/// Runs the study. `base_dir` anchors relative covariate files.
pub fn run_rmse_study(spec: &ExperimentSpec, base_dir: &Path) -> Result<RmseTable> {
    spec.validate()?;
    let window = spec.window()?;
    let with_so = spec.has(Method::SemiOptimal);
    let plans = spec
        .settings
        .iter()
        .map(|s| {
            let model = s.model.build(base_dir, &window)?;
            model.instance(s.theta.clone())?;
            let structures = if with_so {
                spec.grids
                    .iter()
                    .map(|g| {
                        let (nx, ny) = g.dims(&window)?;
                        let scheme = QuadratureScheme::grid(&window, nx, ny)?;
                        Ok((nx, ny, Arc::new(Structure::new(&model, &scheme))))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![]
            };
            Ok(SettingPlan { model, structures })
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|s| (0..spec.n_sim).map(move |i| (s, i)))
        .collect();
    let results: Vec<Simulated> = jobs
        .par_iter()
        .map(|&(s, i)| simulate_and_fit(spec, &plans[s], &spec.settings[s].theta, &window, s, i))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (s, setting) in spec.settings.iter().enumerate() {
        let sims = &results[s * spec.n_sim..(s + 1) * spec.n_sim];
        let grids: Vec<Option<(usize, usize)>> = if with_so {
            plans[s].structures.iter().map(|(nx, ny, _)| Some((*nx, *ny))).collect()
        } else {
            vec![None]
        };
        for (g, grid) in grids.into_iter().enumerate() {
            let records = sims
                .iter()
                .enumerate()
                .map(|(i, r)| record(i, r, if with_so { Some(g) } else { None }))
                .collect();
            let seed = derive_seed(spec.seed, &[2, s as u64, g as u64]);
            rows.push(summarise(spec, setting, grid, records, seed));
        }
    }
    Ok(RmseTable {
        estimators: spec.estimators.clone(),
        ci_level: spec.ci_level,
        rows,
    })
}

fn simulate_and_fit(
    spec: &ExperimentSpec,
    plan: &SettingPlan,
    theta: &[f64],
    window: &Window,
    s: usize,
    i: usize,
) -> Result<Simulated> {
    let inst = plan.model.instance(theta.to_vec())?;
    let sampler = SamplerConfig {
        seed: derive_seed(spec.seed, &[0, s as u64, i as u64]),
        ..spec.sampler.clone()
    };
    let x: PointPattern = sample_gibbs(&inst, window, &sampler)?;
    let pl_cfg = LogisticFitConfig {
        seed: derive_seed(spec.seed, &[1, s as u64, i as u64]),
        ..spec.so.pl.clone()
    };
    let pl = fit_logistic_pl(&plan.model, &x, &pl_cfg);
    let so = match &pl {
        Ok(pl) => plan
            .structures
            .iter()
            .map(|(_, _, st)| {
                let ctx = FredholmContext::new(&plan.model, st.clone(), x.points());
                Some(match fit_contexts(&plan.model, vec![ctx], &spec.so, pl) {
                    Ok(f) => SoOutcome {
                        theta: f.theta_hat,
                        fallback: f.report.fallback_used,
                        error: None,
                    },
                    Err(e) => SoOutcome {
                        theta: pl.theta_hat.clone(),
                        fallback: Some(FallbackUsed::PlEstimate),
                        error: Some(e.to_string()),
                    },
                })
            })
            .collect(),
        Err(_) => plan.structures.iter().map(|_| None).collect(),
    };
    Ok(Simulated {
        n_points: x.len(),
        pl: pl.map(|f| f.theta_hat),
        so,
    })
}

fn record(index: usize, r: &Simulated, grid: Option<usize>) -> SimulationRecord {
    let so = grid.and_then(|g| r.so[g].as_ref());
    SimulationRecord {
        index,
        n_points: r.n_points,
        pl: r.pl.as_ref().ok().cloned(),
        so: so.map(|o| o.theta.clone()),
        so_fallback: so.and_then(|o| o.fallback),
        so_error: so.and_then(|o| o.error.clone()),
    }
}

fn rmse(est: &[&Vec<f64>], truth: f64, k: usize) -> f64 {
    (est.iter().map(|t| (t[k] - truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt()
}

fn summarise(
    spec: &ExperimentSpec,
    setting: &StudySetting,
    grid: Option<(usize, usize)>,
    records: Vec<SimulationRecord>,
    seed: u64,
) -> RmseRow {
    let used: Vec<&SimulationRecord> = records.iter().filter(|r| r.pl.is_some()).collect();
    let count = |f: &dyn Fn(&SimulationRecord) -> bool| used.iter().filter(|r| f(r)).count();
    let with_so = grid.is_some();
    let p = setting.theta.len();
    let pl: Vec<&Vec<f64>> = used.iter().map(|r| r.pl.as_ref().expect("filtered")).collect();
    let so: Vec<&Vec<f64>> = used.iter().filter_map(|r| r.so.as_ref()).collect();
    let available = !used.is_empty();

    let boot_idx: Vec<Vec<usize>> = if available && with_so && spec.has(Method::Pl) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..spec.n_boot)
            .map(|_| (0..used.len()).map(|_| rng.random_range(0..used.len())).collect())
            .collect()
    } else {
        vec![]
    };
    let alpha = (1.0 - spec.ci_level) / 2.0;

    let coordinates = (0..p)
        .map(|k| {
            let truth = setting.theta[k];
            let rmse_pl = (available && spec.has(Method::Pl)).then(|| rmse(&pl, truth, k));
            let rmse_so = (available && with_so).then(|| rmse(&so, truth, k));
            let rel = match (rmse_pl, rmse_so) {
                (Some(a), Some(b)) if a > 0.0 => Some((a - b) / a),
                _ => None,
            };
            let (mut se, mut lo, mut hi) = (None, None, None);
            if rel.is_some() && !boot_idx.is_empty() {
                let reps: Vec<f64> = boot_idx
                    .iter()
                    .map(|idx| {
                        let a: Vec<&Vec<f64>> = idx.iter().map(|&j| pl[j]).collect();
                        let b: Vec<&Vec<f64>> = idx.iter().map(|&j| so[j]).collect();
                        let (a, b) = (rmse(&a, truth, k), rmse(&b, truth, k));
                        if a > 0.0 { (a - b) / a } else { 0.0 }
                    })
                    .collect();
                let n = reps.len() as f64;
                let mean = reps.iter().sum::<f64>() / n;
                let var = if reps.len() > 1 {
                    reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                let mut data = Data::new(reps);
                se = Some(var.sqrt());
                lo = Some(data.quantile(alpha));
                hi = Some(data.quantile(1.0 - alpha));
            }
            CoordinateSummary {
                rmse_pl,
                rmse_so,
                rel_improvement: rel,
                rel_improvement_se: se,
                rel_improvement_lo: lo,
                rel_improvement_hi: hi,
            }
        })
        .collect();

    RmseRow {
        setting: setting.label.clone(),
        grid,
        theta: setting.theta.clone(),
        n_sim: records.len(),
        n_used: used.len(),
        omitted_nonexistent: records.len() - used.len(),
        so_fallback_pl: count(&|r| r.so_fallback == Some(FallbackUsed::PlEstimate)),
        so_fallback_clamp: count(&|r| r.so_fallback == Some(FallbackUsed::KernelClamp)),
        so_errors: count(&|r| r.so_error.is_some()),
        available,
        coordinates,
        records,
    }
}

impl RmseTable {
    fn p(&self) -> usize {
        self.rows.iter().map(|r| r.theta.len()).max().unwrap_or(0)
    }

    fn has(&self, m: Method) -> bool {
        self.estimators.contains(&m)
    }

    /// One row per setting and grid. Relative improvements are fractions.
    pub fn to_csv(&self) -> CsvTable {
        let pl = self.has(Method::Pl);
        let so = self.has(Method::SemiOptimal);
        let mut header: Vec<String> = ["setting", "n_sim", "n_used", "omitted_nonexistent", "available"]
            .map(String::from)
            .to_vec();
        if so {
            header.extend(
                ["grid_nx", "grid_ny", "so_fallback_pl", "so_fallback_clamp", "so_errors"].map(String::from),
            );
        }
        for k in 1..=self.p() {
            header.push(format!("theta{k}"));
            if pl {
                header.push(format!("rmse_pl{k}"));
            }
            if so {
                header.push(format!("rmse_so{k}"));
            }
            if pl && so {
                for name in ["rel_impr", "rel_impr_se", "rel_impr_lo", "rel_impr_hi"] {
                    header.push(format!("{name}{k}"));
                }
            }
        }
        let mut t = CsvTable::new(header);
        for r in &self.rows {
            let mut cells = vec![
                r.setting.clone(),
                r.n_sim.to_string(),
                r.n_used.to_string(),
                r.omitted_nonexistent.to_string(),
                r.available.to_string(),
            ];
            if so {
                let (nx, ny) = r.grid.unwrap_or_default();
                cells.extend([nx, ny, r.so_fallback_pl, r.so_fallback_clamp, r.so_errors].map(|v| v.to_string()));
            }
            for k in 0..self.p() {
                let c = r.coordinates.get(k);
                cells.push(r.theta.get(k).map(|&v| fmt_g6(v)).unwrap_or_default());
                if pl {
                    cells.push(fmt_cell(c.and_then(|c| c.rmse_pl)));
                }
                if so {
                    cells.push(fmt_cell(c.and_then(|c| c.rmse_so)));
                }
                if pl && so {
                    cells.push(fmt_cell(c.and_then(|c| c.rel_improvement)));
                    cells.push(fmt_cell(c.and_then(|c| c.rel_improvement_se)));
                    cells.push(fmt_cell(c.and_then(|c| c.rel_improvement_lo)));
                    cells.push(fmt_cell(c.and_then(|c| c.rel_improvement_hi)));
                }
            }
            t.rows.push(cells);
        }
        t
    }

    /// Every simulation of every row: estimates and fallback flags.
    pub fn simulations_csv(&self) -> CsvTable {
        let p = self.p();
        let mut header: Vec<String> = ["setting", "grid_nx", "grid_ny", "index", "n_points", "so_fallback", "so_error"]
            .map(String::from)
            .to_vec();
        for k in 1..=p {
            header.push(format!("pl{k}"));
        }
        for k in 1..=p {
            header.push(format!("so{k}"));
        }
        let mut t = CsvTable::new(header);
        for r in &self.rows {
            let (nx, ny) = r.grid.unwrap_or_default();
            for s in &r.records {
                let mut cells = vec![
                    r.setting.clone(),
                    nx.to_string(),
                    ny.to_string(),
                    s.index.to_string(),
                    s.n_points.to_string(),
                    match s.so_fallback {
                        Some(FallbackUsed::PlEstimate) => "pl-estimate".into(),
                        Some(FallbackUsed::KernelClamp) => "kernel-clamp".into(),
                        None => String::new(),
                    },
                    s.so_error.clone().unwrap_or_default(),
                ];
                for est in [&s.pl, &s.so] {
                    for k in 0..p {
                        cells.push(fmt_cell(est.as_ref().and_then(|v| v.get(k).copied())));
                    }
                }
                t.rows.push(cells);
            }
        }
        t
    }
}
