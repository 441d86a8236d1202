use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gibbsfit::config::ModelSpec;
use gibbsfit::estimate_pl::{fit_logistic_pl, profile_pseudolikelihood, pseudo_score_with_sensitivity};
use gibbsfit::estimate_so::{fit_semi_optimal_from, semi_optimal_ef, SemiOptimalConfig};
use gibbsfit::fit::{FallbackUsed, FitResult, GridSpec, Method};
use gibbsfit::inference::{bootstrap_se, monte_carlo_s_and_sigma, plug_in_parameter_covariance, GodambeReport};
use gibbsfit::io::{read_covariate, read_pattern, read_window, write_points_csv, write_window};
use gibbsfit::replicated::{
    fit_pooled, replicate_evaluations, sandwich_variance, two_sample_test, PooledConfig, Replicate, ReplicateGroup,
    TwoSampleRow,
};
use gibbsfit::report::{theta_names, write_json, CsvTable};
use gibbsfit::study::{run_rmse_study, ExperimentSpec};
use gibbsfit::{sample_many, GibbsModel, PointPattern, QuadratureScheme, SamplerConfig, Window};
use serde::{Deserialize, Serialize};

use crate::settings::{anchor_model, config_error, read_json, Failure, Outcome, Settings};

fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))
}

fn scheme(window: &Window, [nx, ny]: [usize; 2]) -> Outcome<QuadratureScheme> {
    Ok(QuadratureScheme::grid(window, nx, ny)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicateEntry {
    pub label: String,
    pub points: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupEntry {
    pub label: String,
    pub replicates: Vec<ReplicateEntry>,
}

/// Replicate manifest; paths are relative to the manifest file.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroupManifest {
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Serialize)]
struct SimulationManifest<'a> {
    model: &'a ModelSpec,
    theta: &'a [f64],
    sampler: &'a SamplerConfig,
    nsim: usize,
    groups: Vec<GroupEntry>,
}

pub fn simulate(s: &Settings, out: &Path) -> Outcome<()> {
    let window = s.window()?;
    let spec = s.model_spec()?;
    let model = s.model(&window)?;
    let theta = s.theta()?;
    let inst = model.instance(theta.clone())?;
    let nsim = s.nsim(1);
    let sampler = s.sampler(s.seed());
    let patterns = sample_many(&inst, &window, &sampler, nsim)?;
    create_dir(out)?;
    let window_ref = match &s.file.window {
        Some(p) => p.clone(),
        None => {
            write_window(&out.join("window.json"), &window)?;
            PathBuf::from("window.json")
        }
    };
    let mut replicates = Vec::with_capacity(nsim);
    for (i, x) in patterns.iter().enumerate() {
        let name = format!("pattern_{i:04}.csv");
        write_points_csv(&out.join(&name), x.points())?;
        replicates.push(ReplicateEntry {
            label: i.to_string(),
            points: name.into(),
            window: Some(window_ref.clone()),
            covariate: None,
        });
    }
    let manifest = SimulationManifest {
        model: &spec,
        theta: &theta,
        sampler: &sampler,
        nsim,
        groups: vec![GroupEntry {
            label: "simulated".into(),
            replicates,
        }],
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Single-pattern fit report: the fit plus everything needed to repeat it.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelSpec,
    pub data: PathBuf,
    pub window: Option<PathBuf>,
    pub grid: [usize; 2],
    pub so: SemiOptimalConfig,
    #[serde(flatten)]
    pub fit: FitResult,
}

fn fit_once(
    model: &GibbsModel,
    x: &PointPattern,
    method: Method,
    grid: [usize; 2],
    cfg: &SemiOptimalConfig,
) -> Outcome<FitResult> {
    let pl = fit_logistic_pl(model, x, &cfg.pl)?;
    match method {
        Method::Pl => Ok(pl),
        Method::SemiOptimal => Ok(fit_semi_optimal_from(model, x, &scheme(x.window(), grid)?, cfg, &pl)?),
    }
}

pub fn fit(s: &Settings, se: bool, out: Option<&Path>) -> Outcome<()> {
    let data = s.data()?;
    let x = read_pattern(&data, s.file.window.as_deref())?;
    let model = s.model(x.window())?;
    let method = s.method()?;
    let cfg = s.so_config()?;
    let mut fit = fit_once(&model, &x, method, s.grid(), &cfg)?;
    if se {
        match (method, fit.estimate_source) {
            (Method::SemiOptimal, Method::SemiOptimal) => {
                let m = match fit.report.fallback_used {
                    Some(FallbackUsed::KernelClamp) => model.clone().with_interaction_clamp(),
                    _ => model.clone(),
                };
                let inst = m.instance(fit.theta_hat.clone())?;
                let cov = plug_in_parameter_covariance(&inst, &x, &scheme(x.window(), s.grid())?)?;
                fit.set_covariance(&cov);
            }
            (Method::SemiOptimal, Method::Pl) => {
                eprintln!("warning: the semi-optimal fit fell back to the pseudolikelihood estimate; no standard errors")
            }
            _ => eprintln!("warning: use `bootstrap` for pseudolikelihood standard errors"),
        }
    }
    let report = FitReport {
        model: s.model_spec()?,
        data,
        window: s.file.window.clone(),
        grid: s.grid(),
        so: cfg,
        fit,
    };
    match out {
        Some(p) => write_json(p, &report)?,
        None => print!("{}", gibbsfit::report::to_json_string(&report)),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GroupFit {
    label: String,
    n_replicates: usize,
    fit: FitResult,
}

#[derive(Debug, Serialize)]
struct ReplicatedReport {
    model: ModelSpec,
    groups: Vec<GroupFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    two_sample: Option<Vec<TwoSampleRow>>,
}

fn load_group(entry: &GroupEntry, base: &Path) -> Outcome<(ReplicateGroup, Option<PathBuf>)> {
    let rel = |p: &Path| base.join(p);
    let mut reps = Vec::with_capacity(entry.replicates.len());
    let mut first_cov = None;
    for r in &entry.replicates {
        let window = r.window.as_deref().map(rel);
        let pattern = read_pattern(&rel(&r.points), window.as_deref())?;
        let covariate = match &r.covariate {
            None => None,
            Some(c) => {
                let path = rel(c);
                first_cov.get_or_insert_with(|| path.clone());
                Some(Arc::new(read_covariate(&path, *pattern.window().bounds())?))
            }
        };
        reps.push(Replicate {
            label: r.label.clone(),
            pattern,
            covariate,
        });
    }
    Ok((ReplicateGroup::new(entry.label.clone(), reps)?, first_cov))
}

pub fn fit_replicated(
    s: &Settings,
    manifest: &Path,
    coords: Option<Vec<usize>>,
    (cell, dummy_cell): (Option<f64>, Option<f64>),
    out: Option<&Path>,
) -> Outcome<()> {
    let m: GroupManifest = read_json(manifest)?;
    if m.groups.is_empty() {
        return config_error(format!("{}: no groups", manifest.display()));
    }
    let base = manifest.parent().unwrap_or(Path::new(""));
    let method = s.method()?;
    let [nx, ny] = s.grid();
    let mut cfg = PooledConfig {
        grid: cell.map_or(GridSpec::Cells(nx, ny), GridSpec::CellSize),
        so: s.so_config()?,
    };
    if let Some(c) = dummy_cell {
        cfg.so.pl.dummy_grid = GridSpec::CellSize(c);
    }
    let mut spec = s.model_spec()?;
    let mut fits = Vec::new();
    for entry in &m.groups {
        let (group, first_cov) = load_group(entry, base)?;
        let w = group.replicates[0].pattern.window().clone();
        if spec.covariate_file.is_none() && spec.covariate.is_none() {
            if let Some(c) = first_cov {
                spec = anchor_model(ModelSpec { covariate_file: Some(c), ..spec }, Path::new(""));
            }
        }
        let model = spec.build(Path::new(""), &w)?;
        let mut fit = fit_pooled(&model, &group, method, &cfg)?;
        if group.len() >= 2 {
            let eval_model = match fit.report.fallback_used {
                Some(FallbackUsed::KernelClamp) => model.clone().with_interaction_clamp(),
                _ => model.clone(),
            };
            let evals = replicate_evaluations(&eval_model, &group, fit.estimate_source, &fit.theta_hat, &cfg)?;
            let v = sandwich_variance(&evals)?;
            fit.covariance = Some(v.covariance);
            fit.stderr = Some(v.stderr);
        }
        fits.push((model, GroupFit {
            label: group.label.clone(),
            n_replicates: group.len(),
            fit,
        }));
    }
    let two_sample = if fits.len() == 2 {
        let coords = coords.unwrap_or_else(|| fits[0].0.interaction_coords().collect());
        Some(two_sample_test(&fits[0].1.fit, &fits[1].1.fit, &coords)?)
    } else {
        None
    };
    let report = ReplicatedReport {
        model: spec,
        groups: fits.into_iter().map(|(_, g)| g).collect(),
        two_sample,
    };
    match out {
        Some(p) => write_json(p, &report)?,
        None => print!("{}", gibbsfit::report::to_json_string(&report)),
    }
    Ok(())
}

pub fn bootstrap(s: &Settings, fit_path: &Path, out: &Path) -> Outcome<()> {
    let report: FitReport = read_json(fit_path)?;
    let window = match &report.window {
        Some(p) => read_window(p)?,
        None => Window::unit_square(),
    };
    let model = report.model.build(Path::new(""), &window)?;
    let method = report.fit.method;
    let seed = s.seed();
    let nsim = s.nsim(500);
    let sampler = s.sampler(seed);
    let res = bootstrap_se(&model, &report.fit.theta_hat, &window, &sampler, nsim, seed, |x| {
        fit_once(&model, x, method, report.grid, &report.so)
            .map(|f| f.theta_hat)
            .map_err(|e| match e {
                Failure::Lib(e) => e,
                Failure::Config(m) => gibbsfit::Error::InvalidInput(m),
            })
    })?;
    create_dir(out)?;
    write_json(&out.join("bootstrap.json"), &res)?;
    let names = theta_names(res.theta_hat.len());
    CsvTable::matrix(&names, &res.covariance).write(&out.join("covariance.csv"))?;
    CsvTable::matrix(&names, &res.estimates).write(&out.join("estimates.csv"))?;
    Ok(())
}

pub fn godambe(s: &Settings, methods: &[Method], out: &Path) -> Outcome<()> {
    let window = s.window()?;
    let model = s.model(&window)?;
    let theta = s.theta()?;
    let inst = model.instance(theta)?;
    let sims = sample_many(&inst, &window, &s.sampler(s.seed()), s.nsim(100))?;
    let grid = scheme(&window, s.grid())?;
    let dummy = scheme(&window, s.dummy_grid())?;
    create_dir(out)?;
    let names = theta_names(model.dim());
    let mut reports = serde_json::Map::new();
    for &m in methods {
        let r: GodambeReport = match m {
            Method::Pl => monte_carlo_s_and_sigma(&sims, |x| Ok(pseudo_score_with_sensitivity(&inst, x.points(), &dummy)))?,
            Method::SemiOptimal => monte_carlo_s_and_sigma(&sims, |x| {
                let ef = semi_optimal_ef(&inst, x, &grid)?;
                Ok((ef.value, ef.sensitivity))
            })?,
        };
        let tag = m.label();
        CsvTable::matrix(&names, &r.s).write(&out.join(format!("{tag}_s.csv")))?;
        CsvTable::matrix(&names, &r.sigma).write(&out.join(format!("{tag}_sigma.csv")))?;
        CsvTable::matrix(&names, &r.rel_dev).write(&out.join(format!("{tag}_rel_dev.csv")))?;
        reports.insert(tag.into(), serde_json::to_value(&r).expect("report serialises"));
    }
    write_json(&out.join("godambe.json"), &reports)?;
    Ok(())
}

pub fn rmse_study(config: &Path, seed: Option<u64>, nsim: Option<usize>, out: &Path) -> Outcome<()> {
    let mut spec: ExperimentSpec = read_json(config)?;
    if let Some(v) = seed {
        spec.seed = v;
    }
    if let Some(v) = nsim {
        spec.n_sim = v;
    }
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let base = config.parent().unwrap_or(Path::new(""));
    let table = run_rmse_study(&spec, base)?;
    create_dir(out)?;
    table.to_csv().write(&out.join("rmse.csv"))?;
    table.simulations_csv().write(&out.join("simulations.csv"))?;
    write_json(&out.join("rmse.json"), &table)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProfileReport {
    model: ModelSpec,
    best_r: f64,
    fit: FitResult,
    candidates: Vec<(f64, Option<f64>)>,
}

pub fn profile_r(s: &Settings, candidates: &[f64], out: Option<&Path>) -> Outcome<()> {
    if candidates.is_empty() {
        return config_error("no candidate ranges (--candidates)");
    }
    let data = s.data()?;
    let x = read_pattern(&data, s.file.window.as_deref())?;
    let spec = s.model_spec()?;
    let window = x.window().clone();
    let family = |r: f64| {
        ModelSpec {
            range: Some(r),
            ..spec.clone()
        }
        .build(Path::new(""), &window)
    };
    let res = profile_pseudolikelihood(family, &[x.clone()], candidates, &s.so_config()?.pl)?;
    let report = ProfileReport {
        model: ModelSpec {
            range: Some(res.best),
            ..spec.clone()
        },
        best_r: res.best,
        fit: res.best_fit,
        candidates: res.trace,
    };
    match out {
        Some(p) => write_json(p, &report)?,
        None => print!("{}", gibbsfit::report::to_json_string(&report)),
    }
    Ok(())
}
