//! Acceptance checks. Prints one PASS, FAIL or SKIP line per criterion and
//! exits non-zero if any criterion fails.
//!
//! A subset can be selected by number: `cargo test --test acceptance -- 2 9`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gibbsfit::estimate_pl::{fit_logistic_pl, pseudo_score_with_sensitivity, LogisticFitConfig};
use gibbsfit::estimate_so::{fit_semi_optimal, fit_semi_optimal_from, semi_optimal_ef, solve_semi_optimal, SemiOptimalConfig};
use gibbsfit::fit::FallbackUsed;
use gibbsfit::inference::{bootstrap_se, monte_carlo_s_and_sigma};
use gibbsfit::io::{read_pattern, read_points_csv};
use gibbsfit::study::{run_rmse_study, ExperimentSpec, RmseRow};
use gibbsfit::{
    sample_gibbs, sample_many, Covariate, GibbsModel, ModelInstance, Point, PointPattern, QuadratureScheme, Rect,
    SamplerConfig, Window,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = gibbsfit::Result<Verdict>;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

const LONG: [usize; 5] = [3, 4, 5, 6, 7];

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "Poisson reduction", poisson_reduction),
        (2, "sparse vs dense Fredholm solve", linear_solver_oracle),
        (3, "GNZ unbiasedness", gnz_unbiasedness),
        (4, "RMSE improvement at R=0.12", rmse_improvement),
        (5, "null effect at R=0.04", null_effect),
        (6, "S vs Sigma diagnostic", s_versus_sigma),
        (7, "multiscale fallback rates", fallback_rates),
        (8, "Spanish towns", spanish_towns),
        (9, "intensity gradient", gradient_checks),
        (10, "determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Monte Carlo studies take hours on one core; a bare run skips them unless asked.
    let run_long = !wanted.is_empty() || std::env::var_os("GIBBSFIT_ACCEPTANCE_LONG").is_some();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = if LONG.contains(&n) && !run_long {
            Verdict::Skip(format!(
                "long-running; set GIBBSFIT_ACCEPTANCE_LONG=1 or run `cargo test --release -p gibbsfit-cli --test acceptance -- {n}`"
            ))
        } else {
            run().unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")))
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{secs:.1} s]");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn strauss(beta: f64, gamma: f64, range: f64) -> ModelInstance {
    GibbsModel::strauss(range).unwrap().instance(vec![beta.ln(), gamma.ln()]).unwrap()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn study(json: &str) -> gibbsfit::Result<Vec<RmseRow>> {
    let spec: ExperimentSpec = serde_json::from_str(json).expect("study spec parses");
    Ok(run_rmse_study(&spec, Path::new("."))?.rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{:.1}%", 100.0 * x))
}

fn poisson_reduction() -> Outcome {
    let start = Instant::now();
    let model = GibbsModel::poisson(vec![Covariate::X { scale: 1.0 }]);
    let inst = model.instance(vec![100f64.ln(), -0.5])?;
    let cfg = SamplerConfig { seed: 1, ..SamplerConfig::default() };
    let x = sample_gibbs(&inst, &Window::unit_square(), &cfg)?;
    let scheme = QuadratureScheme::grid(x.window(), 50, 50)?;

    let sol = solve_semi_optimal(&inst, &x, &scheme)?;
    let mut node_dev: f64 = 0.0;
    for (j, u) in scheme.nodes().iter().enumerate() {
        let lambda = inst.conditional_intensity(u, x.points());
        let target: Vec<f64> = inst.intensity_gradient(u, x.points()).iter().map(|g| g / lambda).collect();
        let got: Vec<f64> = sol.node_values.row(j).iter().copied().collect();
        node_dev = node_dev.max(sup(&got, &target));
    }

    let fit = fit_semi_optimal(&model, &x, &scheme, &SemiOptimalConfig::default())?;
    let mut theta = vec![4.0, 0.0];
    for _ in 0..50 {
        let (s, h) = pseudo_score_with_sensitivity(&model.instance(theta.clone())?, x.points(), &scheme);
        let step = h.lu().solve(&DVector::from_vec(s)).expect("sensitivity invertible");
        theta.iter_mut().zip(step.iter()).for_each(|(t, d)| *t += d);
        if step.amax() < 1e-14 {
            break;
        }
    }
    let root_dev = sup(&fit.theta_hat, &theta);
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        node_dev <= 1e-12 && root_dev <= 1e-6 && secs < 60.0,
        format!("n={}, node deviation {node_dev:.1e} (tol 1e-12), root deviation {root_dev:.1e} (tol 1e-6)", x.len()),
    ))
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    return (x, 2.0 / ((1.0 - x * x) * dp * dp));
                }
            }
        })
        .collect()
}

/// Area of the disc of radius `rho` about `u` inside the cell centred at `c`: the chord
/// length integrated in the angle `x = rho sin t`, split where the integrand has kinks.
fn overlap_area(u: &Point, c: &Point, cell: (f64, f64), rho: f64) -> f64 {
    let (x0, x1) = (c.x - cell.0 / 2.0 - u.x, c.x + cell.0 / 2.0 - u.x);
    let (y0, y1) = (c.y - cell.1 / 2.0 - u.y, c.y + cell.1 / 2.0 - u.y);
    let (a, b) = (x0.max(-rho), x1.min(rho));
    if rho <= 0.0 || a >= b {
        return 0.0;
    }
    let (ta, tb) = ((a / rho).asin(), (b / rho).asin());
    let mut cuts = vec![ta, tb];
    for v in [y0, y1, -y0, -y1] {
        if v > 0.0 && v < rho {
            let t = (v / rho).acos();
            cuts.extend([t, -t]);
        }
    }
    cuts.retain(|t| *t >= ta && *t <= tb);
    cuts.sort_by(f64::total_cmp);
    let gl = gauss_legendre(16);
    let f = |t: f64| {
        let s = rho * t.cos();
        rho * t.cos() * (y1.min(s) - y0.max(-s)).max(0.0)
    };
    cuts.windows(2)
        .map(|w| {
            let (m, h) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            gl.iter().map(|(x, wt)| h * wt * f(m + h * x)).sum::<f64>()
        })
        .sum()
}

/// Cell average over the cell of node `c` of the kernel `1 - r(u, v)`, band by band.
fn cell_kernel(inst: &ModelInstance, u: &Point, c: &Point, cell: (f64, f64)) -> f64 {
    let model = inst.model();
    let mut radii: Vec<f64> = [model.hard_core(), model.interaction().inner(), Some(model.range())]
        .into_iter()
        .flatten()
        .collect();
    radii.sort_by(f64::total_cmp);
    let (mut lo, mut lo_area, mut total) = (0.0, 0.0, 0.0);
    for r in radii {
        let area = overlap_area(u, c, cell, r);
        let mid = 0.5 * (lo + r);
        let k = 1.0 - inst.interaction_ratio_clamped(u, &Point::new(u.x + mid, u.y));
        total += (area - lo_area) * k;
        lo = r;
        lo_area = area;
    }
    total / (cell.0 * cell.1)
}

/// Unsymmetrised system `phi_i + sum_j w_j lambda_j kbar_j(u_i) phi_j = t(u_i, y)` solved by LU.
fn dense_nystrom(inst: &ModelInstance, y: &[Point], scheme: &QuadratureScheme) -> DMatrix<f64> {
    let nodes = scheme.nodes();
    let w = scheme.weights();
    let m = nodes.len();
    let lam: Vec<f64> = nodes.iter().map(|u| inst.conditional_intensity(u, y)).collect();
    let a = DMatrix::from_fn(m, m, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta + w[j] * lam[j] * cell_kernel(inst, &nodes[i], &nodes[j], scheme.cell_size())
    });
    let p = inst.model().dim();
    let rhs = DMatrix::from_fn(m, p, |i, c| inst.model().sufficient_statistic(&nodes[i], y)[c]);
    a.lu().solve(&rhs).expect("dense system solvable")
}

fn linear_solver_oracle() -> Outcome {
    let inst = strauss(100.0, 0.2, 0.12);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
        let x = sample_gibbs(&inst, &Window::unit_square(), &cfg)?;
        let scheme = QuadratureScheme::grid(x.window(), 10, 10)?;
        let sol = solve_semi_optimal(&inst, &x, &scheme)?;
        let dense = dense_nystrom(&inst, x.points(), &scheme);
        worst = worst.max((&sol.node_values - dense).amax());
    }
    Ok(verdict(worst <= 1e-8, format!("max abs difference {worst:.1e} over 5 simulated patterns (tol 1e-8)")))
}

fn gnz_unbiasedness() -> Outcome {
    let inst = strauss(100.0, 0.2, 0.08);
    let cfg = SamplerConfig { seed: 3, ..SamplerConfig::default() };
    let sims = sample_many(&inst, &Window::unit_square(), &cfg, 500)?;
    let scheme = QuadratureScheme::grid(&Window::unit_square(), 50, 50)?;
    let pl = monte_carlo_values(&sims, |x| Ok(pseudo_score_with_sensitivity(&inst, x.points(), &scheme).0))?;
    let so = monte_carlo_values(&sims, |x| Ok(semi_optimal_ef(&inst, x, &scheme)?.value))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, values) in [("PL", pl), ("SO", so)] {
        for c in 0..2 {
            let column: Vec<f64> = values.iter().map(|v| v[c]).collect();
            let (m, se) = mean_se(&column);
            ok &= m.abs() <= 3.0 * se;
            parts.push(format!("{label}[{}] {:+.2} SE", c + 1, m / se));
        }
    }
    Ok(verdict(ok, format!("500 sims, means in MC standard errors: {} (tol 3)", parts.join(", "))))
}

fn monte_carlo_values<F>(sims: &[PointPattern], f: F) -> gibbsfit::Result<Vec<Vec<f64>>>
where
    F: Fn(&PointPattern) -> gibbsfit::Result<Vec<f64>> + Sync + Send,
{
    use rayon::prelude::*;
    sims.par_iter().map(f).collect()
}

fn strauss_study(settings: &[(&str, f64, f64)], seed: u64) -> String {
    let settings: Vec<String> = settings
        .iter()
        .map(|(label, gamma, range)| {
            format!(
                r#"{{"label":"{label}","model":{{"type":"strauss","R":{range}}},"theta":[{},{}]}}"#,
                100f64.ln(),
                gamma.ln()
            )
        })
        .collect();
    format!(
        r#"{{"settings":[{}],"grids":[{{"cells":[50,50]}}],"n_sim":200,"seed":{seed},"n_boot":1000,"ci_level":0.9}}"#,
        settings.join(",")
    )
}

fn rmse_improvement() -> Outcome {
    let rows = study(&strauss_study(&[("gamma0.2", 0.2, 0.12), ("gamma0.4", 0.4, 0.12)], 4))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for row in &rows {
        for (c, s) in row.coordinates.iter().enumerate() {
            let point = s.rel_improvement.unwrap_or(f64::NAN);
            let lo = s.rel_improvement_lo.unwrap_or(f64::NAN);
            ok &= point > 0.0 && lo >= -0.01;
            parts.push(format!(
                "{} theta{}: {} [{}, {}]",
                row.setting,
                c + 1,
                pct(s.rel_improvement),
                pct(s.rel_improvement_lo),
                pct(s.rel_improvement_hi)
            ));
        }
    }
    Ok(verdict(ok, format!("{} (need > 0 with 90% CI lower bound >= -1%)", parts.join("; "))))
}

fn null_effect() -> Outcome {
    let rows = study(&strauss_study(&[("gamma0.2", 0.2, 0.04)], 5))?;
    let row = &rows[0];
    let ok = row.coordinates.iter().all(|s| s.rel_improvement.is_some_and(|v| v.abs() <= 0.03));
    let parts: Vec<String> = row
        .coordinates
        .iter()
        .enumerate()
        .map(|(c, s)| format!("theta{}: {} (se {})", c + 1, pct(s.rel_improvement), pct(s.rel_improvement_se)))
        .collect();
    Ok(verdict(ok, format!("{} (tol 3%)", parts.join(", "))))
}

fn s_versus_sigma() -> Outcome {
    let inst = strauss(100.0, 0.1, 0.12);
    let cfg = SamplerConfig { seed: 6, ..SamplerConfig::default() };
    let sims = sample_many(&inst, &Window::unit_square(), &cfg, 500)?;
    let scheme = QuadratureScheme::grid(&Window::unit_square(), 50, 50)?;
    let pl = monte_carlo_s_and_sigma(&sims, |x| Ok(pseudo_score_with_sensitivity(&inst, x.points(), &scheme)))?;
    let so = monte_carlo_s_and_sigma(&sims, |x| {
        let e = semi_optimal_ef(&inst, x, &scheme)?;
        Ok((e.value, e.sensitivity))
    })?;
    let pl11 = pl.rel_dev[0][0];
    Ok(verdict(
        so.frobenius_rel_dev < pl.frobenius_rel_dev && pl11 > 0.5,
        format!(
            "Frobenius SO {:.3} vs PL {:.3}, PL (S11-Sigma11)/Sigma11 {} (need > 50%)",
            so.frobenius_rel_dev,
            pl.frobenius_rel_dev,
            pct(Some(pl11))
        ),
    ))
}

fn fallback_rates() -> Outcome {
    let theta = [40f64.ln(), -0.5, 0.2f64.ln(), 1.5f64.ln()].map(|v| v.to_string()).join(",");
    let setting = |label: &str, clamp: &str| {
        format!(
            r#"{{"label":"{label}","model":{{"type":"multiscale_hc","delta":0.01,"r":0.08,"R":0.16,"covariate":"x","kernel_clamp":[{clamp}]}},"theta":[{theta}]}}"#
        )
    };
    let json = format!(
        r#"{{"settings":[{},{}],"grids":[{{"cells":[50,50]}}],"n_sim":200,"seed":7,"n_boot":100,"so":{{"fallback":"pl"}}}}"#,
        setting("unclamped", ""),
        setting("clamped", "2,3")
    );
    let rows = study(&json)?;
    let rate = |row: &RmseRow| {
        let used: Vec<_> = row.records.iter().filter(|r| r.pl.is_some()).collect();
        let fell = used
            .iter()
            .filter(|r| r.so_fallback == Some(FallbackUsed::PlEstimate) && r.so_error.is_none())
            .count();
        (fell as f64 / used.len() as f64, row.so_errors)
    };
    let (free, free_err) = rate(&rows[0]);
    let (clamped, clamped_err) = rate(&rows[1]);
    Ok(verdict(
        (0.10..=0.40).contains(&free) && clamped <= 0.08,
        format!(
            "not positive definite: unclamped {} (need 10-40%), clamped {} (need <= 8%); other solver failures {free_err} and {clamped_err}",
            pct(Some(free)),
            pct(Some(clamped))
        ),
    ))
}

fn spanish_towns_file() -> Option<PathBuf> {
    std::env::var_os("GIBBSFIT_SPANISH_TOWNS").map(PathBuf::from).or_else(|| {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/spanish_towns.csv");
        p.exists().then_some(p)
    })
}

fn spanish_towns() -> Outcome {
    let Some(points) = spanish_towns_file() else {
        return Ok(Verdict::Skip(
            "no data; set GIBBSFIT_SPANISH_TOWNS to an x,y CSV (window from GIBBSFIT_SPANISH_TOWNS_WINDOW, default [0,40]^2)"
                .into(),
        ));
    };
    let x = match std::env::var_os("GIBBSFIT_SPANISH_TOWNS_WINDOW") {
        Some(w) => read_pattern(&points, Some(Path::new(&w)))?,
        None => PointPattern::new(read_points_csv(&points)?, Window::rect(Rect::new(0.0, 40.0, 0.0, 40.0)?))?,
    };
    let model = GibbsModel::strauss_hard_core(0.83, 3.5)?;
    let scheme = QuadratureScheme::grid(x.window(), 50, 50)?;
    let cfg = SemiOptimalConfig::default();
    let pl = fit_logistic_pl(&model, &x, &cfg.pl)?;
    let so = fit_semi_optimal_from(&model, &x, &scheme, &cfg, &pl)?;
    let pl_ok = sup(&pl.theta_hat, &[-1.96, -0.89]) <= 0.08;
    let so_ok = sup(&so.theta_hat, &[-1.88, -0.87]) <= 0.08;

    let sampler = SamplerConfig::default();
    let refit_pl = |y: &PointPattern| fit_logistic_pl(&model, y, &LogisticFitConfig::default()).map(|f| f.theta_hat);
    let refit_so = |y: &PointPattern| fit_semi_optimal(&model, y, &scheme, &cfg).map(|f| f.theta_hat);
    let boot_pl = bootstrap_se(&model, &pl.theta_hat, x.window(), &sampler, 500, 8, refit_pl)?;
    let boot_so = bootstrap_se(&model, &so.theta_hat, x.window(), &sampler, 500, 8, refit_so)?;
    let ratios: Vec<f64> = boot_so.stderr.iter().zip(&boot_pl.stderr).map(|(s, p)| s / p).collect();
    let ratio_ok = ratios.iter().all(|r| (0.65..=0.95).contains(r));
    Ok(verdict(
        pl_ok && so_ok && ratio_ok,
        format!(
            "PL {:.3?} (target (-1.96, -0.89) +-0.08), SO {:.3?} (target (-1.88, -0.87) +-0.08), SE ratios SO/PL {:.3?} (need 0.65-0.95)",
            pl.theta_hat, so.theta_hat, ratios
        ),
    ))
}

fn random_instance(rng: &mut ChaCha8Rng) -> ModelInstance {
    let range = rng.random_range(0.05..0.2);
    let delta = rng.random_range(0.002..0.02);
    let (model, p) = match rng.random_range(0..4) {
        0 => (GibbsModel::poisson(vec![Covariate::X { scale: 1.0 }, Covariate::Y { scale: 2.0 }]), 3),
        1 => (GibbsModel::strauss(range).unwrap(), 2),
        2 => (GibbsModel::strauss_hard_core(delta, range).unwrap(), 2),
        _ => (
            GibbsModel::multiscale_hard_core(delta, range / 2.0, range, Covariate::Y { scale: 1.0 }).unwrap(),
            4,
        ),
    };
    let mut theta = vec![rng.random_range(2.0..5.0)];
    theta.extend((1..p).map(|_| rng.random_range(-1.5..0.5)));
    model.instance(theta).unwrap()
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut zero = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let n = rng.random_range(0..25);
        let y: Vec<Point> = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
        let u = Point::new(rng.random(), rng.random());
        let g = inst.intensity_gradient(&u, &y);
        let theta = inst.theta().to_vec();
        let fd: Vec<f64> = (0..theta.len())
            .map(|k| {
                let h = 1e-5 * (1.0 + theta[k].abs());
                let at = |d: f64| {
                    let mut t = theta.clone();
                    t[k] += d;
                    inst.with_theta(&t).unwrap().conditional_intensity(&u, &y)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            zero += 1;
            worst = worst.max(fd.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        } else {
            worst = worst.max(sup(&g, &fd) / scale);
        }
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("max relative error {worst:.1e} over 100 draws ({zero} inside a hard core) (tol 1e-6)"),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temporary directory");
    let config = dir.path().join("study.json");
    let json = r#"{"settings":[
        {"label":"g0.2","model":{"type":"strauss","R":0.08},"theta":[4.605170185988092,-1.6094379124341003]},
        {"label":"g0.5","model":{"type":"strauss","R":0.1},"theta":[4.605170185988092,-0.6931471805599453]}],
      "grids":[{"cells":[30,30]}],"n_sim":24,"seed":10,"n_boot":200}"#;
    fs::write(&config, json).expect("config written");
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_gibbsfit"))
            .current_dir(dir.path())
            .args(["--threads", "8", "rmse-study", "--config", "study.json", "--out", out])
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    if !(run("a") && run("b")) {
        return Ok(Verdict::Fail("rmse-study exited with an error".into()));
    }
    let mut differing = Vec::new();
    for f in ["rmse.csv", "rmse.json", "simulations.csv"] {
        let read = |d: &str| fs::read(dir.path().join(d).join(f)).unwrap_or_default();
        let (a, b) = (read("a"), read("b"));
        if a.is_empty() || a != b {
            differing.push(f);
        }
    }
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() {
            "rmse.csv, rmse.json and simulations.csv byte-identical across two 8-thread runs".into()
        } else {
            format!("differing or missing: {}", differing.join(", "))
        },
    ))
}
