use gibbsfit::estimate_pl::{pseudo_score, pseudo_score_with_sensitivity};
use gibbsfit::estimate_so::{
    build_kernel_matrix, fit_semi_optimal, nystrom_extend, semi_optimal_ef, solve_semi_optimal, SemiOptimalConfig,
};
use gibbsfit::{sample_gibbs, Covariate, GibbsModel, ModelInstance, Point, PointPattern, QuadratureScheme, SamplerConfig, Window};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(n: usize, seed: u64) -> PointPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
    PointPattern::new(pts, Window::unit_square()).unwrap()
}

/// Hard-core-feasible pattern by rejection.
fn spaced(n: usize, delta: f64, seed: u64) -> PointPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point> = Vec::new();
    while pts.len() < n {
        let p = Point::new(rng.random(), rng.random());
        if pts.iter().all(|q| q.dist(&p) > delta) {
            pts.push(p);
        }
    }
    PointPattern::new(pts, Window::unit_square()).unwrap()
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

/// Dense brute-force Fredholm solution: rows are phi(u_j, y).
fn dense_phi(inst: &ModelInstance, y: &[Point], scheme: &QuadratureScheme) -> DMatrix<f64> {
    let m = scheme.len();
    let p = inst.model().dim();
    let nodes = scheme.nodes();
    let w = scheme.weights();
    let lam: Vec<f64> = nodes.iter().map(|u| inst.conditional_intensity(u, y)).collect();
    let mut a = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] += (w[i] * w[j] * lam[i] * lam[j]).sqrt() * cell_kernel(inst, &nodes[i], &nodes[j], scheme.cell_size());
        }
    }
    let lu = a.lu();
    let mut out = DMatrix::zeros(m, p);
    for c in 0..p {
        let rhs = DVector::from_fn(m, |i, _| {
            (w[i] * lam[i]).sqrt() * inst.model().sufficient_statistic(&nodes[i], y)[c]
        });
        let z = lu.solve(&rhs).unwrap();
        for i in 0..m {
            if lam[i] > 0.0 {
                out[(i, c)] = z[i] / (w[i] * lam[i]).sqrt();
            }
        }
    }
    out
}

fn strauss_hc() -> ModelInstance {
    GibbsModel::strauss_hard_core(0.03, 0.15)
        .unwrap()
        .instance(vec![4.0, 0.3f64.ln()])
        .unwrap()
}

#[test]
fn kernel_matrix_matches_dense_construction() {
    let inst = GibbsModel::strauss(0.25).unwrap().instance(vec![4.0, 0.2f64.ln()]).unwrap();
    let x = uniform(12, 1);
    let scheme = QuadratureScheme::grid(x.window(), 10, 10).unwrap();
    let k = build_kernel_matrix(&inst, &x, &scheme).unwrap();
    let nodes = scheme.nodes();
    let w = scheme.weights();
    for i in 0..100 {
        for j in 0..100 {
            let li = inst.conditional_intensity(&nodes[i], x.points());
            let lj = inst.conditional_intensity(&nodes[j], x.points());
            let expect = (w[i] * w[j] * li * lj).sqrt() * cell_kernel(&inst, &nodes[i], &nodes[j], scheme.cell_size());
            assert!((k.get(i, j) - expect).abs() <= 1e-12 * expect.abs() + 1e-15, "({i},{j}): {} vs {expect}", k.get(i, j));
            assert_eq!(k.get(i, j).to_bits(), k.get(j, i).to_bits());
            assert!(k.get(i, j) >= 0.0);
            if expect > 1e-12 {
                assert!(k.get(i, j) > 0.0);
            }
        }
    }
    let poisson = GibbsModel::poisson(vec![]).instance(vec![4.0]).unwrap();
    assert_eq!(build_kernel_matrix(&poisson, &x, &scheme).unwrap().nnz(), 0);
}

#[test]
fn sparse_solution_matches_dense_solve() {
    for (inst, x) in [
        (GibbsModel::strauss(0.25).unwrap().instance(vec![4.0, 0.2f64.ln()]).unwrap(), uniform(15, 2)),
        (strauss_hc(), spaced(15, 0.03, 3)),
    ] {
        let scheme = QuadratureScheme::grid(x.window(), 10, 10).unwrap();
        let sol = solve_semi_optimal(&inst, &x, &scheme).unwrap();
        let dense = dense_phi(&inst, x.points(), &scheme);
        let diff = (&sol.node_values - &dense).abs().max();
        assert!(diff <= 1e-8, "max abs diff {diff}");
    }
}

#[test]
fn poisson_solution_is_the_statistic() {
    let inst = GibbsModel::poisson(vec![Covariate::X { scale: 1.0 }]).instance(vec![4.0, 0.5]).unwrap();
    let x = uniform(20, 4);
    let scheme = QuadratureScheme::grid(x.window(), 20, 20).unwrap();
    let sol = solve_semi_optimal(&inst, &x, &scheme).unwrap();
    for (j, u) in scheme.nodes().iter().enumerate() {
        assert_eq!(sol.node_values[(j, 0)], 1.0);
        assert!((sol.node_values[(j, 1)] - u.x).abs() < 1e-15);
    }
    let u = Point::new(0.123, 0.456);
    assert_eq!(nystrom_extend(&sol, &inst, &u), vec![1.0, u.x]);
}

#[test]
fn nystrom_reproduces_node_values() {
    let inst = strauss_hc();
    let x = spaced(25, 0.03, 5);
    let scheme = QuadratureScheme::grid(x.window(), 20, 20).unwrap();
    let sol = solve_semi_optimal(&inst, &x, &scheme).unwrap();
    for (j, u) in scheme.nodes().iter().enumerate() {
        let ext = nystrom_extend(&sol, &inst, u);
        for c in 0..2 {
            let v = sol.node_values[(j, c)];
            assert!((ext[c] - v).abs() <= 1e-8 * v.abs().max(1.0), "node {j}: {} vs {v}", ext[c]);
        }
    }
}

#[test]
fn nystrom_extension_matches_oracle() {
    let inst = strauss_hc();
    let x = spaced(20, 0.03, 11);
    let scheme = QuadratureScheme::grid(x.window(), 15, 15).unwrap();
    let sol = solve_semi_optimal(&inst, &x, &scheme).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let u = Point::new(rng.random(), rng.random());
        let mut expect = inst.model().sufficient_statistic(&u, x.points());
        if inst.conditional_intensity(&u, x.points()) == 0.0 {
            expect.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (j, v) in scheme.nodes().iter().enumerate() {
                let k = scheme.weights()[j]
                    * inst.conditional_intensity(v, x.points())
                    * cell_kernel(&inst, &u, v, scheme.cell_size());
                for (c, e) in expect.iter_mut().enumerate() {
                    *e -= k * sol.node_values[(j, c)];
                }
            }
        }
        let got = nystrom_extend(&sol, &inst, &u);
        for c in 0..2 {
            assert!((got[c] - expect[c]).abs() <= 1e-10 * expect[c].abs().max(1.0), "{got:?} vs {expect:?}");
        }
    }
}

#[test]
fn estimating_function_matches_dense_oracle() {
    for (inst, x) in [
        (GibbsModel::strauss(0.2).unwrap().instance(vec![4.0, 0.4f64.ln()]).unwrap(), uniform(14, 6)),
        (strauss_hc(), spaced(14, 0.03, 7)),
    ] {
        let scheme = QuadratureScheme::grid(x.window(), 12, 9).unwrap();
        let ef = semi_optimal_ef(&inst, &x, &scheme).unwrap();
        let p = 2;
        let mut value = vec![0.0; p];
        for k in 0..x.len() {
            let rest = PointPattern::new(x.without(k), Window::unit_square()).unwrap();
            let sol = solve_semi_optimal(&inst, &rest, &scheme).unwrap();
            let dense = dense_phi(&inst, rest.points(), &scheme);
            assert!((&sol.node_values - &dense).abs().max() < 1e-8);
            let phi = nystrom_extend(&sol, &inst, &x.points()[k]);
            for c in 0..p {
                value[c] += phi[c];
            }
        }
        let base = dense_phi(&inst, x.points(), &scheme);
        let mut sens = DMatrix::zeros(p, p);
        for (j, u) in scheme.nodes().iter().enumerate() {
            let lam = inst.conditional_intensity(u, x.points());
            let t = inst.model().sufficient_statistic(u, x.points());
            for c in 0..p {
                value[c] -= scheme.weights()[j] * base[(j, c)] * lam;
                for d in 0..p {
                    sens[(c, d)] += scheme.weights()[j] * base[(j, c)] * lam * t[d];
                }
            }
        }
        for c in 0..p {
            assert!((ef.value[c] - value[c]).abs() <= 1e-8 * value[c].abs().max(1.0), "{:?} vs {value:?}", ef.value);
        }
        assert!((&ef.sensitivity - &sens).abs().max() <= 1e-8 * sens.abs().max());
    }
}

#[test]
fn poisson_estimating_function_is_pseudo_score() {
    let inst = GibbsModel::poisson(vec![Covariate::Y { scale: 1.0 }]).instance(vec![4.5, -0.3]).unwrap();
    let x = uniform(90, 8);
    let scheme = QuadratureScheme::grid(x.window(), 30, 30).unwrap();
    let ef = semi_optimal_ef(&inst, &x, &scheme).unwrap();
    let (score, sens) = pseudo_score_with_sensitivity(&inst, x.points(), &scheme);
    for c in 0..2 {
        assert!((ef.value[c] - score[c]).abs() <= 1e-10 * score[c].abs().max(1.0));
    }
    assert!((&ef.sensitivity - &sens).abs().max() <= 1e-10 * sens.abs().max());

    let empty = PointPattern::new(vec![], Window::unit_square()).unwrap();
    let beta = GibbsModel::poisson(vec![]).instance(vec![4.0]).unwrap();
    let e = semi_optimal_ef(&beta, &empty, &scheme).unwrap();
    assert!((e.value[0] + 4f64.exp()).abs() < 1e-9);
}

/// Newton on the grid-quadrature pseudo-score, as an independent root finder.
fn pseudo_score_root(model: &GibbsModel, x: &PointPattern, scheme: &QuadratureScheme, start: Vec<f64>) -> Vec<f64> {
    let mut theta = start;
    for _ in 0..50 {
        let inst = model.instance(theta.clone()).unwrap();
        let (s, h) = pseudo_score_with_sensitivity(&inst, x.points(), scheme);
        let step = h.lu().solve(&DVector::from_vec(s.clone())).unwrap();
        theta.iter_mut().zip(step.iter()).for_each(|(t, d)| *t += d);
        if s.iter().all(|v| v.abs() < 1e-12) {
            break;
        }
    }
    theta
}

#[test]
fn poisson_fit_equals_pseudo_score_root() {
    let model = GibbsModel::poisson(vec![Covariate::X { scale: 1.0 }]);
    let x = uniform(120, 9);
    let scheme = QuadratureScheme::grid(x.window(), 50, 50).unwrap();
    let fit = fit_semi_optimal(&model, &x, &scheme, &SemiOptimalConfig::default()).unwrap();
    let root = pseudo_score_root(&model, &x, &scheme, vec![4.0, 0.0]);
    for (a, b) in fit.theta_hat.iter().zip(&root) {
        assert!((a - b).abs() <= 1e-6, "{:?} vs {root:?}", fit.theta_hat);
    }
    assert!(fit.report.iterations <= 2);
    assert!(fit.report.fallback_used.is_none());
    let s = pseudo_score(&model.instance(fit.theta_hat.clone()).unwrap(), &x, &scheme);
    assert!(s.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn strauss_fit_converges() {
    let model = GibbsModel::strauss(0.08).unwrap();
    let x = spaced(70, 0.02, 10);
    let scheme = QuadratureScheme::grid(x.window(), 50, 50).unwrap();
    let fit = fit_semi_optimal(&model, &x, &scheme, &SemiOptimalConfig::default()).unwrap();
    assert!(fit.report.fallback_used.is_none());
    assert!(fit.report.positive_definite);
    let ef = semi_optimal_ef(&model.instance(fit.theta_hat.clone()).unwrap(), &x, &scheme).unwrap();
    let tol = 1e-6 * (1.0 + fit.trace[0].norm);
    assert!(ef.value.iter().all(|v| v.abs() <= tol));
}

#[test]
fn symmetrised_system_residual_is_at_rounding_level() {
    let inst = strauss_hc();
    let x = spaced(25, 0.03, 4);
    let scheme = QuadratureScheme::grid(x.window(), 30, 30).unwrap();
    let sol = solve_semi_optimal(&inst, &x, &scheme).unwrap();
    let k = build_kernel_matrix(&inst, &x, &scheme).unwrap();
    let g: Vec<f64> = scheme
        .nodes()
        .iter()
        .zip(scheme.weights())
        .map(|(u, w)| (w * inst.conditional_intensity(u, x.points())).sqrt())
        .collect();
    for c in 0..2 {
        let z: Vec<f64> = (0..scheme.len()).map(|i| g[i] * sol.node_values[(i, c)]).collect();
        let ell: Vec<f64> = (0..scheme.len())
            .map(|i| g[i] * inst.model().sufficient_statistic(&scheme.nodes()[i], x.points())[c])
            .collect();
        let scale = ell.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..scheme.len() {
            let tz: f64 = k.row(i).map(|(j, v)| v * z[j]).sum();
            let r = z[i] + tz - ell[i];
            assert!(r.abs() <= 1e-10 * scale, "row {i}: residual {r}");
        }
    }
}

fn simulated_strauss(seed: u64) -> (GibbsModel, PointPattern) {
    let model = GibbsModel::strauss(0.08).unwrap();
    let inst = model.instance(vec![100f64.ln(), 0.2f64.ln()]).unwrap();
    let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
    (model, sample_gibbs(&inst, &Window::unit_square(), &cfg).unwrap())
}

#[test]
fn estimates_are_stable_under_grid_refinement() {
    let (model, x) = simulated_strauss(21);
    let fit = |n| {
        let scheme = QuadratureScheme::grid(x.window(), n, n).unwrap();
        fit_semi_optimal(&model, &x, &scheme, &SemiOptimalConfig::default()).unwrap().theta_hat
    };
    let (a, b) = (fit(50), fit(75));
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 0.05 * v.abs(), "{a:?} vs {b:?}");
    }
}

#[test]
fn evaluation_cost_grows_with_points_and_grid() {
    let (model, x) = simulated_strauss(22);
    let inst = model.instance(vec![100f64.ln(), 0.2f64.ln()]).unwrap();
    let few = PointPattern::new(x.points()[..x.len() / 4].to_vec(), x.window().clone()).unwrap();
    let time = |y: &PointPattern, n: usize| {
        let scheme = QuadratureScheme::grid(y.window(), n, n).unwrap();
        (0..3)
            .map(|_| {
                let t = std::time::Instant::now();
                semi_optimal_ef(&inst, y, &scheme).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    assert!(time(&x, 40) > time(&few, 40));
    assert!(time(&x, 60) > time(&x, 30));
}
