//! Birth-death-shift Metropolis-Hastings sampler for Gibbs models.
//!
//! The chain starts from the empty pattern. Acceptance probabilities only use
//! the conditional intensity, so states violating the hard core (zero density)
//! are never entered.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointPattern, Window};
use crate::model::ModelInstance;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Proposals after burn-in, per expected point of the trend-only intensity.
    pub sweeps: usize,
    /// Lower bound on the number of proposals after burn-in.
    pub min_proposals: usize,
    pub burn_in: usize,
    pub p_birth: f64,
    pub p_death: f64,
    pub p_shift: f64,
    /// Standard deviation of shift moves; half the interaction range when unset.
    pub shift_sd: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sweeps: 1000,
            min_proposals: 100_000,
            burn_in: 100_000,
            p_birth: 0.4,
            p_death: 0.4,
            p_shift: 0.2,
            shift_sd: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_birth, self.p_death, self.p_shift];
        if ps.iter().any(|p| !(*p >= 0.0)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "proposal probabilities {ps:?} must be non-negative and sum to one"
            )));
        }
        if self.p_birth == 0.0 || self.p_death == 0.0 {
            return Err(Error::InvalidInput("birth and death moves are both required".into()));
        }
        if self.shift_sd.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::InvalidInput("shift sd must be positive".into()));
        }
        Ok(())
    }

    fn total_proposals(&self, expected_points: f64) -> usize {
        let after = (self.sweeps as f64 * expected_points.max(1.0)).ceil() as usize;
        self.burn_in + after.max(self.min_proposals)
    }
}

/// Hastings ratio for adding `u` to `x`.
pub(crate) fn birth_ratio(inst: &ModelInstance, x: &[Point], u: &Point, area: f64, cfg: &SamplerConfig) -> f64 {
    inst.conditional_intensity(u, x) * area * cfg.p_death / ((x.len() + 1) as f64 * cfg.p_birth)
}

/// Hastings ratio for removing `x[i]`.
pub(crate) fn death_ratio(inst: &ModelInstance, x: &[Point], i: usize, area: f64, cfg: &SamplerConfig) -> f64 {
    let lambda = intensity_without(inst, x, i);
    x.len() as f64 * cfg.p_birth / (lambda * area * cfg.p_death)
}

fn intensity_without(inst: &ModelInstance, x: &[Point], i: usize) -> f64 {
    let u = &x[i];
    let rest = x[..i].iter().chain(&x[i + 1..]);
    match inst.model().local_counts(u, rest) {
        Some(c) => inst.eta_from_counts(inst.trend_eta(u), c).exp(),
        None => 0.0,
    }
}

fn uniform_in(window: &Window, rng: &mut ChaCha8Rng) -> Point {
    let r = window.bounds();
    loop {
        let p = Point::new(
            r.xmin + rng.random::<f64>() * r.width(),
            r.ymin + rng.random::<f64>() * r.height(),
        );
        if window.contains(&p) {
            return p;
        }
    }
}

/// Runs one chain and returns its final state.
pub fn sample_gibbs(inst: &ModelInstance, window: &Window, cfg: &SamplerConfig) -> Result<PointPattern> {
    cfg.validate()?;
    inst.model().check_existence(inst.theta())?;
    let area = window.area();
    let shift_sd = cfg
        .shift_sd
        .unwrap_or_else(|| 0.5 * inst.model().range())
        .max(1e-3 * window.bounds().width().min(window.bounds().height()));
    let normal = Normal::new(0.0, shift_sd).expect("positive sd");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_proposals(inst.poisson_mass(window));
    let mut x: Vec<Point> = Vec::new();

    for _ in 0..total {
        let move_u: f64 = rng.random();
        if move_u < cfg.p_birth {
            let u = uniform_in(window, &mut rng);
            let a = birth_ratio(inst, &x, &u, area, cfg);
            if rng.random::<f64>() < a {
                x.push(u);
            }
        } else if move_u < cfg.p_birth + cfg.p_death {
            if x.is_empty() {
                continue;
            }
            let i = rng.random_range(0..x.len());
            let a = death_ratio(inst, &x, i, area, cfg);
            if rng.random::<f64>() < a {
                x.swap_remove(i);
            }
        } else {
            if x.is_empty() {
                continue;
            }
            let i = rng.random_range(0..x.len());
            let v = Point::new(x[i].x + normal.sample(&mut rng), x[i].y + normal.sample(&mut rng));
            if !window.contains(&v) {
                continue;
            }
            let old = intensity_without(inst, &x, i);
            let rest = x[..i].iter().chain(&x[i + 1..]);
            let new = match inst.model().local_counts(&v, rest) {
                Some(c) => inst.eta_from_counts(inst.trend_eta(&v), c).exp(),
                None => 0.0,
            };
            if rng.random::<f64>() * old < new {
                x[i] = v;
            }
        }
    }
    Ok(PointPattern::from_sampler(x, window.clone()))
}

/// `n_sim` independent chains; chain `i` is seeded from `(cfg.seed, i)`.
pub fn sample_many(
    inst: &ModelInstance,
    window: &Window,
    cfg: &SamplerConfig,
    n_sim: usize,
) -> Result<Vec<PointPattern>> {
    (0..n_sim)
        .into_par_iter()
        .map(|i| {
            let c = SamplerConfig {
                seed: derive_seed(cfg.seed, &[i as u64]),
                ..cfg.clone()
            };
            sample_gibbs(inst, window, &c)
        })
        .collect()
}
