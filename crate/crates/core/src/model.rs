//! Exponential-family pairwise-interaction Gibbs models.
//!
//! The conditional intensity has the form `lambda(u, y) = H(u, y) exp(theta . t(u, y))`
//! with `t(u, y) = (1, covariates(u), interaction counts)`. Interaction counts are
//! sums over neighbours of a pair potential that adds one to a single coordinate,
//! which covers the Poisson, Strauss, Strauss hard core and multiscale hard core
//! models. The coordinate layout is always `[intercept, covariates.., interactions..]`.

use std::ops::{Deref, Range};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CovariateField, Point, Rect, Window};

/// Canonical parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(v) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite parameter {v}")));
        }
        Ok(ParameterVector(theta))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A location function entering the log conditional intensity linearly.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariate {
    /// Nearest-cell raster lookup, multiplied by `scale`.
    Raster {
        field: Arc<CovariateField>,
        scale: f64,
    },
    /// First coordinate of the location, multiplied by `scale`.
    X { scale: f64 },
    /// Second coordinate of the location, multiplied by `scale`.
    Y { scale: f64 },
}

impl Covariate {
    pub fn raster(field: CovariateField, scale: f64) -> Self {
        Covariate::Raster {
            field: Arc::new(field),
            scale,
        }
    }

    #[inline]
    pub fn value(&self, u: &Point) -> f64 {
        match self {
            Covariate::Raster { field, scale } => scale * field.value(u),
            Covariate::X { scale } => scale * u.x,
            Covariate::Y { scale } => scale * u.y,
        }
    }
}

/// Pairwise interaction structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Interaction {
    None,
    /// One coordinate counting neighbours closer than `range`.
    Strauss { range: f64 },
    /// Neighbours closer than `inner`, and neighbours in `[inner, range)`.
    Multiscale { inner: f64, range: f64 },
}

impl Interaction {
    pub fn dim(&self) -> usize {
        match self {
            Interaction::None => 0,
            Interaction::Strauss { .. } => 1,
            Interaction::Multiscale { .. } => 2,
        }
    }

    pub fn range(&self) -> f64 {
        match *self {
            Interaction::None => 0.0,
            Interaction::Strauss { range } | Interaction::Multiscale { range, .. } => range,
        }
    }

    /// Boundary between the two bands of a multiscale interaction.
    pub fn inner(&self) -> Option<f64> {
        match *self {
            Interaction::Multiscale { inner, .. } => Some(inner),
            _ => None,
        }
    }
}

/// Effect of one neighbour at a given distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PairEffect {
    /// Interaction coordinate (local index) incremented by the neighbour.
    pub coord: Option<u8>,
    /// Neighbour violates the hard core.
    pub blocked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsModel {
    covariates: Vec<Covariate>,
    interaction: Interaction,
    hard_core: Option<f64>,
    kernel_clamp: Vec<bool>,
}

impl GibbsModel {
    fn build(covariates: Vec<Covariate>, interaction: Interaction, hard_core: f64) -> Result<Self> {
        if !(hard_core >= 0.0) || !hard_core.is_finite() {
            return Err(Error::InvalidModel(format!("hard core distance {hard_core}")));
        }
        match interaction {
            Interaction::None => {}
            Interaction::Strauss { range } => {
                if !(range > 0.0 && range.is_finite()) {
                    return Err(Error::InvalidModel(format!("interaction range {range}")));
                }
                if hard_core >= range {
                    return Err(Error::InvalidModel(format!(
                        "hard core {hard_core} must be below the range {range}"
                    )));
                }
            }
            Interaction::Multiscale { inner, range } => {
                if !(inner > hard_core && range > inner && range.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "need hard core {hard_core} < r {inner} < R {range}"
                    )));
                }
            }
        }
        let p = 1 + covariates.len() + interaction.dim();
        Ok(GibbsModel {
            covariates,
            interaction,
            hard_core: (hard_core > 0.0).then_some(hard_core),
            kernel_clamp: vec![false; p],
        })
    }

    /// Inhomogeneous Poisson process with log-linear trend.
    pub fn poisson(covariates: Vec<Covariate>) -> Self {
        Self::build(covariates, Interaction::None, 0.0).expect("poisson model is always valid")
    }

    pub fn strauss(range: f64) -> Result<Self> {
        Self::build(vec![], Interaction::Strauss { range }, 0.0)
    }

    pub fn strauss_hard_core(delta: f64, range: f64) -> Result<Self> {
        Self::build(vec![], Interaction::Strauss { range }, delta)
    }

    /// `t(u, y) = (1, d(u), s_r(u, y), s_{r,R}(u, y))` with hard core `delta`.
    pub fn multiscale_hard_core(delta: f64, r: f64, range: f64, d: Covariate) -> Result<Self> {
        Self::build(vec![d], Interaction::Multiscale { inner: r, range }, delta)
    }

    /// General constructor for any trend/interaction/hard-core combination.
    pub fn new(covariates: Vec<Covariate>, interaction: Interaction, hard_core: f64) -> Result<Self> {
        Self::build(covariates, interaction, hard_core)
    }

    /// Clamp the listed coordinates to be non-positive inside the operator kernel.
    pub fn with_kernel_clamp(mut self, coords: &[usize]) -> Result<Self> {
        let p = self.dim();
        for &c in coords {
            if c >= p {
                return Err(Error::InvalidModel(format!(
                    "kernel clamp coordinate {c} out of range for p = {p}"
                )));
            }
            self.kernel_clamp[c] = true;
        }
        Ok(self)
    }

    /// Clamp every interaction coordinate inside the kernel.
    pub fn with_interaction_clamp(self) -> Self {
        let coords: Vec<usize> = self.interaction_coords().collect();
        self.with_kernel_clamp(&coords).expect("interaction coordinates are in range")
    }

    pub fn kernel_clamp(&self) -> &[bool] {
        &self.kernel_clamp
    }

    /// True when every interaction coordinate is already clamped.
    pub fn interaction_fully_clamped(&self) -> bool {
        self.interaction_coords().all(|c| self.kernel_clamp[c])
    }

    pub fn dim(&self) -> usize {
        1 + self.covariates.len() + self.interaction.dim()
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn interaction(&self) -> Interaction {
        self.interaction
    }

    pub fn hard_core(&self) -> Option<f64> {
        self.hard_core
    }

    /// Distance beyond which points do not interact.
    pub fn range(&self) -> f64 {
        self.interaction.range().max(self.hard_core.unwrap_or(0.0))
    }

    /// Indices of the interaction coordinates in `theta`.
    pub fn interaction_coords(&self) -> Range<usize> {
        let q = 1 + self.covariates.len();
        q..q + self.interaction.dim()
    }

    /// Replaces raster covariates with `field`, keeping their scale factors.
    pub fn with_covariate_field(&self, field: &Arc<CovariateField>) -> Self {
        let mut m = self.clone();
        for c in &mut m.covariates {
            if let Covariate::Raster { field: f, .. } = c {
                *f = Arc::clone(field);
            }
        }
        m
    }

    #[inline]
    pub(crate) fn pair_effect(&self, d2: f64) -> PairEffect {
        let blocked = self.hard_core.is_some_and(|h| d2 <= h * h);
        let coord = match self.interaction {
            Interaction::None => None,
            Interaction::Strauss { range } => (d2 < range * range).then_some(0),
            Interaction::Multiscale { inner, range } => {
                if d2 < inner * inner {
                    Some(0)
                } else if d2 < range * range {
                    Some(1)
                } else {
                    None
                }
            }
        };
        PairEffect { coord, blocked }
    }

    /// Trend part `(1, covariates(u))` written into `out`.
    #[inline]
    pub(crate) fn trend_into(&self, u: &Point, out: &mut [f64]) {
        out[0] = 1.0;
        for (o, c) in out[1..].iter_mut().zip(&self.covariates) {
            *o = c.value(u);
        }
    }

    /// Interaction counts of `u` against `y`, or `None` if the hard core is violated.
    #[inline]
    pub(crate) fn local_counts<'a>(
        &self,
        u: &Point,
        y: impl IntoIterator<Item = &'a Point>,
    ) -> Option<[u32; 2]> {
        let mut counts = [0u32; 2];
        let range2 = self.range() * self.range();
        for v in y {
            let d2 = u.dist2(v);
            if d2 >= range2 {
                continue;
            }
            let e = self.pair_effect(d2);
            if e.blocked {
                return None;
            }
            if let Some(k) = e.coord {
                counts[k as usize] += 1;
            }
        }
        Some(counts)
    }

    /// Sufficient statistic `t(u, y)`; counts are computed even where the hard core is violated.
    pub fn sufficient_statistic(&self, u: &Point, y: &[Point]) -> Vec<f64> {
        let mut t = vec![0.0; self.dim()];
        self.trend_into(u, &mut t);
        let q = 1 + self.covariates.len();
        let range2 = self.range() * self.range();
        for v in y {
            let d2 = u.dist2(v);
            if d2 < range2 {
                if let Some(k) = self.pair_effect(d2).coord {
                    t[q + k as usize] += 1.0;
                }
            }
        }
        t
    }

    /// `H(u, y)`: false when some point of `y` lies within the hard core distance of `u`.
    pub fn hard_core_indicator(&self, u: &Point, y: &[Point]) -> bool {
        match self.hard_core {
            None => true,
            Some(h) => y.iter().all(|v| u.dist2(v) > h * h),
        }
    }

    /// `H(y)`: true when all pairs of `y` respect the hard core.
    pub fn pattern_feasible(&self, y: &[Point]) -> bool {
        match self.hard_core {
            None => true,
            Some(h) => crate::geometry::min_interpoint_distance(y).is_none_or(|d| d > h),
        }
    }

    /// Per-pair contribution to `t`: a unit vector on the interaction coordinate, or zero.
    pub fn pair_potential(&self, u: &Point, v: &Point) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        if let Some(k) = self.pair_effect(u.dist2(v)).coord {
            out[self.interaction_coords().start + k as usize] = 1.0;
        }
        out
    }

    /// Rejects parameter values for which the density is not normalisable.
    pub fn check_existence(&self, theta: &[f64]) -> Result<()> {
        if self.hard_core.is_none() {
            if let Some(c) = self.interaction_coords().find(|&c| theta[c] > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "theta[{c}] = {} > 0 without a hard core: the model does not exist",
                    theta[c]
                )));
            }
        }
        Ok(())
    }

    pub fn instance(&self, theta: Vec<f64>) -> Result<ModelInstance> {
        ModelInstance::new(self.clone(), ParameterVector::new(theta)?)
    }
}

/// A model with a fixed parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInstance {
    model: GibbsModel,
    theta: ParameterVector,
    /// `exp(theta_k)` per interaction coordinate, unclamped and clamped.
    ratio: [f64; 2],
    ratio_clamped: [f64; 2],
}

impl ModelInstance {
    pub fn new(model: GibbsModel, theta: ParameterVector) -> Result<Self> {
        if theta.len() != model.dim() {
            return Err(Error::InvalidModel(format!(
                "parameter vector has length {}, model needs {}",
                theta.len(),
                model.dim()
            )));
        }
        let mut ratio = [1.0; 2];
        let mut ratio_clamped = [1.0; 2];
        for (k, c) in model.interaction_coords().enumerate() {
            ratio[k] = theta[c].exp();
            let clamped = if model.kernel_clamp[c] {
                theta[c].min(0.0)
            } else {
                theta[c]
            };
            ratio_clamped[k] = clamped.exp();
        }
        Ok(ModelInstance {
            model,
            theta,
            ratio,
            ratio_clamped,
        })
    }

    pub fn model(&self) -> &GibbsModel {
        &self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Same model, different parameters.
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        ModelInstance::new(self.model.clone(), ParameterVector::new(theta.to_vec())?)
    }

    /// `theta . trend(u)`.
    #[inline]
    pub(crate) fn trend_eta(&self, u: &Point) -> f64 {
        let covs = self.model.covariates();
        let mut eta = self.theta[0];
        for (c, th) in covs.iter().zip(&self.theta[1..]) {
            eta += th * c.value(u);
        }
        eta
    }

    /// Log intensity from trend value and interaction counts.
    #[inline]
    pub(crate) fn eta_from_counts(&self, trend_eta: f64, counts: [u32; 2]) -> f64 {
        let q = self.model.interaction_coords().start;
        let mut eta = trend_eta;
        for k in 0..self.model.interaction.dim() {
            eta += self.theta[q + k] * counts[k] as f64;
        }
        eta
    }

    /// `log lambda(u, y)`, or `None` where the hard core forces zero intensity.
    pub fn log_conditional_intensity(&self, u: &Point, y: &[Point]) -> Option<f64> {
        let counts = self.model.local_counts(u, y)?;
        Some(self.eta_from_counts(self.trend_eta(u), counts))
    }

    /// Papangelou conditional intensity `lambda(u, y)`.
    pub fn conditional_intensity(&self, u: &Point, y: &[Point]) -> f64 {
        self.log_conditional_intensity(u, y).map_or(0.0, f64::exp)
    }

    /// `d lambda / d theta = lambda t(u, y)`; zero where the hard core is violated.
    pub fn intensity_gradient(&self, u: &Point, y: &[Point]) -> Vec<f64> {
        let lambda = self.conditional_intensity(u, y);
        if lambda == 0.0 {
            return vec![0.0; self.model.dim()];
        }
        let mut t = self.model.sufficient_statistic(u, y);
        t.iter_mut().for_each(|v| *v *= lambda);
        t
    }

    #[inline]
    pub(crate) fn ratio_for(&self, effect: PairEffect, clamped: bool) -> f64 {
        if effect.blocked {
            return 0.0;
        }
        match effect.coord {
            None => 1.0,
            Some(k) if clamped => self.ratio_clamped[k as usize],
            Some(k) => self.ratio[k as usize],
        }
    }

    /// `lambda(v, y + u) / lambda(v, y) = exp(psi(u, v))`, zero inside the hard core.
    pub fn interaction_ratio(&self, u: &Point, v: &Point) -> f64 {
        self.ratio_for(self.model.pair_effect(u.dist2(v)), false)
    }

    /// Interaction ratio with the kernel clamp applied.
    pub fn interaction_ratio_clamped(&self, u: &Point, v: &Point) -> f64 {
        self.ratio_for(self.model.pair_effect(u.dist2(v)), true)
    }

    /// Operator kernel `t(u, v, y) = lambda(v, y) (1 - ratio(u, v))`.
    pub fn operator_kernel(&self, u: &Point, v: &Point, y: &[Point]) -> f64 {
        let range = self.model.range();
        if u.dist2(v) >= range * range {
            return 0.0;
        }
        let lambda_v = self.conditional_intensity(v, y);
        if lambda_v == 0.0 {
            return 0.0;
        }
        lambda_v * (1.0 - self.interaction_ratio_clamped(u, v))
    }

    /// `integral over W of exp(theta . trend(u)) du`, the mean count without interaction.
    pub fn poisson_mass(&self, window: &Window) -> f64 {
        const N: usize = 64;
        let rect: &Rect = window.bounds();
        let cw = rect.width() / N as f64;
        let ch = rect.height() / N as f64;
        let mut total = 0.0;
        for iy in 0..N {
            for ix in 0..N {
                let u = Point::new(
                    rect.xmin + (ix as f64 + 0.5) * cw,
                    rect.ymin + (iy as f64 + 0.5) * ch,
                );
                if window.contains(&u) {
                    total += self.trend_eta(&u).exp();
                }
            }
        }
        total * cw * ch
    }
}
