//! Estimation for spatial Gibbs point processes.
//!
//! Two Takacs-Fiksel estimators are provided: the pseudolikelihood, fitted
//! through a logistic regression with stratified dummy points, and the
//! semi-optimal estimator whose weight function solves a Fredholm equation of
//! the second kind for every leave-one-out configuration. The Fredholm
//! equation is discretised by the Nystrom method and the resulting sparse
//! symmetric system is solved by an envelope Cholesky factorisation.

pub mod config;
pub mod error;
pub mod estimate_pl;
pub mod estimate_so;
pub mod fit;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod model;
pub mod quadrature;
pub mod replicated;
pub mod report;
pub mod seed;
pub mod simulate;
pub mod study;

pub use error::{Error, Result};
pub use geometry::{CovariateField, Mask, Point, PointPattern, Rect, Window};
pub use model::{Covariate, GibbsModel, Interaction, ModelInstance, ParameterVector};
pub use quadrature::{DummyPattern, QuadratureScheme};
pub use simulate::{sample_gibbs, sample_many, SamplerConfig};
