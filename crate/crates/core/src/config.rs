//! JSON model specifications.
//!
//! ```json
//! {"type": "strauss_hc", "delta": 0.83, "R": 3.5, "kernel_clamp": [1]}
//! ```
//!
//! `type` is one of `poisson`, `strauss`, `strauss_hc`, `multiscale_hc`.
//! A trend covariate is either `covariate_file` (ASCII raster over the window
//! bounds, resolved against `base_dir`) or `covariate` = `"x"`/`"y"`, and is
//! multiplied by `covariate_scale`. The multiscale model requires one.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::io::read_covariate;
use crate::model::{Covariate, GibbsModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    Poisson,
    Strauss,
    StraussHc,
    MultiscaleHc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateCovariate {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "type")]
    pub kind: ModelType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<CoordinateCovariate>,
    #[serde(default = "one")]
    pub covariate_scale: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernel_clamp: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn strauss(range: f64) -> Self {
        ModelSpec {
            kind: ModelType::Strauss,
            delta: None,
            r: None,
            range: Some(range),
            covariate_file: None,
            covariate: None,
            covariate_scale: 1.0,
            kernel_clamp: vec![],
        }
    }

    /// Builds the model; raster covariates are read relative to `base_dir` and
    /// span the bounding rectangle of `window`.
    pub fn build(&self, base_dir: &Path, window: &Window) -> Result<GibbsModel> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::InvalidModel(format!("model type {:?} requires `{name}`", self.kind)))
        };
        let covariate = self.covariate(base_dir, window)?;
        let model = match self.kind {
            ModelType::Poisson => GibbsModel::poisson(covariate.into_iter().collect()),
            ModelType::Strauss => GibbsModel::new(
                covariate.into_iter().collect(),
                crate::model::Interaction::Strauss { range: need(self.range, "R")? },
                0.0,
            )?,
            ModelType::StraussHc => GibbsModel::new(
                covariate.into_iter().collect(),
                crate::model::Interaction::Strauss { range: need(self.range, "R")? },
                need(self.delta, "delta")?,
            )?,
            ModelType::MultiscaleHc => {
                let d = covariate.ok_or_else(|| {
                    Error::InvalidModel("multiscale_hc requires `covariate_file` or `covariate`".into())
                })?;
                GibbsModel::multiscale_hard_core(
                    need(self.delta, "delta")?,
                    need(self.r, "r")?,
                    need(self.range, "R")?,
                    d,
                )?
            }
        };
        model.with_kernel_clamp(&self.kernel_clamp)
    }

    fn covariate(&self, base_dir: &Path, window: &Window) -> Result<Option<Covariate>> {
        let scale = self.covariate_scale;
        if !scale.is_finite() {
            return Err(Error::InvalidModel(format!("covariate_scale {scale} is not finite")));
        }
        match (&self.covariate_file, self.covariate) {
            (Some(_), Some(_)) => Err(Error::InvalidModel(
                "give at most one of `covariate_file` and `covariate`".into(),
            )),
            (Some(f), None) => {
                let path = if f.is_absolute() { f.clone() } else { base_dir.join(f) };
                let field = read_covariate(&path, *window.bounds())?;
                Ok(Some(Covariate::Raster { field: Arc::new(field), scale }))
            }
            (None, Some(CoordinateCovariate::X)) => Ok(Some(Covariate::X { scale })),
            (None, Some(CoordinateCovariate::Y)) => Ok(Some(Covariate::Y { scale })),
            (None, None) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> ModelSpec {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn builds_each_type() {
        let w = Window::unit_square();
        let dir = Path::new(".");
        assert_eq!(parse(r#"{"type":"poisson"}"#).build(dir, &w).unwrap().dim(), 1);
        assert_eq!(parse(r#"{"type":"poisson","covariate":"x"}"#).build(dir, &w).unwrap().dim(), 2);
        assert_eq!(parse(r#"{"type":"strauss","R":0.1}"#).build(dir, &w).unwrap().dim(), 2);
        let hc = parse(r#"{"type":"strauss_hc","delta":0.01,"R":0.1}"#).build(dir, &w).unwrap();
        assert_eq!(hc.hard_core(), Some(0.01));
        let ms = parse(r#"{"type":"multiscale_hc","delta":0.01,"r":0.05,"R":0.1,"covariate":"y","kernel_clamp":[3]}"#)
            .build(dir, &w)
            .unwrap();
        assert_eq!(ms.dim(), 4);
        assert_eq!(ms.kernel_clamp(), &[false, false, false, true]);
    }

    #[test]
    fn rejects_incomplete_specs() {
        let w = Window::unit_square();
        let dir = Path::new(".");
        for s in [
            r#"{"type":"strauss"}"#,
            r#"{"type":"strauss_hc","R":0.1}"#,
            r#"{"type":"multiscale_hc","delta":0.01,"r":0.05,"R":0.1}"#,
            r#"{"type":"strauss","R":0.1,"kernel_clamp":[2]}"#,
        ] {
            assert!(parse(s).build(dir, &w).is_err(), "{s}");
        }
        assert!(serde_json::from_str::<ModelSpec>(r#"{"type":"gauss"}"#).is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"type":"poisson","bogus":1}"#).is_err());
    }

    #[test]
    fn raster_covariate_is_read_relative_to_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.txt"), "2 2\n1 1\n").unwrap();
        let m = parse(r#"{"type":"poisson","covariate_file":"d.txt","covariate_scale":0.5}"#)
            .build(dir.path(), &Window::unit_square())
            .unwrap();
        let v = m.covariates()[0].value(&crate::geometry::Point::new(0.5, 0.9));
        assert_eq!(v, 1.0);
    }
}
