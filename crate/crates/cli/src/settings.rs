//! Configuration file plus command-line overrides.
//!
//! The configuration file is JSON with any of the keys below; paths inside it
//! are relative to the file. Flags given on the command line win.
//!
//! ```json
//! {
//!   "model": {"type": "strauss", "R": 0.08},
//!   "theta": [4.6, -1.6],
//!   "data": "x.csv",
//!   "window": "window.json",
//!   "grid": [50, 50],
//!   "dummy_grid": [50, 50],
//!   "seed": 1,
//!   "method": "so",
//!   "fallback": "clamp-then-pl",
//!   "nsim": 100,
//!   "max_iter": 25,
//!   "rel_tol": 1e-6,
//!   "sampler": {"burn_in": 100000, "min_proposals": 100000}
//! }
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gibbsfit::config::ModelSpec;
use gibbsfit::estimate_pl::LogisticFitConfig;
use gibbsfit::estimate_so::{FallbackPolicy, SemiOptimalConfig};
use gibbsfit::fit::{GridSpec, Method};
use gibbsfit::io::read_window;
use gibbsfit::{GibbsModel, SamplerConfig, Window};
use serde::Deserialize;

use crate::Common;

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Lib(gibbsfit::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "{m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<gibbsfit::Error> for Failure {
    fn from(e: gibbsfit::Error) -> Self {
        Failure::Lib(e)
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub fn config_error<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Config(msg.into()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelSpec>,
    pub theta: Option<Vec<f64>>,
    pub data: Option<PathBuf>,
    pub window: Option<PathBuf>,
    pub grid: Option<[usize; 2]>,
    pub dummy_grid: Option<[usize; 2]>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub fallback: Option<String>,
    pub nsim: Option<usize>,
    pub max_iter: Option<usize>,
    pub rel_tol: Option<f64>,
    pub sampler: Option<SamplerConfig>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn anchored(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Makes a raster covariate path absolute against `base`.
pub fn anchor_model(mut spec: ModelSpec, base: &Path) -> ModelSpec {
    if let Some(f) = &spec.covariate_file {
        spec.covariate_file = Some(anchored(base, f));
    }
    spec
}

/// `--model` value: inline JSON or a path to a JSON file.
pub fn parse_model_arg(arg: &str) -> Outcome<ModelSpec> {
    if arg.trim_start().starts_with('{') {
        let spec = serde_json::from_str(arg).map_err(|e| Failure::Config(format!("--model: {e}")))?;
        Ok(anchor_model(spec, Path::new("")))
    } else {
        let path = Path::new(arg);
        Ok(anchor_model(read_json(path)?, &parent(path)))
    }
}

pub struct Settings {
    pub file: FileConfig,
}

impl Settings {
    pub fn load(common: &Common) -> Outcome<Self> {
        let mut file = match &common.config {
            None => FileConfig::default(),
            Some(path) => {
                let mut f: FileConfig = read_json(path)?;
                let base = parent(path);
                f.model = f.model.map(|m| anchor_model(m, &base));
                f.data = f.data.map(|p| anchored(&base, &p));
                f.window = f.window.map(|p| anchored(&base, &p));
                f
            }
        };
        if let Some(m) = &common.model {
            file.model = Some(parse_model_arg(m)?);
        }
        if let Some(t) = &common.theta {
            file.theta = Some(t.clone());
        }
        if let Some(w) = &common.window {
            file.window = Some(anchored(Path::new(""), w));
        }
        if let Some(g) = &common.grid {
            file.grid = Some([g[0], g[1]]);
        }
        if let Some(g) = &common.dummy_grid {
            file.dummy_grid = Some([g[0], g[1]]);
        }
        if common.seed.is_some() {
            file.seed = common.seed;
        }
        if common.fallback.is_some() {
            file.fallback = common.fallback.clone();
        }
        if common.nsim.is_some() {
            file.nsim = common.nsim;
        }
        Ok(Settings { file })
    }

    pub fn set_data(&mut self, data: &Option<PathBuf>) {
        if let Some(d) = data {
            self.file.data = Some(anchored(Path::new(""), d));
        }
    }

    pub fn set_method(&mut self, method: &Option<String>) {
        if method.is_some() {
            self.file.method = method.clone();
        }
    }

    pub fn model_spec(&self) -> Outcome<ModelSpec> {
        self.file.model.clone().ok_or_else(|| Failure::Config("no model given (--model or config `model`)".into()))
    }

    pub fn model(&self, window: &Window) -> Outcome<GibbsModel> {
        Ok(self.model_spec()?.build(Path::new(""), window)?)
    }

    pub fn window(&self) -> Outcome<Window> {
        match &self.file.window {
            Some(p) => Ok(read_window(p)?),
            None => Ok(Window::unit_square()),
        }
    }

    pub fn theta(&self) -> Outcome<Vec<f64>> {
        self.file.theta.clone().ok_or_else(|| Failure::Config("no parameter given (--theta or config `theta`)".into()))
    }

    pub fn data(&self) -> Outcome<PathBuf> {
        self.file.data.clone().ok_or_else(|| Failure::Config("no data file given (--data or config `data`)".into()))
    }

    pub fn method(&self) -> Outcome<Method> {
        match self.file.method.as_deref() {
            None => Ok(Method::Pl),
            Some(m) => m.parse().map_err(|e: gibbsfit::Error| Failure::Config(e.to_string())),
        }
    }

    pub fn grid(&self) -> [usize; 2] {
        self.file.grid.unwrap_or([50, 50])
    }

    pub fn dummy_grid(&self) -> [usize; 2] {
        self.file.dummy_grid.unwrap_or([50, 50])
    }

    pub fn seed(&self) -> u64 {
        self.file.seed.unwrap_or(0)
    }

    pub fn nsim(&self, default: usize) -> usize {
        self.file.nsim.unwrap_or(default)
    }

    pub fn fallback(&self) -> Outcome<FallbackPolicy> {
        match self.file.fallback.as_deref() {
            None => Ok(FallbackPolicy::default()),
            Some(f) => f.parse().map_err(|e: gibbsfit::Error| Failure::Config(e.to_string())),
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            seed,
            ..self.file.sampler.clone().unwrap_or_default()
        }
    }

    pub fn so_config(&self) -> Outcome<SemiOptimalConfig> {
        let d = SemiOptimalConfig::default();
        let [nx, ny] = self.dummy_grid();
        Ok(SemiOptimalConfig {
            max_iter: self.file.max_iter.unwrap_or(d.max_iter),
            rel_tol: self.file.rel_tol.unwrap_or(d.rel_tol),
            fallback: self.fallback()?,
            pl: LogisticFitConfig {
                dummy_grid: GridSpec::Cells(nx, ny),
                seed: self.seed(),
                ..LogisticFitConfig::default()
            },
        })
    }
}
