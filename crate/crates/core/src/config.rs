//! Scenario files: TOML with `[problem]`, `[grid]`, `[control_set]`,
//! `[initial]` and optional `[descent]` / `[meanfield]` sections.
//!
//! ```toml
//! seed = 0
//! [problem]
//! name = "double-integrator"
//! target = [0.0, 0.0]
//! [grid]
//! t0 = 0.0
//! T = 3.0
//! n_steps = 400
//! [control_set]
//! kind = "box"
//! lower = [-1.0]
//! upper = [1.0]
//! [initial]
//! x0 = [1.0, 0.0]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::descent::DescentConfig;
use crate::meanfield::models::{self, MfSetup};
use crate::meanfield::{MeanFieldProblem, ParticleEnsemble};
use crate::problem::{Control, ControlProblem, ControlSet, TerminalCost, TimeGrid};
use crate::scenarios::{self, Params, Setup};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::Error> for ConfigError {
    fn from(e: crate::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    problem: RawProblem,
    grid: RawGrid,
    control_set: RawSet,
    #[serde(default)]
    initial: RawInitial,
    #[serde(default)]
    descent: Option<DescentConfig>,
    #[serde(default)]
    meanfield: Option<RawMeanField>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    name: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    target: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(default)]
    t0: f64,
    #[serde(rename = "T")]
    t_final: f64,
    n_steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSet {
    kind: String,
    #[serde(default)]
    lower: Option<Vec<f64>>,
    #[serde(default)]
    upper: Option<Vec<f64>>,
    #[serde(default)]
    atoms: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    #[serde(default)]
    x0: Option<Vec<f64>>,
    #[serde(default)]
    u0: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeanField {
    #[serde(rename = "N")]
    particles: usize,
    #[serde(default = "one")]
    dim: usize,
    init: String,
}

fn one() -> usize {
    1
}

/// Initial ensemble recipe.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// Seed `None` falls back to the scenario seed.
    Gaussian { mean: f64, std: f64, seed: Option<u64> },
    Grid { lo: f64, hi: f64 },
}

impl InitSpec {
    pub fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        let open = text.find('(')?;
        let inner = text.strip_suffix(')')?[open + 1..].trim();
        let args: Vec<&str> = if inner.is_empty() { vec![] } else { inner.split(',').map(str::trim).collect() };
        let float = |s: &str| s.parse::<f64>().ok();
        match (&text[..open], args.as_slice()) {
            ("gaussian", [m, s]) => Some(InitSpec::Gaussian { mean: float(m)?, std: float(s)?, seed: None }),
            ("gaussian", [m, s, seed]) => {
                Some(InitSpec::Gaussian { mean: float(m)?, std: float(s)?, seed: Some(seed.parse().ok()?) })
            }
            ("grid", [lo, hi]) => Some(InitSpec::Grid { lo: float(lo)?, hi: float(hi)? }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSection {
    pub particles: usize,
    pub dim: usize,
    pub init: InitSpec,
}

/// A parsed scenario file.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// File stem, used to label reports.
    pub id: String,
    pub seed: u64,
    pub name: String,
    pub params: Params,
    pub target: Option<Vec<f64>>,
    pub grid: TimeGrid,
    pub control_set: ControlSet,
    pub x0: Option<Vec<f64>>,
    pub u0: Option<Vec<f64>>,
    pub descent: DescentConfig,
    pub meanfield: Option<MeanFieldSection>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let id = path.file_stem().map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned());
        Self::parse(&text, &id).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            ConfigError::Invalid(message) => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn parse(text: &str, id: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::from(id), message: e.to_string() })?;
        let grid = TimeGrid::new(raw.grid.t0, raw.grid.t_final, raw.grid.n_steps)?;
        let control_set = match raw.control_set.kind.as_str() {
            "box" => match (raw.control_set.lower, raw.control_set.upper) {
                (Some(lo), Some(hi)) => ControlSet::new_box(lo, hi)?,
                _ => return Err(ConfigError::Invalid("box control set needs `lower` and `upper`".into())),
            },
            "atoms" => match raw.control_set.atoms {
                Some(atoms) => ControlSet::new_atoms(atoms)?,
                None => return Err(ConfigError::Invalid("atom control set needs `atoms`".into())),
            },
            other => return Err(ConfigError::Invalid(format!("unknown control set kind `{other}`"))),
        };
        let descent = raw.descent.unwrap_or_default();
        descent.validate()?;
        let meanfield = match raw.meanfield {
            None => None,
            Some(mf) => {
                let init = InitSpec::parse(&mf.init)
                    .ok_or_else(|| ConfigError::Invalid(format!("cannot parse init `{}`", mf.init)))?;
                if mf.particles == 0 || mf.dim == 0 {
                    return Err(ConfigError::Invalid("`N` and `dim` must be positive".into()));
                }
                Some(MeanFieldSection { particles: mf.particles, dim: mf.dim, init })
            }
        };
        let known = if meanfield.is_some() { &models::MEAN_FIELD[..] } else { &scenarios::CLASSICAL[..] };
        if !known.contains(&raw.problem.name.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown problem `{}` (expected one of {})",
                raw.problem.name,
                known.join(", ")
            )));
        }
        if meanfield.is_none() && raw.initial.x0.is_none() {
            return Err(ConfigError::Invalid("`[initial] x0` is required".into()));
        }
        let scenario = Self {
            id: id.to_string(),
            seed: raw.seed,
            name: raw.problem.name,
            params: Params(raw.problem.params),
            target: raw.problem.target,
            grid,
            control_set,
            x0: raw.initial.x0,
            u0: raw.initial.u0,
            descent,
            meanfield,
        };
        // surface dimension and parameter errors at load time
        if scenario.is_meanfield() {
            scenario.meanfield_problem()?;
        } else {
            scenario.classical_problem()?;
        }
        scenario.initial_control(&scenario.grid)?;
        Ok(scenario)
    }

    pub fn is_meanfield(&self) -> bool {
        self.meanfield.is_some()
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        self.grid = self.grid.with_steps(n_steps)?;
        Ok(self)
    }

    pub fn with_particles(mut self, particles: usize) -> Result<Self> {
        match &mut self.meanfield {
            Some(mf) if particles > 0 => mf.particles = particles,
            Some(_) => return Err(ConfigError::Invalid("particle count must be positive".into())),
            None => return Err(ConfigError::Invalid("--particles needs a [meanfield] scenario".into())),
        }
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn classical_problem(&self) -> Result<ControlProblem> {
        let x0 = self.x0.clone().ok_or_else(|| ConfigError::Invalid("`[initial] x0` is required".into()))?;
        let setup = Setup {
            params: self.params.clone(),
            target: self.target.clone(),
            horizon: self.grid,
            control_set: self.control_set.clone(),
            initial_state: x0,
        };
        Ok(scenarios::classical(&self.name, &setup)?)
    }

    pub fn initial_ensemble(&self) -> Result<ParticleEnsemble> {
        let mf = self.meanfield.as_ref().ok_or_else(|| ConfigError::Invalid("no [meanfield] section".into()))?;
        Ok(match mf.init {
            InitSpec::Gaussian { mean, std, seed } => {
                ParticleEnsemble::gaussian(mf.dim, mf.particles, mean, std, seed.unwrap_or(self.seed))?
            }
            InitSpec::Grid { lo, hi } => ParticleEnsemble::grid(mf.dim, mf.particles, lo, hi)?,
        })
    }

    pub fn meanfield_problem(&self) -> Result<MeanFieldProblem> {
        let setup = MfSetup {
            params: self.params.clone(),
            target: self.target.clone(),
            horizon: self.grid,
            control_set: self.control_set.clone(),
            initial: self.initial_ensemble()?,
        };
        Ok(models::meanfield(&self.name, &setup)?)
    }

    /// `u0` held constant, or the control set's default value.
    pub fn initial_control(&self, grid: &TimeGrid) -> Result<Control> {
        let value = self.u0.clone().unwrap_or_else(|| self.control_set.default_value());
        Ok(Control::admissible(*grid, vec![value; grid.n_steps()], &self.control_set)?)
    }

    /// Classical problem with `ℓ` replaced, e.g. for fault injection.
    pub fn classical_with_cost(&self, cost: Arc<dyn TerminalCost>) -> Result<ControlProblem> {
        Ok(self.classical_problem()?.with_cost(cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DI: &str = r#"
seed = 3
[problem]
name = "double-integrator"
target = [0.0, 0.0]
[grid]
T = 3.0
n_steps = 400
[control_set]
kind = "box"
lower = [-1.0]
upper = [1.0]
[initial]
x0 = [1.0, 0.0]
"#;

    #[test]
    fn parses_classical_file() {
        let s = Scenario::parse(DI, "di").unwrap();
        assert_eq!((s.seed, s.grid.n_steps(), s.name.as_str()), (3, 400, "double-integrator"));
        assert!(!s.is_meanfield());
        let p = s.classical_problem().unwrap();
        assert_eq!(p.state_dim(), 2);
        assert_eq!(s.clone().with_steps(100).unwrap().grid.n_steps(), 100);
        assert!(s.with_particles(10).is_err());
    }

    #[test]
    fn parses_meanfield_file() {
        let text = r#"
[problem]
name = "mf-interaction"
params = { alpha = 0.5 }
[grid]
T = 1.0
n_steps = 50
[control_set]
kind = "box"
lower = [-1.0]
upper = [1.0]
[meanfield]
N = 20
init = "gaussian(0.0, 0.5)"
"#;
        let s = Scenario::parse(text, "mf").unwrap();
        assert_eq!(s.meanfield_problem().unwrap().particles(), 20);
        let s = s.with_particles(7).unwrap();
        assert_eq!(s.initial_ensemble().unwrap().len(), 7);
    }

    #[test]
    fn init_specs() {
        assert_eq!(InitSpec::parse("grid(-1, 1)"), Some(InitSpec::Grid { lo: -1.0, hi: 1.0 }));
        assert_eq!(
            InitSpec::parse("gaussian(0.5,0.1,9)"),
            Some(InitSpec::Gaussian { mean: 0.5, std: 0.1, seed: Some(9) })
        );
        assert_eq!(InitSpec::parse("uniform(0,1)"), None);
        assert_eq!(InitSpec::parse("grid(0)"), None);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Scenario::parse("[problem", "x"), Err(ConfigError::Parse { .. })));
        for (from, to) in [
            ("double-integrator", "rocket"),
            ("kind = \"box\"", "kind = \"ball\""),
            ("x0 = [1.0, 0.0]", "x0 = [1.0]"),
            ("n_steps = 400", "n_steps = 0"),
            ("seed = 3", "seed = 3\ncolour = 1"),
        ] {
            let text = DI.replace(from, to);
            assert!(Scenario::parse(&text, "x").is_err(), "{from} -> {to}");
        }
    }
}
