//! Built-in classical problems, selected by name from scenario files.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::problem::{ControlProblem, ControlSet, FnDynamics, QuadraticCost, TimeGrid};

pub const CLASSICAL: [&str; 4] = ["linear-scalar", "double-integrator", "bilinear", "van-der-pol"];

/// Scalar parameters of a scenario; missing keys fall back to defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, f64>);

impl Params {
    pub fn get(&self, key: &str, default: f64) -> f64 {
        self.0.get(key).copied().unwrap_or(default)
    }

    fn check(&self, scenario: &str, allowed: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::InvalidInput(format!("unknown parameter `{k}` for scenario {scenario}"))),
            None => Ok(()),
        }
    }
}

/// Everything a scenario needs besides its name.
#[derive(Debug, Clone)]
pub struct Setup {
    pub params: Params,
    pub target: Option<Vec<f64>>,
    pub horizon: TimeGrid,
    pub control_set: ControlSet,
    pub initial_state: Vec<f64>,
}

pub fn default_target(name: &str) -> Option<Vec<f64>> {
    match name {
        "linear-scalar" => Some(vec![0.2]),
        "double-integrator" | "van-der-pol" => Some(vec![0.0, 0.0]),
        "bilinear" => Some(vec![0.0, 0.5]),
        _ => None,
    }
}

fn target_of(name: &str, setup: &Setup, dim: usize) -> Result<Vec<f64>> {
    let z = setup.target.clone().or_else(|| default_target(name)).unwrap_or_else(|| vec![0.0; dim]);
    if z.len() != dim {
        return Err(Error::DimensionMismatch(format!("{name} needs a target of dimension {dim}")));
    }
    Ok(z)
}

/// Builds the classical scenario `name`.
pub fn classical(name: &str, setup: &Setup) -> Result<ControlProblem> {
    let p = &setup.params;
    let (dynamics, cost): (FnDynamics, QuadraticCost) = match name {
        // ẋ = a x + b u, ℓ = ½(x − z)²
        "linear-scalar" => {
            p.check(name, &["a", "b"])?;
            let (a, b) = (p.get("a", -0.5), p.get("b", 1.0));
            let dynamics = FnDynamics::new(1, 1, move |_, x, u, o| o[0] = a * x[0] + b * u[0], move |_, _, _, j| j[0] = a)
                .state_affine(true);
            (dynamics, QuadraticCost::isotropic(0.5, target_of(name, setup, 1)?))
        }
        // ẋ₁ = x₂, ẋ₂ = u, ℓ = |x − z|²
        "double-integrator" => {
            p.check(name, &[])?;
            let dynamics = FnDynamics::new(
                2,
                1,
                |_, x, u, o| {
                    o[0] = x[1];
                    o[1] = u[0];
                },
                |_, _, _, j| j.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]),
            )
            .state_affine(true);
            (dynamics, QuadraticCost::isotropic(1.0, target_of(name, setup, 2)?))
        }
        // ẋ = (A + u B) x with A a damped rotation and B = diag(0, 1)
        "bilinear" => {
            p.check(name, &["omega", "damping"])?;
            let (w, d) = (p.get("omega", 1.0), p.get("damping", 0.1));
            let dynamics = FnDynamics::new(
                2,
                1,
                move |_, x, u, o| {
                    o[0] = -d * x[0] + w * x[1];
                    o[1] = -w * x[0] + (u[0] - d) * x[1];
                },
                move |_, _, u, j| j.copy_from_slice(&[-d, w, -w, u[0] - d]),
            )
            .state_affine(true);
            (dynamics, QuadraticCost::isotropic(0.5, target_of(name, setup, 2)?))
        }
        // ẋ₁ = x₂, ẋ₂ = −x₁ + μ(1 − x₁²)x₂ + u, ℓ = ½|x − z|²
        "van-der-pol" => {
            p.check(name, &["mu"])?;
            let mu = p.get("mu", 0.5);
            let dynamics = FnDynamics::new(
                2,
                1,
                move |_, x, u, o| {
                    o[0] = x[1];
                    o[1] = -x[0] + mu * (1.0 - x[0] * x[0]) * x[1] + u[0];
                },
                move |_, x, _, j| {
                    j.copy_from_slice(&[0.0, 1.0, -1.0 - 2.0 * mu * x[0] * x[1], mu * (1.0 - x[0] * x[0])])
                },
            );
            (dynamics, QuadraticCost::isotropic(0.5, target_of(name, setup, 2)?))
        }
        other => return Err(Error::InvalidInput(format!("unknown scenario `{other}`"))),
    };
    ControlProblem::new(
        Arc::new(dynamics),
        Arc::new(cost),
        setup.control_set.clone(),
        setup.horizon,
        setup.initial_state.clone(),
    )
}

/// A plain setup for `name` with its usual horizon, bounds and initial state.
pub fn default_setup(name: &str) -> Result<Setup> {
    let (t_final, n_steps, x0) = match name {
        "linear-scalar" => (1.0, 200, vec![1.0]),
        "double-integrator" => (3.0, 400, vec![1.0, 0.0]),
        "bilinear" => (2.0, 400, vec![1.0, 0.0]),
        "van-der-pol" => (2.0, 400, vec![1.0, 0.0]),
        other => return Err(Error::InvalidInput(format!("unknown scenario `{other}`"))),
    };
    let control_set = ControlSet::symmetric_box(1, 1.0)?;
    Ok(Setup {
        params: Params::default(),
        target: None,
        horizon: TimeGrid::new(0.0, t_final, n_steps)?,
        control_set,
        initial_state: x0,
    })
}

/// `ℓ = ½ (x − z)ᵀ W (x − z)` helper for callers that assemble their own problems.
pub fn quadratic(weight: &[f64], target: Vec<f64>) -> Result<QuadraticCost> {
    let n = target.len();
    if weight.len() != n * n {
        return Err(Error::DimensionMismatch("weight must be n × n".into()));
    }
    QuadraticCost::new(DMatrix::from_row_slice(n, n, weight), target)
}
