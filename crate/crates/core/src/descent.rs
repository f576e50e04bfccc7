//! Feedback descent by sample-and-hold synthesis of comparison controls,
//! and a conditional-gradient baseline for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, Trajectory};
use crate::linalg;
use crate::problem::{Control, ControlProblem, ControlSignal, Dynamics, TimeGrid};
use crate::report::num;
use crate::super_adjoint::{GradientField, GradientRoute};
use crate::variation::{self, minimize_hamiltonian, minimize_over_set};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub max_iters: usize,
    /// Stop once `J[ū] − J[u] < cost_tol` for `stall_iters` iterations in a row.
    pub cost_tol: f64,
    pub stall_iters: usize,
    /// Grid intervals per sample-and-hold block.
    pub sample_partition: usize,
    pub route: GradientRoute,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { max_iters: 50, cost_tol: 1e-12, stall_iters: 1, sample_partition: 1, route: GradientRoute::Auto }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.stall_iters == 0 || self.sample_partition == 0 {
            return Err(Error::InvalidInput("max_iters, stall_iters and sample_partition must be positive".into()));
        }
        if !(self.cost_tol > 0.0) {
            return Err(Error::InvalidInput(format!("cost_tol must be positive, got {}", self.cost_tol)));
        }
        Ok(())
    }
}

/// One outer iteration. `cost` is the cost of the iterate kept after the
/// iteration; a candidate that fails to lower the cost is recorded with
/// `accepted = false` and the previous iterate is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentRecord {
    pub iter: usize,
    pub cost: f64,
    pub candidate_cost: f64,
    /// `−∫ ∇p̄·[f(x, u) − f(x, ū)] dt` accumulated along the candidate.
    pub predicted_decrease: f64,
    pub realized_decrease: f64,
    /// PMP residual of the reference this iteration started from.
    pub pmp_residual: f64,
    pub accepted: bool,
    /// Cumulative, in full-horizon integrations.
    pub integrations_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_pmp_residual: f64,
    pub integrations: f64,
    pub converged: bool,
    pub records: Vec<DescentRecord>,
}

impl DescentTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Smallest realised decrease over the run; negative means a cost increase.
    pub fn worst_decrease(&self) -> f64 {
        self.records.iter().map(|r| r.realized_decrease).fold(f64::INFINITY, f64::min)
    }

    /// Cumulative integrations spent when the kept cost first dropped to
    /// `level` or below.
    pub fn integrations_to_reach(&self, level: f64) -> Option<f64> {
        if self.initial_cost <= level {
            return Some(0.0);
        }
        self.records.iter().find(|r| r.cost <= level).map(|r| r.integrations_used)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,cost,predicted,realized,residual,integrations_used\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter,
                num(r.cost),
                num(r.predicted_decrease),
                num(r.realized_decrease),
                num(r.pmp_residual),
                num(r.integrations_used)
            ));
        }
        s
    }
}

/// A single control value held over the whole grid.
struct Held<'a> {
    grid: TimeGrid,
    value: &'a [f64],
}

impl ControlSignal for Held<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn field(&self, dynamics: &dyn Dynamics, _: usize, t: f64, x: &[f64], out: &mut [f64]) {
        dynamics.field(t, x, self.value, out)
    }
    fn jacobian(&self, dynamics: &dyn Dynamics, _: usize, t: f64, x: &[f64], out: &mut [f64]) {
        dynamics.jac_x(t, x, self.value, out)
    }
}

/// Result of one sample-and-hold sweep.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub control: Control,
    pub trajectory: Trajectory,
    /// Trapezoid value of `∫ ∇p̄_t(x(t))·[f(x, u) − f(x, ū)] dt` along the
    /// new trajectory; non-positive up to quadrature error.
    pub predicted_increment: f64,
}

/// Sample-and-hold solution of the feedback condition: on each block the
/// control minimises `H(x, ∇p̄_t(x), ·)` at the block start, with `∇p̄`
/// frozen at `u_ref`, and the state is integrated across the block.
pub fn comparison_control(problem: &ControlProblem, u_ref: &Control, config: &DescentConfig) -> Result<Comparison> {
    let xbar = flow::simulate(problem, u_ref)?;
    comparison_from(problem, u_ref, &xbar, config)
}

pub(crate) fn comparison_from(
    problem: &ControlProblem,
    u_ref: &Control,
    xbar: &Trajectory,
    config: &DescentConfig,
) -> Result<Comparison> {
    config.validate()?;
    if u_ref.grid() != &problem.horizon {
        return Err(Error::DimensionMismatch("reference control is not on the problem horizon".into()));
    }
    let grid = problem.horizon;
    let steps = grid.n_steps();
    let n = problem.state_dim();
    let dynamics = problem.dynamics.as_ref();
    let field = GradientField::new(problem, u_ref, xbar, config.route)?;

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut data = Vec::with_capacity((steps + 1) * n);
    let mut x = problem.initial_state.clone();
    data.extend_from_slice(&x);
    let (mut fa, mut fb) = (vec![0.0; n], vec![0.0; n]);
    let mut gap = |k: usize, t: f64, x: &[f64], u: &[f64], psi: &[f64]| {
        dynamics.field(t, x, u, &mut fa);
        u_ref.field(dynamics, k, t, x, &mut fb);
        psi.iter().zip(fa.iter().zip(&fb)).map(|(p, (a, b))| p * (a - b)).sum::<f64>()
    };
    let half_h = 0.5 * grid.step();
    let mut predicted = 0.0;
    let mut held: Vec<f64> = Vec::new();
    for k in 0..=steps {
        let t = grid.node(k);
        let psi = field.gradient(k, &x)?;
        if k > 0 {
            predicted += half_h * gap(k - 1, t, &x, &values[k - 1], &psi);
        }
        if k == steps {
            break;
        }
        if k % config.sample_partition == 0 {
            held = minimize_hamiltonian(problem, t, &x, &psi, Some(u_ref.value(k)))?.0;
        }
        predicted += half_h * gap(k, t, &x, &held, &psi);
        let piece = flow::integrate_flow(problem, &Held { grid, value: &held }, &x, k, k + 1)?;
        x.copy_from_slice(piece.last());
        data.extend_from_slice(&x);
        values.push(held.clone());
    }
    Ok(Comparison {
        control: Control::new(grid, values)?,
        trajectory: Trajectory::from_parts(grid, 0, n, data),
        predicted_increment: predicted,
    })
}

fn residual_of(problem: &ControlProblem, control: &Control, trajectory: &Trajectory) -> Result<f64> {
    // diagnostics run on their own counter
    let probe = problem.detached();
    let costate = flow::adjoint_of(&probe, control, trajectory)?;
    Ok(variation::pmp_residual_along(&probe, control, trajectory, &costate)?.residual)
}

/// Iterated feedback descent from `u_init`.
pub fn solve(problem: &ControlProblem, u_init: &Control, config: &DescentConfig) -> Result<(Control, DescentTrace)> {
    config.validate()?;
    u_init.check_admissible(&problem.control_set)?;
    let start = problem.integrations();
    let mut current = u_init.clone();
    let mut traj = flow::simulate(problem, &current)?;
    let mut cost = problem.cost.value(traj.last());
    let initial_cost = cost;
    let mut records = Vec::new();
    let mut stalled = 0;
    let mut converged = false;
    for iter in 1..=config.max_iters {
        let residual = residual_of(problem, &current, &traj)?;
        let cmp = comparison_from(problem, &current, &traj, config)?;
        let candidate_cost = problem.cost.value(cmp.trajectory.last());
        let accepted = candidate_cost < cost;
        let decrease = if accepted { cost - candidate_cost } else { 0.0 };
        if accepted {
            current = cmp.control;
            traj = cmp.trajectory;
            cost = candidate_cost;
        }
        records.push(DescentRecord {
            iter,
            cost,
            candidate_cost,
            predicted_decrease: -cmp.predicted_increment,
            realized_decrease: decrease,
            pmp_residual: residual,
            accepted,
            integrations_used: problem.integrations() - start,
        });
        stalled = if decrease < config.cost_tol { stalled + 1 } else { 0 };
        if stalled >= config.stall_iters {
            converged = true;
            break;
        }
    }
    let final_pmp_residual = residual_of(problem, &current, &traj)?;
    let trace = DescentTrace {
        initial_cost,
        final_cost: cost,
        final_pmp_residual,
        integrations: problem.integrations() - start,
        converged,
        records,
    };
    Ok((current, trace))
}

const ARMIJO_C: f64 = 1e-4;
const ARMIJO_TRIALS: usize = 40;

/// Conditional gradient: direction from minimising the first variation at
/// the frozen `(x̄, p̄)`, step by Armijo backtracking on `u^ε = ū + ε(v − ū)`.
/// Needs a box control set, where the convex combination is admissible.
pub fn baseline_gradient_solve(
    problem: &ControlProblem,
    u_init: &Control,
    config: &DescentConfig,
) -> Result<(Control, DescentTrace)> {
    config.validate()?;
    if !problem.control_set.is_box() {
        return Err(Error::InvalidInput("the gradient baseline needs a box control set".into()));
    }
    u_init.check_admissible(&problem.control_set)?;
    let grid = problem.horizon;
    let n = problem.state_dim();
    let dynamics = problem.dynamics.as_ref();
    let start = problem.integrations();
    let mut current = u_init.clone();
    let mut traj = flow::simulate(problem, &current)?;
    let mut cost = problem.cost.value(traj.last());
    let initial_cost = cost;
    let mut records = Vec::new();
    let mut stalled = 0;
    let mut converged = false;
    let (mut f0, mut f1) = (vec![0.0; n], vec![0.0; n]);
    for iter in 1..=config.max_iters {
        let residual = residual_of(problem, &current, &traj)?;
        let costate = flow::adjoint_of(problem, &current, &traj)?;
        // interval-wise minimiser of the trapezoid first-variation integrand
        let mut slope = 0.0;
        let mut direction = Vec::with_capacity(grid.n_steps());
        for k in 0..grid.n_steps() {
            let (t0, t1) = (grid.node(k), grid.node(k + 1));
            let (x0, x1) = (traj.at(k), traj.at(k + 1));
            let (p0, p1) = (costate.at(k), costate.at(k + 1));
            let (v, h_min) = minimize_over_set(
                &problem.control_set,
                |u| {
                    dynamics.field(t0, x0, u, &mut f0);
                    dynamics.field(t1, x1, u, &mut f1);
                    0.5 * (linalg::dot(p0, &f0) + linalg::dot(p1, &f1))
                },
                Some(current.value(k)),
            );
            let u = current.value(k);
            dynamics.field(t0, x0, u, &mut f0);
            dynamics.field(t1, x1, u, &mut f1);
            let h_ref = 0.5 * (linalg::dot(p0, &f0) + linalg::dot(p1, &f1));
            slope += grid.step() * (h_min - h_ref);
            direction.push(v);
        }
        let direction = Control::new(grid, direction)?;
        let mut candidate_cost = cost;
        let mut accepted = None;
        if slope < 0.0 {
            let mut eps = 1.0;
            for _ in 0..ARMIJO_TRIALS {
                let trial = current.lerp(&direction, eps)?;
                let trial_traj = flow::simulate(problem, &trial)?;
                candidate_cost = problem.cost.value(trial_traj.last());
                if candidate_cost <= cost + ARMIJO_C * eps * slope {
                    accepted = Some((trial, trial_traj));
                    break;
                }
                eps *= 0.5;
            }
        }
        let decrease = match accepted {
            Some((trial, trial_traj)) if candidate_cost < cost => {
                let d = cost - candidate_cost;
                current = trial;
                traj = trial_traj;
                cost = candidate_cost;
                d
            }
            _ => 0.0,
        };
        records.push(DescentRecord {
            iter,
            cost,
            candidate_cost,
            predicted_decrease: -slope,
            realized_decrease: decrease,
            pmp_residual: residual,
            accepted: decrease > 0.0,
            integrations_used: problem.integrations() - start,
        });
        stalled = if decrease < config.cost_tol { stalled + 1 } else { 0 };
        if stalled >= config.stall_iters {
            converged = true;
            break;
        }
    }
    let final_pmp_residual = residual_of(problem, &current, &traj)?;
    let trace = DescentTrace {
        initial_cost,
        final_cost: cost,
        final_pmp_residual,
        integrations: problem.integrations() - start,
        converged,
        records,
    };
    Ok((current, trace))
}
