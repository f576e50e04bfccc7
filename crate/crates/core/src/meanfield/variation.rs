//! Super-adjoint, exact increment, PMP residual and feedback descent on
//! ensembles. Inner products are `⟨a, b⟩_μ = (1/N) Σ a_i·b_i`.

use super::flow::{advance, check_control, costate_mid, flow_flat, lift_adjoint, step_ensemble};
use super::{EnsemblePath, MeanFieldProblem};
use crate::descent::{DescentConfig, DescentRecord, DescentTrace};
use crate::error::{Error, Result};
use crate::flow::Rk4;
use crate::linalg;
use crate::problem::Control;
use crate::variation::{minimize_over_set, IncrementReport, PmpReport};

fn check_points(mfp: &MeanFieldProblem, points: &[f64]) -> Result<()> {
    let n = mfp.state_dim();
    if points.is_empty() || !points.len().is_multiple_of(n) {
        return Err(Error::DimensionMismatch(format!("{} coordinates for particles in dimension {n}", points.len())));
    }
    Ok(())
}

/// `𝐩̄_t(μ) = ℓ(Φ̄_{t,T}(μ))` with `μ` the ensemble `points` at node `t_node`.
pub fn mf_super_adjoint_value(mfp: &MeanFieldProblem, u_ref: &Control, t_node: usize, points: &[f64]) -> Result<f64> {
    check_points(mfp, points)?;
    let tail = flow_flat(mfp, u_ref, points, t_node, mfp.horizon.n_steps())?;
    Ok(mfp.cost.value(tail.last(), mfp.state_dim()))
}

/// Per-particle representative of `∇𝐩̄_t(μ)` in `L²_μ`: flow the ensemble to
/// `T`, start from the flat gradient of `ℓ` there and run the lifted adjoint
/// back to `t_node`.
pub fn mf_super_adjoint_gradient(
    mfp: &MeanFieldProblem,
    u_ref: &Control,
    t_node: usize,
    points: &[f64],
) -> Result<Vec<f64>> {
    check_points(mfp, points)?;
    let tail = flow_flat(mfp, u_ref, points, t_node, mfp.horizon.n_steps())?;
    let costate = costate_along(mfp, u_ref, &tail)?;
    Ok(costate.at(t_node).to_vec())
}

/// Lifted adjoint along `path` with the flat-gradient terminal condition.
pub(crate) fn costate_along(mfp: &MeanFieldProblem, control: &Control, path: &EnsemblePath) -> Result<EnsemblePath> {
    let mut terminal = vec![0.0; path.last().len()];
    mfp.cost.flat_gradients(path.last(), mfp.state_dim(), &mut terminal);
    lift_adjoint(mfp, control, path, &terminal)
}

/// `(1/N) Σ_i ψ_i · F_t(x_i, μ, u)` with scratch space for the velocities.
struct EnsembleHamiltonian<'a> {
    mfp: &'a MeanFieldProblem,
    buf: Vec<f64>,
}

impl<'a> EnsembleHamiltonian<'a> {
    fn new(mfp: &'a MeanFieldProblem, width: usize) -> Self {
        Self { mfp, buf: vec![0.0; width] }
    }

    fn eval(&mut self, t: f64, points: &[f64], psi: &[f64], u: &[f64]) -> f64 {
        self.mfp.dynamics.velocities(t, points, u, &mut self.buf);
        let count = points.len() / self.mfp.state_dim();
        linalg::dot(psi, &self.buf) / count as f64
    }

    fn minimize(&mut self, t: f64, points: &[f64], psi: &[f64], reference: Option<&[f64]>) -> (Vec<f64>, f64) {
        let set = &self.mfp.control_set;
        minimize_over_set(set, |u| self.eval(t, points, psi, u), reference)
    }
}

fn same_grid(mfp: &MeanFieldProblem, a: &Control, b: &Control) -> Result<()> {
    check_control(mfp, a)?;
    check_control(mfp, b)
}

/// Exact increment `ℓ(μ^u_T) − ℓ(μ^ū_T)` as the time integral of
/// `⟨∇𝐩̄_t(μ_t), F_t(μ_t, u_t) − F_t(μ_t, ū_t)⟩_{μ_t}` along the target path.
pub fn mf_exact_increment(mfp: &MeanFieldProblem, u_ref: &Control, u_target: &Control) -> Result<IncrementReport> {
    same_grid(mfp, u_ref, u_target)?;
    let grid = mfp.horizon;
    let x0 = mfp.initial.as_slice();
    let target = flow_flat(mfp, u_target, x0, 0, grid.n_steps())?;
    let reference = flow_flat(mfp, u_ref, x0, 0, grid.n_steps())?;
    let width = x0.len();
    let mut ham = EnsembleHamiltonian::new(mfp, width);
    let mut rk = Rk4::new(width);
    let h = grid.step();
    let gap = |ham: &mut EnsembleHamiltonian, k: usize, t: f64, x: &[f64], psi: &[f64]| {
        ham.eval(t, x, psi, u_target.value(k)) - ham.eval(t, x, psi, u_ref.value(k))
    };
    let mut psi_lo = mf_super_adjoint_gradient(mfp, u_ref, 0, target.at(0))?;
    let mut predicted = 0.0;
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let mut mid = target.at(k).to_vec();
        advance(mfp, &mut rk, t, 0.5 * h, u_target.value(k), &mut mid);
        let psi_mid = costate_mid(mfp, k, u_ref.value(k), &mid, |end| {
            mf_super_adjoint_gradient(mfp, u_ref, k + 1, end)
        })?;
        let psi_hi = mf_super_adjoint_gradient(mfp, u_ref, k + 1, target.at(k + 1))?;
        let lo = gap(&mut ham, k, t, target.at(k), &psi_lo);
        let md = gap(&mut ham, k, t + 0.5 * h, &mid, &psi_mid);
        let hi = gap(&mut ham, k, t + h, target.at(k + 1), &psi_hi);
        predicted += h / 6.0 * (lo + 4.0 * md + hi);
        psi_lo = psi_hi;
    }
    let n = mfp.state_dim();
    let realized = mfp.cost.value(target.last(), n) - mfp.cost.value(reference.last(), n);
    Ok(IncrementReport::new(predicted, realized, grid.step()))
}

/// PMP residual `∫ [⟨p̄, F(μ̄, ū)⟩ − min_ω ⟨p̄, F(μ̄, ω)⟩] dt` with `p̄` the
/// lifted adjoint along the reference path.
pub fn mf_pmp_residual(mfp: &MeanFieldProblem, u_ref: &Control) -> Result<PmpReport> {
    check_control(mfp, u_ref)?;
    let path = flow_flat(mfp, u_ref, mfp.initial.as_slice(), 0, mfp.horizon.n_steps())?;
    let costate = costate_along(mfp, u_ref, &path)?;
    Ok(residual_along(mfp, u_ref, &path, &costate))
}

pub(crate) fn residual_along(mfp: &MeanFieldProblem, u_ref: &Control, path: &EnsemblePath, costate: &EnsemblePath) -> PmpReport {
    let grid = mfp.horizon;
    let nodes = grid.node_count();
    let mut ham = EnsembleHamiltonian::new(mfp, path.at(0).len());
    let mut minimizers = Vec::with_capacity(nodes);
    let mut h_min = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let (u, v) = ham.minimize(grid.node(k), path.at(k), costate.at(k), None);
        minimizers.push(u);
        h_min.push(v);
    }
    let mut h_ref = Vec::with_capacity(nodes);
    let mut residual = 0.0;
    let mut worst = (0usize, f64::NEG_INFINITY);
    for k in 0..grid.n_steps() {
        let u = u_ref.value(k);
        let lo = ham.eval(grid.node(k), path.at(k), costate.at(k), u);
        let hi = ham.eval(grid.node(k + 1), path.at(k + 1), costate.at(k + 1), u);
        let (gap_lo, gap_hi) = ((lo - h_min[k]).max(0.0), (hi - h_min[k + 1]).max(0.0));
        residual += 0.5 * grid.step() * (gap_lo + gap_hi);
        h_ref.push(lo);
        if gap_lo > worst.1 {
            worst = (k, gap_lo);
        }
        if k + 1 == grid.n_steps() {
            h_ref.push(hi);
            if gap_hi > worst.1 {
                worst = (k + 1, gap_hi);
            }
        }
    }
    PmpReport {
        residual,
        worst_node: worst.0,
        minimizer_per_node: minimizers,
        times: (0..nodes).map(|k| grid.node(k)).collect(),
        h_ref,
        h_min,
    }
}

/// Result of one ensemble sample-and-hold sweep.
#[derive(Debug, Clone)]
pub struct MfComparison {
    pub control: Control,
    pub path: EnsemblePath,
    pub predicted_increment: f64,
}

/// Sample-and-hold sweep on ensembles with `∇𝐩̄` frozen at `u_ref`.
pub fn mf_comparison_control(mfp: &MeanFieldProblem, u_ref: &Control, config: &DescentConfig) -> Result<MfComparison> {
    config.validate()?;
    check_control(mfp, u_ref)?;
    let grid = mfp.horizon;
    let steps = grid.n_steps();
    let n = mfp.state_dim();
    let mut x = mfp.initial.as_slice().to_vec();
    let width = x.len();
    let mut ham = EnsembleHamiltonian::new(mfp, width);
    let mut data = Vec::with_capacity((steps + 1) * width);
    data.extend_from_slice(&x);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut held: Vec<f64> = Vec::new();
    let mut rk = Rk4::new(width);
    let half_h = 0.5 * grid.step();
    let mut predicted = 0.0;
    for k in 0..=steps {
        let t = grid.node(k);
        let psi = mf_super_adjoint_gradient(mfp, u_ref, k, &x)?;
        if k > 0 {
            predicted += half_h * (ham.eval(t, &x, &psi, &values[k - 1]) - ham.eval(t, &x, &psi, u_ref.value(k - 1)));
        }
        if k == steps {
            break;
        }
        if k % config.sample_partition == 0 {
            held = ham.minimize(t, &x, &psi, Some(u_ref.value(k))).0;
        }
        predicted += half_h * (ham.eval(t, &x, &psi, &held) - ham.eval(t, &x, &psi, u_ref.value(k)));
        step_ensemble(mfp, &mut rk, k, &held, &mut x)?;
        mfp.counter().add(1);
        data.extend_from_slice(&x);
        values.push(held.clone());
    }
    Ok(MfComparison {
        control: Control::new(grid, values)?,
        path: EnsemblePath::from_parts(grid, 0, n, width, data),
        predicted_increment: predicted,
    })
}

fn residual_of(mfp: &MeanFieldProblem, control: &Control, path: &EnsemblePath) -> Result<f64> {
    let probe = mfp.detached();
    let costate = costate_along(&probe, control, path)?;
    Ok(residual_along(&probe, control, path, &costate).residual)
}

/// Feedback descent on the ensemble problem; same contract as
/// [`crate::descent::solve`].
pub fn mf_descent(mfp: &MeanFieldProblem, u_init: &Control, config: &DescentConfig) -> Result<(Control, DescentTrace)> {
    config.validate()?;
    check_control(mfp, u_init)?;
    u_init.check_admissible(&mfp.control_set)?;
    let n = mfp.state_dim();
    let start = mfp.integrations();
    let mut current = u_init.clone();
    let mut path = flow_flat(mfp, &current, mfp.initial.as_slice(), 0, mfp.horizon.n_steps())?;
    let mut cost = mfp.cost.value(path.last(), n);
    let initial_cost = cost;
    let mut records = Vec::new();
    let mut stalled = 0;
    let mut converged = false;
    for iter in 1..=config.max_iters {
        let residual = residual_of(mfp, &current, &path)?;
        let cmp = mf_comparison_control(mfp, &current, config)?;
        let candidate_cost = mfp.cost.value(cmp.path.last(), n);
        let accepted = candidate_cost < cost;
        let decrease = if accepted { cost - candidate_cost } else { 0.0 };
        if accepted {
            current = cmp.control;
            path = cmp.path;
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
            integrations_used: mfp.integrations() - start,
        });
        stalled = if decrease < config.cost_tol { stalled + 1 } else { 0 };
        if stalled >= config.stall_iters {
            converged = true;
            break;
        }
    }
    let final_pmp_residual = residual_of(mfp, &current, &path)?;
    let trace = DescentTrace {
        initial_cost,
        final_cost: cost,
        final_pmp_residual,
        integrations: mfp.integrations() - start,
        converged,
        records,
    };
    Ok((current, trace))
}
