//! Numerical invariants shared by the `check` command and the test suites.
//! Each probe returns the measured quantity; [`run_classical`] and
//! [`run_meanfield`] compare them against fixed tolerances.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow;
use crate::linalg;
use crate::meanfield::{self, MeanFieldCost, MeanFieldProblem};
use crate::problem::{Blend, Control, ControlProblem, TerminalCost};
use crate::super_adjoint::SuperAdjoint;
use crate::variation;

pub const INCREMENT_TOL: f64 = 1e-6;
pub const INCREMENT_STEPS: usize = 1000;
pub const INCREMENT_RATIO: f64 = 3.0;
/// Gaps below this are roundoff; their refinement ratio is not meaningful.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;
pub const COINCIDENCE_TOL: f64 = 1e-8;
pub const DUALITY_TOL: f64 = 1e-9;
pub const RICCATI_TOL: f64 = 1e-3;
pub const PAIRING_TOL: f64 = 1e-8;
pub const TAYLOR_SLOPE: f64 = 2.7;
pub const TAYLOR_STEPS: usize = 2000;
/// Relative third difference below which `ε ↦ I[u^ε]` counts as quadratic.
pub const QUADRATIC_FLOOR: f64 = 1e-10;
pub const TAYLOR_QUADRATIC_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const MF_PAIRING_TOL: f64 = 1e-7;
pub const MF_DUALITY_TOL: f64 = 1e-8;
pub const MF_INCREMENT_TOL: f64 = 1e-5;
pub const MF_FD_TOL: f64 = 1e-4;
const RANDOM_BLOCKS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// `true` when `value ≥ tolerance` is the passing direction.
    pub at_least: bool,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, at_least: false, passed: value <= tolerance }
    }

    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, at_least: true, passed: value >= tolerance }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<4} {:<28} {:>12.4e} {} {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            if self.at_least { ">=" } else { "<=" },
            self.tolerance
        )
    }
}

/// Outcome table of one battery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub scenario: String,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn table(&self) -> String {
        let mut s = format!("checks for {} (seed {})\n", self.scenario, self.seed);
        for c in &self.checks {
            s.push_str(&c.line());
            s.push('\n');
        }
        s
    }
}

/// A pair of seeded random block controls on the problem horizon.
pub fn random_pair(problem: &ControlProblem, rng: &mut ChaCha8Rng) -> Result<(Control, Control)> {
    let a = Control::random_blocks(problem.horizon, &problem.control_set, RANDOM_BLOCKS, rng)?;
    let b = Control::random_blocks(problem.horizon, &problem.control_set, RANDOM_BLOCKS, rng)?;
    Ok((a, b))
}

/// Largest `|predicted − realized|` over `pairs` random control pairs at
/// `n_steps`, and the same at `2·n_steps` with the same controls.
pub fn increment_gaps(problem: &ControlProblem, pairs: usize, n_steps: usize, seed: u64) -> Result<(f64, f64)> {
    let coarse = problem.with_horizon(problem.horizon.with_steps(n_steps)?);
    let fine = problem.with_horizon(problem.horizon.with_steps(2 * n_steps)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap_c, mut gap_f) = (0.0_f64, 0.0_f64);
    for _ in 0..pairs {
        let (ubar, u) = random_pair(&coarse, &mut rng)?;
        gap_c = gap_c.max(variation::exact_increment(&coarse, &ubar, &u)?.abs_gap);
        gap_f = gap_f.max(variation::exact_increment(&fine, &ubar.refine(2), &u.refine(2))?.abs_gap);
    }
    Ok((gap_c, gap_f))
}

/// Refinement ratio of two gaps, infinite when both sit at roundoff.
pub fn refinement_ratio(coarse: f64, fine: f64) -> f64 {
    if coarse <= ROUNDOFF_FLOOR {
        f64::INFINITY
    } else {
        coarse / fine.max(f64::MIN_POSITIVE)
    }
}

/// `max_k |∇p̄_{t_k}(x̄(t_k)) − p̄(t_k)|`.
pub fn gradient_coincidence(problem: &ControlProblem, control: &Control) -> Result<f64> {
    let xbar = flow::simulate(problem, control)?;
    let pbar = flow::adjoint_of(problem, control, &xbar)?;
    let sa = SuperAdjoint::new(problem, control)?;
    let mut worst = 0.0_f64;
    for k in 0..problem.horizon.node_count() {
        let g = sa.gradient(k, xbar.at(k))?;
        let d = g.iter().zip(pbar.at(k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok(worst)
}

fn relative_spread(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt() / mean.abs().max(f64::MIN_POSITIVE)
}

/// Standard deviation of `t ↦ p̄_t(x̄(t))` over the nodes, relative to its mean.
pub fn duality_spread(problem: &ControlProblem, control: &Control) -> Result<f64> {
    let xbar = flow::simulate(problem, control)?;
    let sa = SuperAdjoint::new(problem, control)?;
    let values = (0..problem.horizon.node_count()).map(|k| sa.value(k, xbar.at(k))).collect::<Result<Vec<_>>>()?;
    Ok(relative_spread(&values))
}

/// Largest `‖−P(t) − D²p̄_t(x̄(t))‖ / ‖D²p̄_t‖` (Frobenius) over `samples`
/// evenly spread nodes, the Hessian taken by differences of the gradient.
pub fn riccati_hessian_gap(problem: &ControlProblem, control: &Control, samples: usize) -> Result<f64> {
    let xbar = flow::simulate(problem, control)?;
    let pbar = flow::adjoint_of(problem, control, &xbar)?;
    let riccati = flow::integrate_riccati(problem, control, &xbar, &pbar)?;
    let sa = SuperAdjoint::new(problem, control)?;
    let steps = problem.horizon.n_steps();
    let mut worst = 0.0_f64;
    for s in 0..samples {
        let k = s * steps / samples.max(2).saturating_sub(1).max(1);
        let k = k.min(steps);
        let fd: DMatrix<f64> = sa.hessian_fd(k, xbar.at(k))?;
        let gap = (riccati.hessian(k) - &fd).norm() / fd.norm().max(1e-12);
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// Largest drift of `p(t)·w(t)` along the grid, relative to `max(1, |p·w|)`,
/// over random `(w0, p(T))` pairs.
pub fn adjoint_pairing_drift(problem: &ControlProblem, control: &Control, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xbar = flow::simulate(problem, control)?;
    let n = problem.state_dim();
    let steps = problem.horizon.n_steps();
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let w0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let pt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w = flow::integrate_variational(problem, control, &xbar, &w0, 0, steps)?;
        let p = flow::integrate_adjoint(problem, control, &xbar, &pt)?;
        let end = linalg::dot(p.at(steps), &w[steps]);
        for k in 0..=steps {
            let d = (linalg::dot(p.at(k), &w[k]) - end).abs() / end.abs().max(1.0);
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Slope of `log|I[u^ε] − I[ū] − εV₁ − ε²V₂|` against `log ε` by least
/// squares, with `u^ε` the relaxed blend. Returns the slope and the samples.
pub fn taylor_slope(
    problem: &ControlProblem,
    u_ref: &Control,
    u_target: &Control,
    eps: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let base = flow::cost_of(problem, u_ref)?;
    let v1 = variation::first_variation(problem, u_ref, u_target)?;
    let v2 = variation::second_variation(problem, u_ref, u_target)?;
    let mut samples = Vec::with_capacity(eps.len());
    for &e in eps {
        let blend = Blend::new(u_ref, u_target, e)?;
        let value = flow::cost_of(problem, &blend)?;
        samples.push((e, (value - base - e * v1 - e * e * v2).abs()));
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|(e, r)| (e.ln(), r.max(f64::MIN_POSITIVE).ln())).collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx).powi(2)));
    Ok((num / den, samples))
}

/// `ε ∈ {10⁻¹, 10^{-1.5}, …, 10⁻³}`.
pub fn taylor_eps() -> Vec<f64> {
    (0..5).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect()
}

/// Third difference of `ε ↦ I[u^ε]` on `{0, ⅓, ⅔, 1}`, relative to
/// `max(1, |I[ū]|)`. Zero up to roundoff when the cost is quadratic in `ε`.
pub fn blend_cubicity(problem: &ControlProblem, u_ref: &Control, u_target: &Control) -> Result<f64> {
    let mut v = [0.0; 4];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = flow::cost_of(problem, &Blend::new(u_ref, u_target, i as f64 / 3.0)?)?;
    }
    Ok((v[3] - 3.0 * v[2] + 3.0 * v[1] - v[0]).abs() / v[0].abs().max(1.0))
}

/// Second-order Taylor check at [`TAYLOR_STEPS`]. When `I[u^ε]` is exactly
/// quadratic in `ε` the remainder has no `ε³` term to fit, so the check
/// bounds `max_ε |remainder|/ε²` instead of the slope.
pub fn taylor_check(problem: &ControlProblem, ubar: &Control, u: &Control, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let fine = problem.with_horizon(problem.horizon.with_steps(TAYLOR_STEPS)?);
    let (ubar, u) = if TAYLOR_STEPS.is_multiple_of(problem.horizon.n_steps()) {
        let factor = TAYLOR_STEPS / problem.horizon.n_steps();
        (ubar.refine(factor), u.refine(factor))
    } else {
        random_pair(&fine, rng)?
    };
    let (slope, samples) = taylor_slope(&fine, &ubar, &u, &taylor_eps())?;
    if blend_cubicity(&fine, &ubar, &u)? > QUADRATIC_FLOOR {
        return Ok(CheckOutcome::at_least("taylor residual slope", slope, TAYLOR_SLOPE));
    }
    let scale = flow::cost_of(&fine, &ubar)?.abs().max(1.0);
    let worst = samples.iter().map(|(e, r)| r / (e * e)).fold(0.0, f64::max) / scale;
    Ok(CheckOutcome::at_most("taylor remainder / eps^2", worst, TAYLOR_QUADRATIC_TOL))
}

/// The classical battery on `problem` with seeded random controls.
pub fn run_classical(problem: &ControlProblem, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        CheckOutcome::at_most("cost gradient vs FD", problem.validate_cost_gradient(16, 1.0, &mut rng), GRADIENT_TOL),
        CheckOutcome::at_most("dynamics jacobian vs FD", problem.validate_jacobian(16, 1.0, &mut rng), GRADIENT_TOL),
    ];
    let (gap_c, gap_f) = increment_gaps(problem, 10, INCREMENT_STEPS, seed)?;
    out.push(CheckOutcome::at_most("increment gap n=1000", gap_c, INCREMENT_TOL));
    out.push(CheckOutcome::at_least("increment gap refinement", refinement_ratio(gap_c, gap_f), INCREMENT_RATIO));
    let (ubar, u) = random_pair(problem, &mut rng)?;
    out.push(CheckOutcome::at_most("gradient vs adjoint", gradient_coincidence(problem, &ubar)?, COINCIDENCE_TOL));
    out.push(CheckOutcome::at_most("duality constancy", duality_spread(problem, &ubar)?, DUALITY_TOL));
    out.push(CheckOutcome::at_most("riccati vs FD hessian", riccati_hessian_gap(problem, &ubar, 5)?, RICCATI_TOL));
    out.push(CheckOutcome::at_most("adjoint pairing drift", adjoint_pairing_drift(problem, &ubar, 10, seed)?, PAIRING_TOL));
    out.push(taylor_check(problem, &ubar, &u, &mut rng)?);
    Ok(out)
}

/// Drift of `⟨y(t), w(t)⟩_μ` for random tangent / terminal pairs.
pub fn mf_pairing_drift(mfp: &MeanFieldProblem, control: &Control, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = mfp.horizon.n_steps();
    let path = meanfield::particle_flow(mfp, control, &mfp.initial, 0, steps)?;
    let width = mfp.initial.as_slice().len();
    let count = mfp.particles() as f64;
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let w0: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let yt: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w = meanfield::pushforward_tangent(mfp, control, &path, &w0)?;
        let y = meanfield::lift_adjoint(mfp, control, &path, &yt)?;
        let end = linalg::dot(y.at(steps), w.at(steps)) / count;
        for k in 0..=steps {
            let d = (linalg::dot(y.at(k), w.at(k)) / count - end).abs() / end.abs().max(1.0);
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Largest deviation of `t ↦ 𝐩̄_t(μ̄_t)` from its terminal value, relative
/// to `max(1, |ℓ(μ̄_T)|)`.
pub fn mf_duality_drift(mfp: &MeanFieldProblem, control: &Control) -> Result<f64> {
    let steps = mfp.horizon.n_steps();
    let path = meanfield::particle_flow(mfp, control, &mfp.initial, 0, steps)?;
    let end = mfp.cost_at(path.last());
    let mut worst = 0.0_f64;
    for k in 0..=steps {
        let v = meanfield::mf_super_adjoint_value(mfp, control, k, path.at(k))?;
        worst = worst.max((v - end).abs() / end.abs().max(1.0));
    }
    Ok(worst)
}

/// Relative gap between `⟨∇𝐩̄_t(μ), v⟩_μ` and a central difference of
/// `𝐩̄_t` with particles moved along `v`, step `1e-5`.
pub fn mf_gradient_fd_gap(mfp: &MeanFieldProblem, control: &Control, node: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = meanfield::particle_flow(mfp, control, &mfp.initial, 0, node)?;
    let x = path.at(node).to_vec();
    let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let y = meanfield::mf_super_adjoint_gradient(mfp, control, node, &x)?;
    let count = mfp.particles() as f64;
    let analytic = linalg::dot(&y, &v) / count;
    let eps = 1e-5;
    let moved = |s: f64| x.iter().zip(&v).map(|(a, b)| a + s * eps * b).collect::<Vec<f64>>();
    let plus = meanfield::mf_super_adjoint_value(mfp, control, node, &moved(1.0))?;
    let minus = meanfield::mf_super_adjoint_value(mfp, control, node, &moved(-1.0))?;
    let fd = (plus - minus) / (2.0 * eps);
    Ok((analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-12))
}

/// The mean-field battery on `mfp` with seeded random controls.
pub fn run_meanfield(mfp: &MeanFieldProblem, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        CheckOutcome::at_most("flat gradient vs FD", mfp.validate_flat_gradient(16, &mut rng), GRADIENT_TOL),
        CheckOutcome::at_most("measure jacobian vs FD", mfp.validate_jac_measure(16, &mut rng), GRADIENT_TOL),
    ];
    let ubar = Control::random_blocks(mfp.horizon, &mfp.control_set, RANDOM_BLOCKS, &mut rng)?;
    let u = Control::random_blocks(mfp.horizon, &mfp.control_set, RANDOM_BLOCKS, &mut rng)?;
    out.push(CheckOutcome::at_most("lifted pairing drift", mf_pairing_drift(mfp, &ubar, 10, seed)?, MF_PAIRING_TOL));
    out.push(CheckOutcome::at_most("duality constancy", mf_duality_drift(mfp, &ubar)?, MF_DUALITY_TOL));
    let node = mfp.horizon.n_steps() / 3;
    out.push(CheckOutcome::at_most("gradient vs FD", mf_gradient_fd_gap(mfp, &ubar, node, seed)?, MF_FD_TOL));
    let gap = meanfield::mf_exact_increment(mfp, &ubar, &u)?.abs_gap;
    out.push(CheckOutcome::at_most("increment gap", gap, MF_INCREMENT_TOL));
    Ok(out)
}

/// `ℓ` with a deliberately wrong gradient, for fault-injection runs.
pub struct SkewedGradient(pub Arc<dyn TerminalCost>);

impl TerminalCost for SkewedGradient {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.value(x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.0.gradient(x, out);
        out.iter_mut().for_each(|g| *g = 1.1 * *g + 0.1);
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.0.hessian(x)
    }
    fn is_quadratic(&self) -> bool {
        self.0.is_quadratic()
    }
}

/// Mean-field counterpart of [`SkewedGradient`].
pub struct SkewedFlatGradient(pub Arc<dyn MeanFieldCost>);

impl MeanFieldCost for SkewedFlatGradient {
    fn value(&self, points: &[f64], dim: usize) -> f64 {
        self.0.value(points, dim)
    }
    fn flat_gradient(&self, points: &[f64], x: &[f64], out: &mut [f64]) {
        self.0.flat_gradient(points, x, out);
        out.iter_mut().for_each(|g| *g = 1.1 * *g + 0.1);
    }
}
