//! Exact increment formula, first and second variations, Hamiltonian
//! minimisation and the PMP residual.
//!
//! Time integrals use Simpson's rule on each control interval, with the
//! midpoint values of the reference quantities from cubic Hermite
//! interpolation (the exact increment takes its midpoint states from a half
//! RK4 step instead). The PMP residual uses the trapezoid rule. On interval
//! `k` every sample uses the control value of interval `k`, so
//! piecewise-constant controls never straddle a quadrature cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, Costate, Trajectory};
use crate::linalg;
use crate::problem::{ControlProblem, ControlSet, ControlSignal};
use crate::report::num;
use crate::super_adjoint::SuperAdjoint;

/// Improvements below this are treated as ties; ties keep the reference value.
pub const TIE_TOL: f64 = 1e-12;
/// Relative second difference below which `u ↦ H(u)` counts as affine.
pub const AFFINE_CURVATURE_TOL: f64 = 1e-10;
const GRID_POINTS: usize = 33;
const REFINE_ROUNDS: usize = 10;

/// Both sides of the exact increment identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    /// `∫ ∇p̄_t(x(t))·[f_t(x, u_t) − f_t(x, ū_t)] dt`
    pub predicted: f64,
    /// `ℓ(x^u(T)) − ℓ(x^ū(T))`
    pub realized: f64,
    pub abs_gap: f64,
    pub grid_h: f64,
}

impl IncrementReport {
    pub(crate) fn new(predicted: f64, realized: f64, grid_h: f64) -> Self {
        Self { predicted, realized, abs_gap: (predicted - realized).abs(), grid_h }
    }
}

/// Defect in the minimum condition along a reference process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmpReport {
    /// `∫ [H(x̄, p̄, ū_t) − min_u H(x̄, p̄, u)] dt ≥ 0`
    pub residual: f64,
    pub worst_node: usize,
    pub minimizer_per_node: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub h_ref: Vec<f64>,
    pub h_min: Vec<f64>,
}

impl PmpReport {
    /// Per-node rows `t,H_ref,H_min,argmin_1..`.
    pub fn to_csv(&self) -> String {
        let m = self.minimizer_per_node.first().map_or(0, Vec::len);
        let mut s = String::from("t,H_ref,H_min");
        for i in 1..=m {
            s.push_str(&format!(",argmin_{i}"));
        }
        s.push('\n');
        for (k, u) in self.minimizer_per_node.iter().enumerate() {
            s.push_str(&format!("{},{},{}", num(self.times[k]), num(self.h_ref[k]), num(self.h_min[k])));
            for v in u {
                s.push(',');
                s.push_str(&num(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// `H_t(x, ψ, u) = ψ · f_t(x, u)`.
pub fn hamiltonian(problem: &ControlProblem, t: f64, x: &[f64], psi: &[f64], u: &[f64]) -> f64 {
    let mut f = vec![0.0; problem.state_dim()];
    problem.dynamics.field(t, x, u, &mut f);
    linalg::dot(psi, &f)
}

/// Hamiltonian of a relaxed value: `Σ_j w_j ψ·f_t(x, atom_j)`.
pub fn relaxed_hamiltonian(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    psi: &[f64],
    atoms: &[Vec<f64>],
    weights: &[f64],
) -> f64 {
    atoms
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(a, w)| w * hamiltonian(problem, t, x, psi, a))
        .sum()
}

/// Minimises `h` over `set`.
///
/// * atoms: exhaustive search;
/// * box with `h` affine (detected from axis and diagonal probes): the
///   bang-bang vertex given by the sign of each component of the switching
///   vector;
/// * general box: a 33-point-per-axis grid followed by ten halving rounds
///   of coordinate refinement.
///
/// When `reference` is given and the best value improves on `h(reference)`
/// by at most [`TIE_TOL`], the reference is returned. Without a reference,
/// ties resolve to the lower bound (box) or the first atom.
pub fn minimize_over_set(
    set: &ControlSet,
    mut h: impl FnMut(&[f64]) -> f64,
    reference: Option<&[f64]>,
) -> (Vec<f64>, f64) {
    let (best, best_val) = match set {
        ControlSet::Atoms(atoms) => {
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for (j, a) in atoms.iter().enumerate() {
                let v = h(a);
                if v < best_val {
                    best = j;
                    best_val = v;
                }
            }
            (atoms[best].clone(), best_val)
        }
        ControlSet::Box { lower, upper } => match affine_switching(lower, upper, &mut h) {
            Some(switching) => {
                let u: Vec<f64> = (0..lower.len())
                    .map(|i| {
                        let g = switching[i];
                        let range = upper[i] - lower[i];
                        let bang = if g > 0.0 { lower[i] } else { upper[i] };
                        match reference {
                            Some(r) if range > 0.0 => {
                                let gain = g * (r[i] - bang) / range;
                                if gain <= TIE_TOL {
                                    r[i]
                                } else {
                                    bang
                                }
                            }
                            _ if g.abs() <= TIE_TOL => lower[i],
                            _ => bang,
                        }
                    })
                    .collect();
                let v = h(&u);
                (u, v)
            }
            None => grid_search(lower, upper, &mut h),
        },
    };
    if let Some(r) = reference {
        let hr = h(r);
        if hr - best_val <= TIE_TOL {
            return (r.to_vec(), hr);
        }
    }
    (best, best_val)
}

/// Switching vector `h(u_i = upper) − h(u_i = lower)` (other coordinates at
/// the centre) when `h` looks affine on the box, `None` otherwise.
fn affine_switching(lower: &[f64], upper: &[f64], h: &mut impl FnMut(&[f64]) -> f64) -> Option<Vec<f64>> {
    let centre: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let hc = h(&centre);
    let flat = |a: f64, b: f64, c: f64| {
        let curvature = (a + b - 2.0 * c).abs();
        curvature <= AFFINE_CURVATURE_TOL * (a.abs() + b.abs() + 2.0 * c.abs())
    };
    let mut switching = Vec::with_capacity(lower.len());
    let mut probe = centre.clone();
    for i in 0..lower.len() {
        probe[i] = lower[i];
        let hl = h(&probe);
        probe[i] = upper[i];
        let hu = h(&probe);
        probe[i] = centre[i];
        if !flat(hl, hu, hc) {
            return None;
        }
        switching.push(hu - hl);
    }
    if lower.len() > 1 && !flat(h(lower), h(upper), hc) {
        return None;
    }
    Some(switching)
}

fn grid_search(lower: &[f64], upper: &[f64], h: &mut impl FnMut(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let m = lower.len();
    let spacing: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l) / (GRID_POINTS - 1) as f64).collect();
    let mut idx = vec![0usize; m];
    let mut probe = lower.to_vec();
    let mut best = lower.to_vec();
    let mut best_val = f64::INFINITY;
    loop {
        for i in 0..m {
            probe[i] = lower[i] + idx[i] as f64 * spacing[i];
        }
        let v = h(&probe);
        if v < best_val {
            best_val = v;
            best.copy_from_slice(&probe);
        }
        // odometer increment
        let mut axis = 0;
        while axis < m {
            idx[axis] += 1;
            if idx[axis] < GRID_POINTS {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
        if axis == m {
            break;
        }
    }
    let mut window = spacing;
    for _ in 0..REFINE_ROUNDS {
        for i in 0..m {
            for dir in [-1.0, 1.0] {
                probe.copy_from_slice(&best);
                probe[i] = (best[i] + dir * window[i]).clamp(lower[i], upper[i]);
                let v = h(&probe);
                if v < best_val {
                    best_val = v;
                    best.copy_from_slice(&probe);
                }
            }
            window[i] *= 0.5;
        }
    }
    (best, best_val)
}

/// `argmin_u H_t(x, ψ, u)` over the problem's control set, with the value.
pub fn minimize_hamiltonian(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    psi: &[f64],
    reference: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    let n = problem.state_dim();
    if x.len() != n || psi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "state/covector dimensions {}/{} but the problem has {n}",
            x.len(),
            psi.len()
        )));
    }
    if let Some(r) = reference {
        if r.len() != problem.control_dim() {
            return Err(Error::DimensionMismatch("reference control has the wrong dimension".into()));
        }
    }
    let mut f = vec![0.0; n];
    let dynamics = problem.dynamics.as_ref();
    Ok(minimize_over_set(
        &problem.control_set,
        |u| {
            dynamics.field(t, x, u, &mut f);
            linalg::dot(psi, &f)
        },
        reference,
    ))
}

fn same_grid(problem: &ControlProblem, a: &dyn ControlSignal, b: &dyn ControlSignal) -> Result<()> {
    if a.grid() != &problem.horizon || b.grid() != &problem.horizon {
        return Err(Error::DimensionMismatch("controls must live on the problem horizon".into()));
    }
    Ok(())
}

/// `f_t(x, a_k) − f_t(x, b_k)` on interval `k`.
pub(crate) struct FieldGap {
    fa: Vec<f64>,
    fb: Vec<f64>,
    pub diff: Vec<f64>,
}

impl FieldGap {
    pub(crate) fn new(n: usize) -> Self {
        Self { fa: vec![0.0; n], fb: vec![0.0; n], diff: vec![0.0; n] }
    }

    pub(crate) fn eval(
        &mut self,
        problem: &ControlProblem,
        a: &dyn ControlSignal,
        b: &dyn ControlSignal,
        k: usize,
        t: f64,
        x: &[f64],
    ) -> &[f64] {
        let d = problem.dynamics.as_ref();
        a.field(d, k, t, x, &mut self.fa);
        b.field(d, k, t, x, &mut self.fb);
        for i in 0..self.diff.len() {
            self.diff[i] = self.fa[i] - self.fb[i];
        }
        &self.diff
    }
}

/// Simpson's rule per interval; `samples(k)` returns the integrand at the
/// start, midpoint and end of interval `k`.
fn simpson(problem: &ControlProblem, mut samples: impl FnMut(usize) -> Result<[f64; 3]>) -> Result<f64> {
    let h = problem.horizon.step();
    let mut total = 0.0;
    for k in 0..problem.horizon.n_steps() {
        let [lo, mid, hi] = samples(k)?;
        total += h / 6.0 * (lo + 4.0 * mid + hi);
    }
    Ok(total)
}

/// Node and midpoint values of the reference quantities on one interval:
/// the state comes from the stored trajectory, everything else from cubic
/// Hermite interpolation with the interval's own control in the derivatives.
struct Interval {
    seg: flow::Segment,
    n: usize,
    t: [f64; 3],
    p: [Vec<f64>; 3],
    jac: [Vec<f64>; 3],
    h: f64,
}

impl Interval {
    fn new(n: usize) -> Self {
        Self {
            seg: flow::Segment::new(n),
            n,
            t: [0.0; 3],
            p: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            jac: [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]],
            h: 0.0,
        }
    }

    fn x(&self, s: usize) -> &[f64] {
        match s {
            0 => &self.seg.lo,
            1 => &self.seg.mid,
            _ => &self.seg.hi,
        }
    }

    /// Fills state, costate and `D_x f` at the three positions of interval `k`.
    fn fill(&mut self, problem: &ControlProblem, u_ref: &dyn ControlSignal, xbar: &Trajectory, pbar: &Costate, k: usize) {
        let grid = problem.horizon;
        let d = problem.dynamics.as_ref();
        let h = grid.step();
        self.h = h;
        self.t = [grid.node(k), grid.node(k) + 0.5 * h, grid.node(k) + h];
        self.seg.fill(d, u_ref, xbar, k);
        for s in 0..3 {
            let (t, x) = (self.t[s], self.x(s).to_vec());
            u_ref.jacobian(d, k, t, &x, &mut self.jac[s]);
        }
        self.p[0].copy_from_slice(pbar.at(k));
        self.p[2].copy_from_slice(pbar.at(k + 1));
        let n = self.n;
        let (mut dp_lo, mut dp_hi) = (vec![0.0; n], vec![0.0; n]);
        linalg::matvec_t(&self.jac[0], &self.p[0], &mut dp_lo);
        linalg::matvec_t(&self.jac[2], &self.p[2], &mut dp_hi);
        dp_lo.iter_mut().chain(dp_hi.iter_mut()).for_each(|v| *v = -*v);
        let [lo, mid, hi] = &mut self.p;
        flow::hermite_mid(lo, hi, &dp_lo, &dp_hi, h, mid);
    }

    /// Hermite midpoint of `v` from its end values and end derivatives.
    fn midpoint(&self, lo: &[f64], hi: &[f64], d_lo: &[f64], d_hi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; lo.len()];
        flow::hermite_mid(lo, hi, d_lo, d_hi, self.h, &mut out);
        out
    }
}

/// Exact increment `I[u] − I[ū]` computed along the *target* trajectory
/// with the reference super-adjoint gradient, next to the realised
/// difference of terminal costs.
pub fn exact_increment(
    problem: &ControlProblem,
    u_ref: &dyn ControlSignal,
    u_target: &dyn ControlSignal,
) -> Result<IncrementReport> {
    same_grid(problem, u_ref, u_target)?;
    let x = flow::simulate(problem, u_target)?;
    let xbar = flow::simulate(problem, u_ref)?;
    let sa = SuperAdjoint::new(problem, u_ref)?;
    let grid = problem.horizon;
    let n = problem.state_dim();
    let dynamics = problem.dynamics.as_ref();
    let mut gap = FieldGap::new(n);
    let mut rk = flow::Rk4::new(n);
    let h = grid.step();
    let mut psi_lo = sa.gradient(0, x.at(0))?;
    let mut predicted = 0.0;
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let mut mid = x.at(k).to_vec();
        rk.step(&mut mid, 0.5 * h, |stage, s, out| {
            let ts = match stage {
                flow::Stage::Start => t,
                flow::Stage::Mid => t + 0.25 * h,
                flow::Stage::End => t + 0.5 * h,
            };
            u_target.field(dynamics, k, ts, s, out)
        });
        let psi_mid = sa.gradient_mid(k, &mid)?;
        let psi_hi = sa.gradient(k + 1, x.at(k + 1))?;
        let lo = linalg::dot(&psi_lo, gap.eval(problem, u_target, u_ref, k, t, x.at(k)));
        let md = linalg::dot(&psi_mid, gap.eval(problem, u_target, u_ref, k, t + 0.5 * h, &mid));
        let hi = linalg::dot(&psi_hi, gap.eval(problem, u_target, u_ref, k, t + h, x.at(k + 1)));
        predicted += h / 6.0 * (lo + 4.0 * md + hi);
        psi_lo = psi_hi;
    }
    let realized = problem.cost.value(x.last()) - problem.cost.value(xbar.last());
    Ok(IncrementReport::new(predicted, realized, grid.step()))
}

/// First variation `∫ p̄(t)·[f_t(x̄, u_t) − f_t(x̄, ū_t)] dt` along the
/// reference process.
pub fn first_variation(problem: &ControlProblem, u_ref: &dyn ControlSignal, u_target: &dyn ControlSignal) -> Result<f64> {
    same_grid(problem, u_ref, u_target)?;
    let xbar = flow::simulate(problem, u_ref)?;
    let pbar = flow::adjoint_of(problem, u_ref, &xbar)?;
    first_variation_along(problem, u_ref, u_target, &xbar, &pbar)
}

fn first_variation_along(
    problem: &ControlProblem,
    u_ref: &dyn ControlSignal,
    u_target: &dyn ControlSignal,
    xbar: &Trajectory,
    pbar: &Costate,
) -> Result<f64> {
    let mut gap = FieldGap::new(problem.state_dim());
    let mut iv = Interval::new(problem.state_dim());
    simpson(problem, |k| {
        iv.fill(problem, u_ref, xbar, pbar, k);
        Ok([0, 1, 2].map(|s| linalg::dot(&iv.p[s], gap.eval(problem, u_target, u_ref, k, iv.t[s], iv.x(s)))))
    })
}

/// Second variation `∫ (P̄ᵀ δf + δDfᵀ p̄)·ȳ dt` with `δf = f(x̄, u) − f(x̄, ū)`,
/// `δDf` the matching Jacobian difference, `ȳ` the linearised response and
/// `P̄ = −D²p̄` from the Riccati equation. This is the full `ε²` coefficient
/// of `I[u^ε]`, without a factor ½.
pub fn second_variation(problem: &ControlProblem, u_ref: &dyn ControlSignal, u_target: &dyn ControlSignal) -> Result<f64> {
    same_grid(problem, u_ref, u_target)?;
    if problem.cost.hessian(&problem.initial_state).is_none() {
        return Err(Error::MissingHessian);
    }
    let n = problem.state_dim();
    let d = problem.dynamics.as_ref();
    let xbar = flow::simulate(problem, u_ref)?;
    let pbar = flow::adjoint_of(problem, u_ref, &xbar)?;
    let riccati = flow::integrate_riccati(problem, u_ref, &xbar, &pbar)?;
    let y = flow::integrate_linearized(problem, u_ref, u_target, &xbar)?;
    let affine = d.is_state_affine();
    let mut gap = FieldGap::new(n);
    let mut iv = Interval::new(n);
    let (mut ja, mut jb) = (vec![0.0; n * n], vec![0.0; n * n]);
    let mut jp = vec![0.0; n];
    let mut d2h = vec![0.0; n * n];
    simpson(problem, |k| {
        iv.fill(problem, u_ref, &xbar, &pbar, k);
        let df: Vec<Vec<f64>> = (0..3).map(|s| gap.eval(problem, u_target, u_ref, k, iv.t[s], iv.x(s)).to_vec()).collect();
        // ẏ = A y + δf
        let dy = |s: usize, yv: &[f64]| {
            let mut out = vec![0.0; n];
            linalg::matvec(&iv.jac[s], yv, &mut out);
            linalg::axpy(1.0, &df[s], &mut out);
            out
        };
        let (y_lo, y_hi) = (&y[k], &y[k + 1]);
        let y_mid = iv.midpoint(y_lo, y_hi, &dy(0, y_lo), &dy(2, y_hi));
        // Ṗ = −AᵀP − PA + D²H
        let mut dp = |s: usize, pm: &[f64]| {
            if affine {
                d2h.iter_mut().for_each(|v| *v = 0.0);
            } else {
                flow::hamiltonian_hessian(d, u_ref, k, iv.t[s], iv.x(s), &iv.p[s], &mut d2h);
            }
            let a = &iv.jac[s];
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = d2h[i * n + j];
                    for l in 0..n {
                        acc -= a[l * n + i] * pm[l * n + j] + pm[i * n + l] * a[l * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        };
        let (p_lo, p_hi) = (riccati.raw(k).to_vec(), riccati.raw(k + 1).to_vec());
        let (dp_lo, dp_hi) = (dp(0, &p_lo), dp(2, &p_hi));
        let p_mid = iv.midpoint(&p_lo, &p_hi, &dp_lo, &dp_hi);
        let ricc = [&p_lo, &p_mid, &p_hi];
        let ys = [y_lo, &y_mid, y_hi];
        let mut out = [0.0; 3];
        for s in 0..3 {
            u_target.jacobian(d, k, iv.t[s], iv.x(s), &mut ja);
            u_ref.jacobian(d, k, iv.t[s], iv.x(s), &mut jb);
            for (a, b) in ja.iter_mut().zip(&jb) {
                *a -= b;
            }
            linalg::matvec_t(&ja, &iv.p[s], &mut jp);
            let pm = ricc[s];
            out[s] = (0..n)
                .map(|i| {
                    // D²p̄ = −P
                    let hess_df = -linalg::dot(&pm[i * n..(i + 1) * n], &df[s]);
                    (hess_df + jp[i]) * ys[s][i]
                })
                .sum::<f64>();
        }
        Ok(out)
    })
}

/// PMP residual of `u_ref` with per-node Hamiltonian minimisers.
pub fn pmp_residual(problem: &ControlProblem, u_ref: &dyn ControlSignal) -> Result<PmpReport> {
    if u_ref.grid() != &problem.horizon {
        return Err(Error::DimensionMismatch("reference control is not on the problem horizon".into()));
    }
    let xbar = flow::simulate(problem, u_ref)?;
    let pbar = flow::adjoint_of(problem, u_ref, &xbar)?;
    pmp_residual_along(problem, u_ref, &xbar, &pbar)
}

pub(crate) fn pmp_residual_along(
    problem: &ControlProblem,
    u_ref: &dyn ControlSignal,
    xbar: &Trajectory,
    pbar: &Costate,
) -> Result<PmpReport> {
    let grid = problem.horizon;
    let n = problem.state_dim();
    let d = problem.dynamics.as_ref();
    let nodes = grid.node_count();
    let mut minimizers = Vec::with_capacity(nodes);
    let mut h_min = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let (u, v) = minimize_hamiltonian(problem, grid.node(k), xbar.at(k), pbar.at(k), None)?;
        minimizers.push(u);
        h_min.push(v);
    }
    let mut f = vec![0.0; n];
    let mut h_ref_at = |k: usize, node: usize| {
        u_ref.field(d, k, grid.node(node), xbar.at(node), &mut f);
        linalg::dot(pbar.at(node), &f)
    };
    let mut h_ref = Vec::with_capacity(nodes);
    let mut residual = 0.0;
    let mut worst = (0usize, f64::NEG_INFINITY);
    for k in 0..grid.n_steps() {
        let lo = h_ref_at(k, k);
        let hi = h_ref_at(k, k + 1);
        let gap_lo = (lo - h_min[k]).max(0.0);
        let gap_hi = (hi - h_min[k + 1]).max(0.0);
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
    Ok(PmpReport {
        residual,
        worst_node: worst.0,
        minimizer_per_node: minimizers,
        times: (0..nodes).map(|k| grid.node(k)).collect(),
        h_ref,
        h_min,
    })
}
