//! Particle integrators: the nonlocal flow, the lifted adjoint (Hamiltonian
//! characteristics with the barycentric costate) and the tangent pushforward.

use super::{EnsemblePath, MeanFieldProblem, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::flow::{hermite_mid, Rk4, Stage};
use crate::linalg;
use crate::problem::{Control, TimeGrid};

pub(crate) fn check_control(mfp: &MeanFieldProblem, control: &Control) -> Result<()> {
    if control.grid() != &mfp.horizon {
        return Err(Error::DimensionMismatch("control is not on the problem horizon".into()));
    }
    if control.dim() != mfp.dynamics.control_dim() {
        return Err(Error::DimensionMismatch("control has the wrong dimension".into()));
    }
    Ok(())
}

#[inline]
fn stage_time(grid: &TimeGrid, k: usize, stage: Stage) -> f64 {
    let t = grid.node(k);
    match stage {
        Stage::Start => t,
        Stage::Mid => t + 0.5 * grid.step(),
        Stage::End => t + grid.step(),
    }
}

fn non_finite(grid: &TimeGrid, node: usize) -> Error {
    Error::NonFiniteState { node, t: grid.node(node) }
}

/// Advances the flat ensemble `x` across interval `k` with control value `u`.
/// Every ensemble integration goes through here, so sub-span runs replay the
/// same arithmetic.
pub(crate) fn step_ensemble(mfp: &MeanFieldProblem, rk: &mut Rk4, k: usize, u: &[f64], x: &mut [f64]) -> Result<()> {
    let grid = mfp.horizon;
    advance(mfp, rk, grid.node(k), grid.step(), u, x);
    if !linalg::all_finite(x) {
        return Err(non_finite(&grid, k + 1));
    }
    Ok(())
}

/// One RK4 step of length `h` from time `t`, no bookkeeping.
pub(crate) fn advance(mfp: &MeanFieldProblem, rk: &mut Rk4, t: f64, h: f64, u: &[f64], x: &mut [f64]) {
    let dynamics = mfp.dynamics.as_ref();
    rk.step(x, h, |stage, s, out| dynamics.velocities(span_time(t, h, stage), s, u, out));
}

#[inline]
fn span_time(t: f64, h: f64, stage: Stage) -> f64 {
    match stage {
        Stage::Start => t,
        Stage::Mid => t + 0.5 * h,
        Stage::End => t + h,
    }
}

/// Lifted-adjoint costate at `t_k + h/2` for the ensemble `x_mid` there:
/// the ensemble is carried to `t_{k+1}` under `u`, `end_costate` maps that
/// ensemble to its costate, and one backward half step brings it back.
pub(crate) fn costate_mid(
    mfp: &MeanFieldProblem,
    k: usize,
    u: &[f64],
    x_mid: &[f64],
    end_costate: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let grid = mfp.horizon;
    let n = mfp.state_dim();
    let width = x_mid.len();
    let half = 0.5 * grid.step();
    let t_mid = grid.node(k) + half;
    let mut rk = Rk4::new(width);
    let mut x_end = x_mid.to_vec();
    advance(mfp, &mut rk, t_mid, half, u, &mut x_end);
    mfp.counter().add(1);
    if !linalg::all_finite(&x_end) {
        return Err(non_finite(&grid, k + 1));
    }
    let mut y = end_costate(&x_end)?;
    let mut seg = Segment::new(width, n);
    let mut scratch = [vec![0.0; width], vec![0.0; width]];
    seg.fill_span(mfp, x_mid, &x_end, u, t_mid, half, &mut scratch);
    let mut coupled = vec![0.0; width];
    let dynamics = mfp.dynamics.as_ref();
    rk.step(&mut y, -half, |stage, v, o| {
        let s = 2 - Segment::index(stage);
        let t = t_mid + 0.5 * half * s as f64;
        dynamics.coupling_transpose(t, &seg.x[s], u, v, &mut coupled);
        for ((oi, vi), (ji, ci)) in o.chunks_mut(n).zip(v.chunks(n)).zip(seg.jac[s].chunks(n * n).zip(coupled.chunks(n))) {
            linalg::matvec_t(ji, vi, oi);
            for (a, c) in oi.iter_mut().zip(ci) {
                *a = -*a - c;
            }
        }
    });
    if !linalg::all_finite(&y) {
        return Err(non_finite(&grid, k));
    }
    Ok(y)
}

pub(crate) fn flow_flat(
    mfp: &MeanFieldProblem,
    control: &Control,
    x0: &[f64],
    from: usize,
    to: usize,
) -> Result<EnsemblePath> {
    check_control(mfp, control)?;
    let grid = mfp.horizon;
    let n = mfp.state_dim();
    if from > to || to > grid.n_steps() {
        return Err(Error::InvalidInput(format!("bad node span {from}..={to}")));
    }
    if x0.is_empty() || !x0.len().is_multiple_of(n) {
        return Err(Error::DimensionMismatch(format!("{} coordinates for particles in dimension {n}", x0.len())));
    }
    let width = x0.len();
    let mut data = Vec::with_capacity((to - from + 1) * width);
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(width);
    for k in from..to {
        step_ensemble(mfp, &mut rk, k, control.value(k), &mut x)?;
        data.extend_from_slice(&x);
    }
    mfp.counter().add(to - from);
    Ok(EnsemblePath::from_parts(grid, from, n, width, data))
}

/// Particle characteristics `ẋ_i = F_t(x_i, μ_t, u_t)` from node `from` to `to`.
pub fn particle_flow(
    mfp: &MeanFieldProblem,
    control: &Control,
    ensemble0: &ParticleEnsemble,
    from: usize,
    to: usize,
) -> Result<EnsemblePath> {
    if ensemble0.dim() != mfp.state_dim() {
        return Err(Error::DimensionMismatch("ensemble dimension differs from the dynamics".into()));
    }
    flow_flat(mfp, control, ensemble0.as_slice(), from, to)
}

/// Ensemble at the three stage positions of interval `k` plus Jacobians there.
struct Segment {
    x: [Vec<f64>; 3],
    jac: [Vec<f64>; 3],
}

impl Segment {
    fn new(width: usize, n: usize) -> Self {
        let count = width / n;
        Self {
            x: [vec![0.0; width], vec![0.0; width], vec![0.0; width]],
            jac: [vec![0.0; count * n * n], vec![0.0; count * n * n], vec![0.0; count * n * n]],
        }
    }

    fn fill(&mut self, mfp: &MeanFieldProblem, path: &EnsemblePath, u: &[f64], k: usize, scratch: &mut [Vec<f64>; 2]) {
        let grid = mfp.horizon;
        self.fill_span(mfp, path.at(k), path.at(k + 1), u, grid.node(k), grid.step(), scratch);
    }

    #[allow(clippy::too_many_arguments)]
    fn fill_span(
        &mut self,
        mfp: &MeanFieldProblem,
        lo: &[f64],
        hi: &[f64],
        u: &[f64],
        t: f64,
        h: f64,
        scratch: &mut [Vec<f64>; 2],
    ) {
        let dynamics = mfp.dynamics.as_ref();
        self.x[0].copy_from_slice(lo);
        self.x[2].copy_from_slice(hi);
        let [f0, f1] = scratch;
        dynamics.velocities(t, &self.x[0], u, f0);
        dynamics.velocities(t + h, &self.x[2], u, f1);
        let [lo, mid, hi] = &mut self.x;
        hermite_mid(lo, hi, f0, f1, h, mid);
        for (s, stage) in [Stage::Start, Stage::Mid, Stage::End].into_iter().enumerate() {
            dynamics.jacobians_x(span_time(t, h, stage), &self.x[s], u, &mut self.jac[s]);
        }
    }

    fn index(stage: Stage) -> usize {
        match stage {
            Stage::Start => 0,
            Stage::Mid => 1,
            Stage::End => 2,
        }
    }
}

fn check_path(mfp: &MeanFieldProblem, path: &EnsemblePath, len: usize) -> Result<()> {
    if path.grid() != &mfp.horizon || path.dim() != mfp.state_dim() {
        return Err(Error::DimensionMismatch("ensemble path does not match the problem".into()));
    }
    if len != path.at(path.start_node()).len() {
        return Err(Error::DimensionMismatch("one vector per particle is required".into()));
    }
    Ok(())
}

/// Backward solution of the lifted adjoint
/// `ẏ_i = −D_xF(x_i, μ)ᵀ y_i − (1/N) Σ_j 𝐃F(x_j, μ, x_i)ᵀ y_j`
/// along the stored forward `path`, with `y(end) = terminal`.
pub fn lift_adjoint(
    mfp: &MeanFieldProblem,
    control: &Control,
    path: &EnsemblePath,
    terminal: &[f64],
) -> Result<EnsemblePath> {
    check_control(mfp, control)?;
    check_path(mfp, path, terminal.len())?;
    let grid = mfp.horizon;
    let n = mfp.state_dim();
    let width = terminal.len();
    let dynamics = mfp.dynamics.as_ref();
    let (start, end) = (path.start_node(), path.end_node());
    let len = end - start + 1;
    let mut data = vec![0.0; len * width];
    data[(len - 1) * width..].copy_from_slice(terminal);
    let mut y = terminal.to_vec();
    let mut seg = Segment::new(width, n);
    let mut scratch = [vec![0.0; width], vec![0.0; width]];
    let mut coupled = vec![0.0; width];
    let mut rk = Rk4::new(width);
    for k in (start..end).rev() {
        let u = control.value(k);
        seg.fill(mfp, path, u, k, &mut scratch);
        rk.step(&mut y, -grid.step(), |stage, v, o| {
            // a backward step starts at the right end of the interval
            let s = 2 - Segment::index(stage);
            let t = grid.node(k) + 0.5 * grid.step() * s as f64;
            dynamics.coupling_transpose(t, &seg.x[s], u, v, &mut coupled);
            for ((oi, vi), (ji, ci)) in
                o.chunks_mut(n).zip(v.chunks(n)).zip(seg.jac[s].chunks(n * n).zip(coupled.chunks(n)))
            {
                linalg::matvec_t(ji, vi, oi);
                for (a, c) in oi.iter_mut().zip(ci) {
                    *a = -*a - c;
                }
            }
        });
        if !linalg::all_finite(&y) {
            return Err(non_finite(&grid, k));
        }
        let i = k - start;
        data[i * width..(i + 1) * width].copy_from_slice(&y);
    }
    mfp.counter().add(end - start);
    Ok(EnsemblePath::from_parts(grid, start, n, width, data))
}

/// Forward solution of the tangent equation
/// `ẇ_i = D_xF(x_i, μ) w_i + (1/N) Σ_j 𝐃F(x_i, μ, x_j) w_j` along `path`.
pub fn pushforward_tangent(
    mfp: &MeanFieldProblem,
    control: &Control,
    path: &EnsemblePath,
    w0: &[f64],
) -> Result<EnsemblePath> {
    check_control(mfp, control)?;
    check_path(mfp, path, w0.len())?;
    let grid = mfp.horizon;
    let n = mfp.state_dim();
    let width = w0.len();
    let dynamics = mfp.dynamics.as_ref();
    let (start, end) = (path.start_node(), path.end_node());
    let mut data = Vec::with_capacity((end - start + 1) * width);
    data.extend_from_slice(w0);
    let mut w = w0.to_vec();
    let mut seg = Segment::new(width, n);
    let mut scratch = [vec![0.0; width], vec![0.0; width]];
    let mut coupled = vec![0.0; width];
    let mut rk = Rk4::new(width);
    for k in start..end {
        let u = control.value(k);
        seg.fill(mfp, path, u, k, &mut scratch);
        rk.step(&mut w, grid.step(), |stage, v, o| {
            let s = Segment::index(stage);
            dynamics.coupling(stage_time(&grid, k, stage), &seg.x[s], u, v, &mut coupled);
            for ((oi, vi), (ji, ci)) in
                o.chunks_mut(n).zip(v.chunks(n)).zip(seg.jac[s].chunks(n * n).zip(coupled.chunks(n)))
            {
                linalg::matvec(ji, vi, oi);
                linalg::axpy(1.0, ci, oi);
            }
        });
        if !linalg::all_finite(&w) {
            return Err(non_finite(&grid, k + 1));
        }
        data.extend_from_slice(&w);
    }
    mfp.counter().add(end - start);
    Ok(EnsemblePath::from_parts(grid, start, n, width, data))
}
