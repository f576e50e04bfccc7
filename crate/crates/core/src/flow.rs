//! Fixed-step RK4 integrators for the state flow, the variational and
//! linearised equations (forward), and the adjoint and Riccati equations
//! (backward).
//!
//! Every integrator walks the same node sequence `t_k = t0 + k·h` of the
//! problem horizon, so integrating `s → τ` and then `τ → t` replays exactly
//! the arithmetic of a single `s → t` pass. Backward integrators need the
//! reference state between nodes; it is reconstructed by cubic Hermite
//! interpolation from the stored node values and the field evaluated there.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{ControlProblem, ControlSignal, Dynamics};
use crate::report::num;
use crate::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Start,
    Mid,
    End,
}

/// Classical fourth-order Runge–Kutta with reusable stage buffers.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` by `h` (negative for backward sweeps). `rhs` receives
    /// the stage position inside the step, not an absolute time.
    pub(crate) fn step(&mut self, y: &mut [f64], h: f64, mut rhs: impl FnMut(Stage, &[f64], &mut [f64])) {
        rhs(Stage::Start, y, &mut self.k1);
        for ((t, yi), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k1) {
            *t = yi + 0.5 * h * k;
        }
        rhs(Stage::Mid, &self.tmp, &mut self.k2);
        for ((t, yi), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k2) {
            *t = yi + 0.5 * h * k;
        }
        rhs(Stage::Mid, &self.tmp, &mut self.k3);
        for ((t, yi), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k3) {
            *t = yi + h * k;
        }
        rhs(Stage::End, &self.tmp, &mut self.k4);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Midpoint of the cubic Hermite interpolant on a step of length `h`.
#[inline]
pub(crate) fn hermite_mid(y0: &[f64], y1: &[f64], d0: &[f64], d1: &[f64], h: f64, out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = 0.5 * (y0[i] + y1[i]) + h / 8.0 * (d0[i] - d1[i]);
    }
}

macro_rules! node_series {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Samples of the ", $what, " on consecutive grid nodes `start..=end`.")]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            grid: TimeGrid,
            start: usize,
            dim: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub(crate) fn from_parts(grid: TimeGrid, start: usize, dim: usize, data: Vec<f64>) -> Self {
                debug_assert_eq!(data.len() % dim, 0);
                Self { grid, start, dim, data }
            }

            pub fn grid(&self) -> &TimeGrid {
                &self.grid
            }

            pub fn dim(&self) -> usize {
                self.dim
            }

            /// First node index covered.
            pub fn start_node(&self) -> usize {
                self.start
            }

            /// Last node index covered.
            pub fn end_node(&self) -> usize {
                self.start + self.len() - 1
            }

            pub fn len(&self) -> usize {
                self.data.len() / self.dim
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            /// Value at absolute node index `node`.
            #[inline]
            pub fn at(&self, node: usize) -> &[f64] {
                let i = node - self.start;
                &self.data[i * self.dim..(i + 1) * self.dim]
            }

            pub fn first(&self) -> &[f64] {
                self.at(self.start)
            }

            pub fn last(&self) -> &[f64] {
                self.at(self.end_node())
            }

            pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
                let (grid, start) = (self.grid, self.start);
                self.data.chunks(self.dim).enumerate().map(move |(i, v)| (grid.node(start + i), v))
            }

            /// CSV with header `t,<prefix>_1..<prefix>_n`.
            pub fn to_csv(&self, prefix: &str) -> String {
                let mut s = String::from("t");
                for i in 1..=self.dim {
                    s.push_str(&format!(",{prefix}_{i}"));
                }
                s.push('\n');
                for (t, v) in self.iter() {
                    s.push_str(&num(t));
                    for x in v {
                        s.push(',');
                        s.push_str(&num(*x));
                    }
                    s.push('\n');
                }
                s
            }
        }
    };
}

node_series!(Trajectory, "state");
node_series!(Costate, "adjoint (costate)");

impl Trajectory {
    /// Same as [`Trajectory::at`].
    pub fn state(&self, node: usize) -> &[f64] {
        self.at(node)
    }
}

/// Solution of the matrix Riccati equation on nodes `start..=end`.
///
/// Sign convention: `P(T) = −D²ℓ(x̄(T))`, so that `P(t) = −D²p̄_t(x̄(t))`
/// where `p̄_t = ℓ ∘ Φ̄_{t,T}` is the super-adjoint. [`RiccatiPath::hessian`]
/// returns the Hessian `−P` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiPath {
    grid: TimeGrid,
    start: usize,
    dim: usize,
    data: Vec<f64>,
}

impl RiccatiPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn start_node(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.dim * self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn raw(&self, node: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        let i = node - self.start;
        &self.data[i * nn..(i + 1) * nn]
    }

    /// `P(t_node)`.
    pub fn matrix(&self, node: usize) -> DMatrix<f64> {
        linalg::to_matrix(self.raw(node), self.dim)
    }

    /// `−P(t_node) = D²p̄_t(x̄(t))`.
    pub fn hessian(&self, node: usize) -> DMatrix<f64> {
        -self.matrix(node)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let nn = self.dim * self.dim;
        self.data.chunks(nn).map(|m| linalg::asymmetry(m, self.dim)).fold(0.0, f64::max)
    }
}

fn check_grid(problem: &ControlProblem, control: &dyn ControlSignal) -> Result<()> {
    if control.grid() != &problem.horizon {
        return Err(Error::DimensionMismatch("control grid differs from the problem horizon".into()));
    }
    Ok(())
}

fn non_finite(grid: &TimeGrid, node: usize) -> Error {
    Error::NonFiniteState { node, t: grid.node(node) }
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

/// Reference state at the three RK4 stage positions of interval `k`.
pub(crate) struct Segment {
    pub lo: Vec<f64>,
    pub mid: Vec<f64>,
    pub hi: Vec<f64>,
    f_lo: Vec<f64>,
    f_hi: Vec<f64>,
}

impl Segment {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            mid: vec![0.0; dim],
            hi: vec![0.0; dim],
            f_lo: vec![0.0; dim],
            f_hi: vec![0.0; dim],
        }
    }

    pub(crate) fn fill(&mut self, dynamics: &dyn Dynamics, control: &dyn ControlSignal, traj: &Trajectory, k: usize) {
        let grid = traj.grid();
        self.lo.copy_from_slice(traj.at(k));
        self.hi.copy_from_slice(traj.at(k + 1));
        control.field(dynamics, k, grid.node(k), &self.lo, &mut self.f_lo);
        control.field(dynamics, k, grid.node(k) + grid.step(), &self.hi, &mut self.f_hi);
        hermite_mid(&self.lo, &self.hi, &self.f_lo, &self.f_hi, grid.step(), &mut self.mid);
    }

    pub(crate) fn get(&self, stage: Stage) -> &[f64] {
        match stage {
            Stage::Start => &self.lo,
            Stage::Mid => &self.mid,
            Stage::End => &self.hi,
        }
    }
}

/// One buffer per stage position of an interval (Jacobians, forcing terms).
struct StageBuffers {
    lo: Vec<f64>,
    mid: Vec<f64>,
    hi: Vec<f64>,
}

impl StageBuffers {
    fn new(len: usize) -> Self {
        Self { lo: vec![0.0; len], mid: vec![0.0; len], hi: vec![0.0; len] }
    }

    fn fill(&mut self, dynamics: &dyn Dynamics, control: &dyn ControlSignal, grid: &TimeGrid, k: usize, seg: &Segment) {
        control.jacobian(dynamics, k, stage_time(grid, k, Stage::Start), &seg.lo, &mut self.lo);
        control.jacobian(dynamics, k, stage_time(grid, k, Stage::Mid), &seg.mid, &mut self.mid);
        control.jacobian(dynamics, k, stage_time(grid, k, Stage::End), &seg.hi, &mut self.hi);
    }

    fn get(&self, stage: Stage) -> &[f64] {
        match stage {
            Stage::Start => &self.lo,
            Stage::Mid => &self.mid,
            Stage::End => &self.hi,
        }
    }
}

/// Maps a stage of a backward step over interval `k` (which starts at node
/// `k + 1`) to the position inside the interval.
#[inline]
fn backward(stage: Stage) -> Stage {
    match stage {
        Stage::Start => Stage::End,
        Stage::Mid => Stage::Mid,
        Stage::End => Stage::Start,
    }
}

/// Node values of `t ↦ Φ^u_{t_from, t}(x0)` for `t_from ≤ t ≤ t_to`.
pub fn integrate_flow(
    problem: &ControlProblem,
    control: &dyn ControlSignal,
    x0: &[f64],
    from: usize,
    to: usize,
) -> Result<Trajectory> {
    check_grid(problem, control)?;
    let grid = problem.horizon;
    let n = problem.state_dim();
    if from > to || to > grid.n_steps() {
        return Err(Error::InvalidInput(format!("bad node span {from}..={to}")));
    }
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!("x0 has dimension {}, expected {n}", x0.len())));
    }
    if !linalg::all_finite(x0) {
        return Err(non_finite(&grid, from));
    }
    let dynamics = problem.dynamics.as_ref();
    let h = grid.step();
    let mut data = Vec::with_capacity((to - from + 1) * n);
    data.extend_from_slice(x0);
    let mut y = x0.to_vec();
    let mut rk = Rk4::new(n);
    for k in from..to {
        rk.step(&mut y, h, |stage, s, out| {
            control.field(dynamics, k, stage_time(&grid, k, stage), s, out)
        });
        if !linalg::all_finite(&y) {
            return Err(non_finite(&grid, k + 1));
        }
        data.extend_from_slice(&y);
    }
    problem.counter().add(to - from);
    Ok(Trajectory::from_parts(grid, from, n, data))
}

/// Full-horizon trajectory from the problem's initial state.
pub fn simulate(problem: &ControlProblem, control: &dyn ControlSignal) -> Result<Trajectory> {
    integrate_flow(problem, control, &problem.initial_state, 0, problem.horizon.n_steps())
}

/// Terminal cost `ℓ(x^u(T))`.
pub fn cost_of(problem: &ControlProblem, control: &dyn ControlSignal) -> Result<f64> {
    Ok(problem.cost.value(simulate(problem, control)?.last()))
}

/// Tangent vectors `w(t) = DΦ_{t_from, t}(x̄(t_from)) w0` along `trajectory`.
pub fn integrate_variational(
    problem: &ControlProblem,
    control: &dyn ControlSignal,
    trajectory: &Trajectory,
    w0: &[f64],
    from: usize,
    to: usize,
) -> Result<Vec<Vec<f64>>> {
    check_grid(problem, control)?;
    let n = problem.state_dim();
    if from > to || from < trajectory.start_node() || to > trajectory.end_node() {
        return Err(Error::InvalidInput(format!("trajectory does not cover {from}..={to}")));
    }
    if w0.len() != n {
        return Err(Error::DimensionMismatch("w0 has the wrong dimension".into()));
    }
    let grid = problem.horizon;
    let dynamics = problem.dynamics.as_ref();
    let mut seg = Segment::new(n);
    let mut jac = StageBuffers::new(n * n);
    let mut rk = Rk4::new(n);
    let mut w = w0.to_vec();
    let mut out = vec![w.clone()];
    for k in from..to {
        seg.fill(dynamics, control, trajectory, k);
        jac.fill(dynamics, control, &grid, k, &seg);
        rk.step(&mut w, grid.step(), |stage, v, o| linalg::matvec(jac.get(stage), v, o));
        if !linalg::all_finite(&w) {
            return Err(non_finite(&grid, k + 1));
        }
        out.push(w.clone());
    }
    problem.counter().add(to - from);
    Ok(out)
}

/// Backward solution of `ṗ = −D_x f_t(x(t), u_t)ᵀ p` with `p(end) = terminal`
/// over the span of `trajectory`. Usually `terminal = ∇ℓ(x(T))`.
pub fn integrate_adjoint(
    problem: &ControlProblem,
    control: &dyn ControlSignal,
    trajectory: &Trajectory,
    terminal: &[f64],
) -> Result<Costate> {
    check_grid(problem, control)?;
    let n = problem.state_dim();
    if terminal.len() != n {
        return Err(Error::DimensionMismatch("terminal costate has the wrong dimension".into()));
    }
    let grid = problem.horizon;
    let dynamics = problem.dynamics.as_ref();
    let (start, end) = (trajectory.start_node(), trajectory.end_node());
    let len = end - start + 1;
    let mut data = vec![0.0; len * n];
    data[(len - 1) * n..].copy_from_slice(terminal);
    let mut p = terminal.to_vec();
    let mut seg = Segment::new(n);
    let mut jac = StageBuffers::new(n * n);
    let mut rk = Rk4::new(n);
    for k in (start..end).rev() {
        seg.fill(dynamics, control, trajectory, k);
        jac.fill(dynamics, control, &grid, k, &seg);
        rk.step(&mut p, -grid.step(), |stage, v, o| {
            linalg::matvec_t(jac.get(backward(stage)), v, o);
            o.iter_mut().for_each(|x| *x = -*x);
        });
        if !linalg::all_finite(&p) {
            return Err(non_finite(&grid, k));
        }
        let i = k - start;
        data[i * n..(i + 1) * n].copy_from_slice(&p);
    }
    problem.counter().add(end - start);
    Ok(Costate::from_parts(grid, start, n, data))
}

/// Adjoint of the full-horizon trajectory with `p(T) = ∇ℓ(x(T))`.
pub fn adjoint_of(problem: &ControlProblem, control: &dyn ControlSignal, trajectory: &Trajectory) -> Result<Costate> {
    let mut g = vec![0.0; problem.state_dim()];
    problem.cost.gradient(trajectory.last(), &mut g);
    integrate_adjoint(problem, control, trajectory, &g)
}

/// `D²_x H_t(x, p, u) = Σ_i p_i D²f^i` by central differences of `D_x fᵀ p`
/// with step `1e-5·(1 + |x|)`. Row-major, symmetrised.
pub(crate) fn hamiltonian_hessian(
    dynamics: &dyn Dynamics,
    control: &dyn ControlSignal,
    k: usize,
    t: f64,
    x: &[f64],
    p: &[f64],
    out: &mut [f64],
) {
    let n = x.len();
    let delta = 1e-5 * (1.0 + linalg::norm(x));
    let mut xs = x.to_vec();
    let mut jac = vec![0.0; n * n];
    let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        xs[j] = x[j] + delta;
        control.jacobian(dynamics, k, t, &xs, &mut jac);
        linalg::matvec_t(&jac, p, &mut gp);
        xs[j] = x[j] - delta;
        control.jacobian(dynamics, k, t, &xs, &mut jac);
        linalg::matvec_t(&jac, p, &mut gm);
        xs[j] = x[j];
        for i in 0..n {
            out[i * n + j] = (gp[i] - gm[i]) / (2.0 * delta);
        }
    }
    linalg::symmetrize(out, n);
}

/// Riccati path with `P(T) = −D²ℓ(x̄(T))`; fails with
/// [`Error::MissingHessian`] when the cost has no Hessian.
pub fn integrate_riccati(
    problem: &ControlProblem,
    control: &dyn ControlSignal,
    trajectory: &Trajectory,
    costate: &Costate,
) -> Result<RiccatiPath> {
    let hess = problem.cost.hessian(trajectory.last()).ok_or(Error::MissingHessian)?;
    integrate_riccati_from(problem, control, trajectory, costate, &(-hess))
}

/// Backward RK4 for
/// `Ṗ = −Df[t]ᵀ P − P Df[t] + D²H[t]`, `P(end) = terminal`,
/// with `Df[t] = D_x f_t(x̄(t), ū_t)` and `D²H[t] = D²_x (p̄(t)·f_t)(x̄(t), ū_t)`.
///
/// With `terminal = −D²ℓ` the solution is `P(t) = −D²p̄_t(x̄(t))`. `P` is
/// symmetrised after every step.
pub fn integrate_riccati_from(
    problem: &ControlProblem,
    control: &dyn ControlSignal,
    trajectory: &Trajectory,
    costate: &Costate,
    terminal: &DMatrix<f64>,
) -> Result<RiccatiPath> {
    check_grid(problem, control)?;
    let n = problem.state_dim();
    if terminal.nrows() != n || terminal.ncols() != n {
        return Err(Error::DimensionMismatch("terminal matrix must be n × n".into()));
    }
    if costate.start_node() != trajectory.start_node() || costate.end_node() != trajectory.end_node() {
        return Err(Error::InvalidInput("costate and trajectory spans differ".into()));
    }
    let grid = problem.horizon;
    let dynamics = problem.dynamics.as_ref();
    let affine = dynamics.is_state_affine();
    let (start, end) = (trajectory.start_node(), trajectory.end_node());
    let nn = n * n;
    let len = end - start + 1;
    let mut data = vec![0.0; len * nn];
    let mut pm: Vec<f64> = (0..nn).map(|idx| terminal[(idx / n, idx % n)]).collect();
    linalg::symmetrize(&mut pm, n);
    data[(len - 1) * nn..].copy_from_slice(&pm);

    let mut seg = Segment::new(n);
    let mut jac = StageBuffers::new(n * n);
    let mut d2h = StageBuffers::new(n * n);
    let mut costate_mid = vec![0.0; n];
    let (mut dp_lo, mut dp_hi) = (vec![0.0; n], vec![0.0; n]);
    let mut rk = Rk4::new(nn);
    for k in (start..end).rev() {
        seg.fill(dynamics, control, trajectory, k);
        jac.fill(dynamics, control, &grid, k, &seg);
        let (p_lo, p_hi) = (costate.at(k), costate.at(k + 1));
        linalg::matvec_t(&jac.lo, p_lo, &mut dp_lo);
        linalg::matvec_t(&jac.hi, p_hi, &mut dp_hi);
        dp_lo.iter_mut().chain(dp_hi.iter_mut()).for_each(|x| *x = -*x);
        hermite_mid(p_lo, p_hi, &dp_lo, &dp_hi, grid.step(), &mut costate_mid);
        if affine {
            d2h.lo.iter_mut().chain(d2h.mid.iter_mut()).chain(d2h.hi.iter_mut()).for_each(|x| *x = 0.0);
        } else {
            for (stage, p) in [(Stage::Start, p_lo), (Stage::Mid, &costate_mid[..]), (Stage::End, p_hi)] {
                let t = stage_time(&grid, k, stage);
                let out = match stage {
                    Stage::Start => &mut d2h.lo,
                    Stage::Mid => &mut d2h.mid,
                    Stage::End => &mut d2h.hi,
                };
                hamiltonian_hessian(dynamics, control, k, t, seg.get(stage), p, out);
            }
        }
        rk.step(&mut pm, -grid.step(), |stage, p, o| {
            let s = backward(stage);
            let a = jac.get(s);
            let q = d2h.get(s);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = q[i * n + j];
                    for l in 0..n {
                        // (Aᵀ P)_{ij} = Σ_l A_{li} P_{lj};  (P A)_{ij} = Σ_l P_{il} A_{lj}
                        acc -= a[l * n + i] * p[l * n + j] + p[i * n + l] * a[l * n + j];
                    }
                    o[i * n + j] = acc;
                }
            }
        });
        linalg::symmetrize(&mut pm, n);
        if !linalg::all_finite(&pm) {
            return Err(non_finite(&grid, k));
        }
        let i = k - start;
        data[i * nn..(i + 1) * nn].copy_from_slice(&pm);
    }
    problem.counter().add(end - start);
    Ok(RiccatiPath { grid, start, dim: n, data })
}

/// Linearised response `ẏ = Df[t] y + f_t(x̄, u_t) − f_t(x̄, ū_t)`, `y(t_start) = 0`,
/// along the reference trajectory.
pub fn integrate_linearized(
    problem: &ControlProblem,
    control_ref: &dyn ControlSignal,
    control_target: &dyn ControlSignal,
    trajectory_ref: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    check_grid(problem, control_ref)?;
    check_grid(problem, control_target)?;
    let n = problem.state_dim();
    let grid = problem.horizon;
    let dynamics = problem.dynamics.as_ref();
    let (start, end) = (trajectory_ref.start_node(), trajectory_ref.end_node());
    let mut seg = Segment::new(n);
    let mut jac = StageBuffers::new(n * n);
    let mut forcing = StageBuffers::new(n);
    let (mut fa, mut fb) = (vec![0.0; n], vec![0.0; n]);
    let mut rk = Rk4::new(n);
    let mut y = vec![0.0; n];
    let mut out = vec![y.clone()];
    for k in start..end {
        seg.fill(dynamics, control_ref, trajectory_ref, k);
        jac.fill(dynamics, control_ref, &grid, k, &seg);
        for stage in [Stage::Start, Stage::Mid, Stage::End] {
            let t = stage_time(&grid, k, stage);
            control_target.field(dynamics, k, t, seg.get(stage), &mut fa);
            control_ref.field(dynamics, k, t, seg.get(stage), &mut fb);
            let dst = match stage {
                Stage::Start => &mut forcing.lo,
                Stage::Mid => &mut forcing.mid,
                Stage::End => &mut forcing.hi,
            };
            for i in 0..n {
                dst[i] = fa[i] - fb[i];
            }
        }
        rk.step(&mut y, grid.step(), |stage, v, o| {
            linalg::matvec(jac.get(stage), v, o);
            linalg::axpy(1.0, forcing.get(stage), o);
        });
        if !linalg::all_finite(&y) {
            return Err(non_finite(&grid, k + 1));
        }
        out.push(y.clone());
    }
    problem.counter().add(end - start);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Control, ControlSet, FnDynamics, LinearCost, QuadraticCost};
    use std::sync::Arc;

    fn scalar_problem(a: f64, n_steps: usize, t_final: f64) -> ControlProblem {
        // ẋ = a x + u
        let dynamics = FnDynamics::new(
            1,
            1,
            move |_, x, u, o| o[0] = a * x[0] + u[0],
            move |_, _, _, j| j[0] = a,
        )
        .state_affine(true);
        ControlProblem::new(
            Arc::new(dynamics),
            Arc::new(QuadraticCost::isotropic(0.5, vec![0.0])),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            TimeGrid::new(0.0, t_final, n_steps).unwrap(),
            vec![1.0],
        )
        .unwrap()
    }

    fn zero_field(n: usize) -> ControlProblem {
        let dynamics = FnDynamics::new(
            n,
            1,
            |_, _, _, o| o.iter_mut().for_each(|x| *x = 0.0),
            |_, _, _, j| j.iter_mut().for_each(|x| *x = 0.0),
        );
        ControlProblem::new(
            Arc::new(dynamics),
            Arc::new(QuadraticCost::isotropic(0.5, vec![0.0; n])),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            TimeGrid::new(0.0, 1.0, 10).unwrap(),
            vec![0.3; n],
        )
        .unwrap()
    }

    #[test]
    fn zero_field_is_constant() {
        let p = zero_field(2);
        let u = p.constant_control(vec![0.0]).unwrap();
        let x = integrate_flow(&p, &u, &[1.5, -2.0], 0, 10).unwrap();
        assert!(x.iter().all(|(_, s)| s == [1.5, -2.0]));
        let w = integrate_variational(&p, &u, &x, &[1.0, 2.0], 0, 10).unwrap();
        assert!(w.iter().all(|v| v == &[1.0, 2.0]));
        let c = integrate_adjoint(&p, &u, &x, &[3.0, 4.0]).unwrap();
        assert!(c.iter().all(|(_, v)| v == [3.0, 4.0]));
        let r = integrate_riccati(&p, &u, &x, &c).unwrap();
        for k in 0..=10 {
            assert_eq!(r.matrix(k), r.matrix(10));
        }
    }

    #[test]
    fn unit_field_is_exact() {
        let dynamics = FnDynamics::new(1, 1, |_, _, u, o| o[0] = u[0], |_, _, _, j| j[0] = 0.0);
        let p = ControlProblem::new(
            Arc::new(dynamics),
            Arc::new(LinearCost { coeffs: vec![1.0] }),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            TimeGrid::new(0.0, 1.0, 7).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let u = p.constant_control(vec![1.0]).unwrap();
        let x = simulate(&p, &u).unwrap();
        assert!((x.last()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let p = scalar_problem(-1.0, 100, 1.0);
        let u = p.constant_control(vec![0.0]).unwrap();
        let x = simulate(&p, &u).unwrap();
        assert!((x.last()[0] - (-1.0_f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn variational_and_adjoint_of_linear_scalar() {
        let a = 0.7;
        let p = scalar_problem(a, 100, 1.0);
        let u = p.constant_control(vec![0.2]).unwrap();
        let x = simulate(&p, &u).unwrap();
        let w = integrate_variational(&p, &u, &x, &[2.0], 0, 100).unwrap();
        let c = integrate_adjoint(&p, &u, &x, &[3.0]).unwrap();
        for k in 0..=100 {
            let t = p.horizon.node(k);
            assert!((w[k][0] - 2.0 * (a * t).exp()).abs() < 1e-9);
            assert!((c.at(k)[0] - 3.0 * (a * (1.0 - t)).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn riccati_scalar_closed_form() {
        let a = 0.4;
        let p = scalar_problem(a, 100, 1.0);
        let u = p.constant_control(vec![0.0]).unwrap();
        let x = simulate(&p, &u).unwrap();
        let c = adjoint_of(&p, &u, &x).unwrap();
        let terminal = DMatrix::from_element(1, 1, -1.0);
        let r = integrate_riccati_from(&p, &u, &x, &c, &terminal).unwrap();
        for k in 0..=100 {
            let t = p.horizon.node(k);
            let expected = -(2.0 * a * (1.0 - t)).exp();
            assert!((r.matrix(k)[(0, 0)] - expected).abs() < 1e-8, "node {k}");
        }
    }

    #[test]
    fn chain_rule_is_node_exact() {
        let p = scalar_problem(-0.3, 50, 2.0);
        let u = Control::from_fn(p.horizon, |t| vec![(3.0 * t).sin()]).unwrap();
        let full = integrate_flow(&p, &u, &[0.4], 5, 50).unwrap();
        let first = integrate_flow(&p, &u, &[0.4], 5, 20).unwrap();
        let second = integrate_flow(&p, &u, first.last(), 20, 50).unwrap();
        for k in 20..=50 {
            assert_eq!(full.at(k), second.at(k));
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let dynamics = FnDynamics::new(1, 1, |_, x, _, o| o[0] = x[0] * x[0], |_, x, _, j| j[0] = 2.0 * x[0]);
        let p = ControlProblem::new(
            Arc::new(dynamics),
            Arc::new(LinearCost { coeffs: vec![1.0] }),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            TimeGrid::new(0.0, 10.0, 20).unwrap(),
            vec![10.0],
        )
        .unwrap();
        let u = p.constant_control(vec![0.0]).unwrap();
        assert!(matches!(simulate(&p, &u), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn linearized_with_identical_controls_vanishes() {
        let p = scalar_problem(0.5, 20, 1.0);
        let u = Control::from_fn(p.horizon, |t| vec![t - 0.5]).unwrap();
        let x = simulate(&p, &u).unwrap();
        let y = integrate_linearized(&p, &u, &u, &x).unwrap();
        assert!(y.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn missing_hessian_is_an_error() {
        struct NoHess;
        impl crate::problem::TerminalCost for NoHess {
            fn value(&self, x: &[f64]) -> f64 {
                x[0]
            }
            fn gradient(&self, _: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let p = scalar_problem(0.5, 10, 1.0).with_cost(Arc::new(NoHess));
        let u = p.constant_control(vec![0.0]).unwrap();
        let x = simulate(&p, &u).unwrap();
        let c = adjoint_of(&p, &u, &x).unwrap();
        assert_eq!(integrate_riccati(&p, &u, &x, &c).unwrap_err(), Error::MissingHessian);
    }

    #[test]
    fn csv_header_and_rows() {
        let p = zero_field(2);
        let u = p.constant_control(vec![0.0]).unwrap();
        let x = integrate_flow(&p, &u, &[1.0, 2.0], 8, 10).unwrap();
        let csv = x.to_csv("x");
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2");
        assert_eq!(lines.len(), 4);
    }
}
