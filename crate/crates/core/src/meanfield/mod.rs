//! Mean-field control by particles: the state is an empirical measure
//! `μ = (1/N) Σ δ_{x_i}` transported by a velocity field that depends on
//! `μ` itself.
//!
//! Ensembles travel through the integrators as flat `N·n` slices. Matrices
//! are row-major, one `n × n` block per particle.

mod ensemble;
mod flow;
pub mod models;
mod variation;

use std::fmt;
use std::sync::Arc;

use rand::Rng;

pub use ensemble::{wasserstein2_1d, EnsemblePath, LiftedEnsemble, ParticleEnsemble};
pub use flow::{lift_adjoint, particle_flow, pushforward_tangent};
pub use variation::{
    mf_comparison_control, mf_descent, MfComparison, mf_exact_increment, mf_pmp_residual, mf_super_adjoint_gradient,
    mf_super_adjoint_value,
};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{Control, ControlSet, TimeGrid, WorkCounter};

/// Controlled nonlocal vector field `F_t(x, μ, u)`.
///
/// The batch methods have O(N²) defaults built from the per-particle ones;
/// models with mean-type interactions override them with O(N) versions.
pub trait MeanFieldDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `F_t(x, μ, u)` with `μ` the empirical measure of `points`.
    fn velocity(&self, t: f64, x: &[f64], points: &[f64], u: &[f64], out: &mut [f64]);

    /// `D_x F_t(x, μ, u)`.
    fn jac_x(&self, t: f64, x: &[f64], points: &[f64], u: &[f64], out: &mut [f64]);

    /// `𝐃F_t(x, μ, y)`: derivative of `F_t(x, ·, u)` with respect to moving
    /// the mass sitting at `y`.
    fn jac_measure(&self, t: f64, x: &[f64], points: &[f64], y: &[f64], u: &[f64], out: &mut [f64]);

    /// True when `F` ignores `μ`, so that `𝐃F ≡ 0`.
    fn measure_independent(&self) -> bool {
        false
    }

    fn velocities(&self, t: f64, points: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        for (x, o) in points.chunks(n).zip(out.chunks_mut(n)) {
            self.velocity(t, x, points, u, o);
        }
    }

    fn jacobians_x(&self, t: f64, points: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        for (x, o) in points.chunks(n).zip(out.chunks_mut(n * n)) {
            self.jac_x(t, x, points, u, o);
        }
    }

    /// `out_i = (1/N) Σ_j 𝐃F(x_i, μ, x_j) w_j`.
    fn coupling(&self, t: f64, points: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.measure_independent() {
            return;
        }
        let n = self.state_dim();
        let count = points.len() / n;
        let mut block = vec![0.0; n * n];
        let mut tmp = vec![0.0; n];
        for (i, xi) in points.chunks(n).enumerate() {
            let oi = &mut out[i * n..(i + 1) * n];
            for (xj, wj) in points.chunks(n).zip(w.chunks(n)) {
                self.jac_measure(t, xi, points, xj, u, &mut block);
                linalg::matvec(&block, wj, &mut tmp);
                linalg::axpy(1.0, &tmp, oi);
            }
            oi.iter_mut().for_each(|o| *o /= count as f64);
        }
    }

    /// `out_i = (1/N) Σ_j 𝐃F(x_j, μ, x_i)ᵀ y_j`.
    fn coupling_transpose(&self, t: f64, points: &[f64], u: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.measure_independent() {
            return;
        }
        let n = self.state_dim();
        let count = points.len() / n;
        let mut block = vec![0.0; n * n];
        let mut tmp = vec![0.0; n];
        for (i, xi) in points.chunks(n).enumerate() {
            let oi = &mut out[i * n..(i + 1) * n];
            for (xj, yj) in points.chunks(n).zip(y.chunks(n)) {
                self.jac_measure(t, xj, points, xi, u, &mut block);
                linalg::matvec_t(&block, yj, &mut tmp);
                linalg::axpy(1.0, &tmp, oi);
            }
            oi.iter_mut().for_each(|o| *o /= count as f64);
        }
    }
}

/// Terminal cost `ℓ(μ)` given through its value and the gradient of its flat
/// derivative.
pub trait MeanFieldCost: Send + Sync {
    fn value(&self, points: &[f64], dim: usize) -> f64;

    /// `∇_x (δℓ/δμ)(μ, x)`.
    fn flat_gradient(&self, points: &[f64], x: &[f64], out: &mut [f64]);

    fn flat_gradients(&self, points: &[f64], dim: usize, out: &mut [f64]) {
        for (x, o) in points.chunks(dim).zip(out.chunks_mut(dim)) {
            self.flat_gradient(points, x, o);
        }
    }
}

/// Minimise `ℓ(μ_T)` subject to the nonlocal continuity equation driven by
/// `dynamics`, starting from the ensemble `initial`.
#[derive(Clone)]
pub struct MeanFieldProblem {
    pub dynamics: Arc<dyn MeanFieldDynamics>,
    pub cost: Arc<dyn MeanFieldCost>,
    pub control_set: ControlSet,
    pub horizon: TimeGrid,
    pub initial: ParticleEnsemble,
    counter: Arc<WorkCounter>,
}

impl fmt::Debug for MeanFieldProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanFieldProblem")
            .field("state_dim", &self.state_dim())
            .field("particles", &self.particles())
            .field("control_set", &self.control_set)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl MeanFieldProblem {
    pub fn new(
        dynamics: Arc<dyn MeanFieldDynamics>,
        cost: Arc<dyn MeanFieldCost>,
        control_set: ControlSet,
        horizon: TimeGrid,
        initial: ParticleEnsemble,
    ) -> Result<Self> {
        if dynamics.state_dim() == 0 || dynamics.control_dim() == 0 {
            return Err(Error::InvalidInput("state and control dimensions must be positive".into()));
        }
        if control_set.dim() != dynamics.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "control set has dimension {}, dynamics expect {}",
                control_set.dim(),
                dynamics.control_dim()
            )));
        }
        if initial.dim() != dynamics.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "particles live in dimension {}, dynamics expect {}",
                initial.dim(),
                dynamics.state_dim()
            )));
        }
        Ok(Self { dynamics, cost, control_set, horizon, initial, counter: Arc::new(WorkCounter::default()) })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn particles(&self) -> usize {
        self.initial.len()
    }

    pub fn counter(&self) -> &WorkCounter {
        &self.counter
    }

    /// Ensemble integrations so far, in full-horizon equivalents.
    pub fn integrations(&self) -> f64 {
        self.counter.steps() as f64 / self.horizon.n_steps() as f64
    }

    pub fn detached(&self) -> Self {
        Self { counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: TimeGrid) -> Self {
        Self { horizon, counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn with_cost(&self, cost: Arc<dyn MeanFieldCost>) -> Self {
        Self { cost, counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn with_initial(&self, initial: ParticleEnsemble) -> Result<Self> {
        Self::new(self.dynamics.clone(), self.cost.clone(), self.control_set.clone(), self.horizon, initial)
    }

    pub fn constant_control(&self, value: Vec<f64>) -> Result<Control> {
        Control::admissible(self.horizon, vec![value; self.horizon.n_steps()], &self.control_set)
    }

    /// `ℓ` at the initial ensemble.
    pub fn cost_at(&self, points: &[f64]) -> f64 {
        self.cost.value(points, self.state_dim())
    }

    /// Worst relative error of `flat_gradient` against `N·∂ℓ/∂x_i` by central
    /// differences (moving one particle changes `ℓ` by `(1/N)∇(δℓ/δμ)·v`).
    pub fn validate_flat_gradient<R: Rng + ?Sized>(&self, probes: usize, rng: &mut R) -> f64 {
        let n = self.state_dim();
        let count = self.particles();
        let mut points = self.initial.as_slice().to_vec();
        let mut grad = vec![0.0; n];
        let mut worst = 0.0_f64;
        for _ in 0..probes {
            let i = rng.gen_range(0..count);
            self.cost.flat_gradient(&points, &points[i * n..(i + 1) * n], &mut grad);
            let mut fd = vec![0.0; n];
            for c in 0..n {
                let idx = i * n + c;
                let orig = points[idx];
                let step = 1e-6 * (1.0 + orig.abs());
                points[idx] = orig + step;
                let plus = self.cost.value(&points, n);
                points[idx] = orig - step;
                let minus = self.cost.value(&points, n);
                points[idx] = orig;
                fd[c] = count as f64 * (plus - minus) / (2.0 * step);
            }
            let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
            worst = worst.max(linalg::norm(&diff) / (1e-8 + linalg::norm(&fd).max(linalg::norm(&grad))));
        }
        worst
    }

    /// Worst relative error of the batch `coupling` against central
    /// differences of `velocities` when a single particle `j` moves; the
    /// response of another particle `i` is `(1/N) 𝐃F(x_i, μ, x_j) v`.
    pub fn validate_jac_measure<R: Rng + ?Sized>(&self, probes: usize, rng: &mut R) -> f64 {
        let n = self.state_dim();
        let count = self.particles();
        if count < 2 {
            return 0.0;
        }
        let width = n * count;
        let mut points = self.initial.as_slice().to_vec();
        let (mut vp, mut vm, mut w, mut out) = (vec![0.0; width], vec![0.0; width], vec![0.0; width], vec![0.0; width]);
        let mut worst = 0.0_f64;
        for _ in 0..probes {
            let u = self.control_set.sample(rng);
            let t = rng.gen_range(self.horizon.t0()..=self.horizon.t_final());
            let j = rng.gen_range(0..count);
            let i = (j + rng.gen_range(1..count)) % count;
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            w.iter_mut().for_each(|x| *x = 0.0);
            w[j * n..(j + 1) * n].copy_from_slice(&v);
            self.dynamics.coupling(t, &points, &u, &w, &mut out);
            let step = 1e-6 * (1.0 + linalg::norm(&points[j * n..(j + 1) * n]));
            let orig = points[j * n..(j + 1) * n].to_vec();
            for c in 0..n {
                points[j * n + c] = orig[c] + step * v[c];
            }
            self.dynamics.velocities(t, &points, &u, &mut vp);
            for c in 0..n {
                points[j * n + c] = orig[c] - step * v[c];
            }
            self.dynamics.velocities(t, &points, &u, &mut vm);
            points[j * n..(j + 1) * n].copy_from_slice(&orig);
            let fd: Vec<f64> = (0..n).map(|c| (vp[i * n + c] - vm[i * n + c]) / (2.0 * step)).collect();
            let got = &out[i * n..(i + 1) * n];
            let diff: Vec<f64> = got.iter().zip(&fd).map(|(a, b)| a - b).collect();
            worst = worst.max(linalg::norm(&diff) / (1e-10 + linalg::norm(&fd).max(linalg::norm(got))));
        }
        worst
    }
}
