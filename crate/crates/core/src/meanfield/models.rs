//! Built-in nonlocal fields and mean-field costs, plus wrappers that view a
//! classical problem as a measure-independent mean-field one.

use std::sync::Arc;

use super::ensemble::mean_of;
use super::{MeanFieldCost, MeanFieldDynamics, MeanFieldProblem, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::problem::{ControlSet, Dynamics, TerminalCost, TimeGrid};
use crate::scenarios::Params;

pub const MEAN_FIELD: [&str; 3] = ["mf-steering", "mf-interaction", "mf-kernel"];

/// `F(x, μ, u) = u − α(x − m(μ)) − β sin x` componentwise, `m` the mean.
/// `β = 0, α = 1` is the steering model whose mean obeys `ṁ = u`.
#[derive(Debug, Clone, Copy)]
pub struct MeanReversion {
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl MeanFieldDynamics for MeanReversion {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, _: f64, x: &[f64], points: &[f64], u: &[f64], out: &mut [f64]) {
        let m = mean_of(points, self.dim);
        for c in 0..self.dim {
            out[c] = u[c] - self.alpha * (x[c] - m[c]) - self.beta * x[c].sin();
        }
    }
    fn jac_x(&self, _: f64, x: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..self.dim {
            out[c * self.dim + c] = -self.alpha - self.beta * x[c].cos();
        }
    }
    fn jac_measure(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..self.dim {
            out[c * self.dim + c] = self.alpha;
        }
    }
    fn velocities(&self, _: f64, points: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let m = mean_of(points, n);
        for (x, o) in points.chunks(n).zip(out.chunks_mut(n)) {
            for c in 0..n {
                o[c] = u[c] - self.alpha * (x[c] - m[c]) - self.beta * x[c].sin();
            }
        }
    }
    fn jacobians_x(&self, t: f64, points: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for (x, o) in points.chunks(n).zip(out.chunks_mut(n * n)) {
            self.jac_x(t, x, points, u, o);
        }
    }
    fn coupling(&self, _: f64, points: &[f64], _: &[f64], w: &[f64], out: &mut [f64]) {
        let m = mean_of(w, self.dim);
        debug_assert_eq!(points.len(), w.len());
        for o in out.chunks_mut(self.dim) {
            for c in 0..self.dim {
                o[c] = self.alpha * m[c];
            }
        }
    }
    fn coupling_transpose(&self, t: f64, points: &[f64], u: &[f64], y: &[f64], out: &mut [f64]) {
        // 𝐃F = αI is symmetric and independent of its arguments
        self.coupling(t, points, u, y, out)
    }
}

/// `F(x, μ, u) = u − κ ∫ tanh(x − y) dμ(y)` componentwise. Uses the generic
/// O(N²) batch methods.
#[derive(Debug, Clone, Copy)]
pub struct TanhKernel {
    pub dim: usize,
    pub kappa: f64,
}

impl MeanFieldDynamics for TanhKernel {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, _: f64, x: &[f64], points: &[f64], u: &[f64], out: &mut [f64]) {
        let count = (points.len() / self.dim) as f64;
        for c in 0..self.dim {
            let pull: f64 = points.chunks(self.dim).map(|y| (x[c] - y[c]).tanh()).sum();
            out[c] = u[c] - self.kappa * pull / count;
        }
    }
    fn jac_x(&self, _: f64, x: &[f64], points: &[f64], _: &[f64], out: &mut [f64]) {
        let count = (points.len() / self.dim) as f64;
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..self.dim {
            let s: f64 = points.chunks(self.dim).map(|y| sech2(x[c] - y[c])).sum();
            out[c * self.dim + c] = -self.kappa * s / count;
        }
    }
    fn jac_measure(&self, _: f64, x: &[f64], _: &[f64], y: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..self.dim {
            out[c * self.dim + c] = self.kappa * sech2(x[c] - y[c]);
        }
    }
}

fn sech2(z: f64) -> f64 {
    1.0 / z.cosh().powi(2)
}

/// `ℓ(μ) = c ∫ |x − z|² dμ + ½ λ |m(μ) − z|²`.
#[derive(Debug, Clone)]
pub struct TrackingCost {
    pub target: Vec<f64>,
    pub spread: f64,
    pub mean_weight: f64,
}

impl MeanFieldCost for TrackingCost {
    fn value(&self, points: &[f64], dim: usize) -> f64 {
        let count = (points.len() / dim) as f64;
        let spread: f64 = points
            .chunks(dim)
            .map(|x| x.iter().zip(&self.target).map(|(a, z)| (a - z).powi(2)).sum::<f64>())
            .sum();
        let m = mean_of(points, dim);
        let offset: f64 = m.iter().zip(&self.target).map(|(a, z)| (a - z).powi(2)).sum();
        self.spread * spread / count + 0.5 * self.mean_weight * offset
    }
    fn flat_gradient(&self, points: &[f64], x: &[f64], out: &mut [f64]) {
        let m = mean_of(points, x.len());
        for c in 0..x.len() {
            out[c] = 2.0 * self.spread * (x[c] - self.target[c]) + self.mean_weight * (m[c] - self.target[c]);
        }
    }
    fn flat_gradients(&self, points: &[f64], dim: usize, out: &mut [f64]) {
        let m = mean_of(points, dim);
        for (x, o) in points.chunks(dim).zip(out.chunks_mut(dim)) {
            for c in 0..dim {
                o[c] = 2.0 * self.spread * (x[c] - self.target[c]) + self.mean_weight * (m[c] - self.target[c]);
            }
        }
    }
}

/// Classical dynamics seen as a nonlocal field that ignores the measure.
pub struct LocalField(pub Arc<dyn Dynamics>);

impl MeanFieldDynamics for LocalField {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.0.control_dim()
    }
    fn velocity(&self, t: f64, x: &[f64], _: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.field(t, x, u, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], _: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.jac_x(t, x, u, out)
    }
    fn jac_measure(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn measure_independent(&self) -> bool {
        true
    }
}

/// `ℓ(μ) = ∫ φ dμ`, whose flat derivative is `φ` itself.
pub struct ExpectedCost(pub Arc<dyn TerminalCost>);

impl MeanFieldCost for ExpectedCost {
    fn value(&self, points: &[f64], dim: usize) -> f64 {
        let count = (points.len() / dim) as f64;
        points.chunks(dim).map(|x| self.0.value(x)).sum::<f64>() / count
    }
    fn flat_gradient(&self, _: &[f64], x: &[f64], out: &mut [f64]) {
        self.0.gradient(x, out)
    }
}

/// Everything a mean-field scenario needs besides its name.
#[derive(Debug, Clone)]
pub struct MfSetup {
    pub params: Params,
    pub target: Option<Vec<f64>>,
    pub horizon: TimeGrid,
    pub control_set: ControlSet,
    pub initial: ParticleEnsemble,
}

fn check(params: &Params, scenario: &str, allowed: &[&str]) -> Result<()> {
    match params.0.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::InvalidInput(format!("unknown parameter `{k}` for scenario {scenario}"))),
        None => Ok(()),
    }
}

/// Builds the mean-field scenario `name`.
///
/// * `mf-steering`: `F = u − (x − m)`, `ℓ = ∫ |x − z|² dμ`;
/// * `mf-interaction`: `F = u − α(x − m) − β sin x`, `ℓ = ∫ ½|x − z|² dμ + ½λ|m − z|²`;
/// * `mf-kernel`: `F = u − κ ∫ tanh(x − y) dμ(y)`, `ℓ = ∫ ½|x − z|² dμ`.
pub fn meanfield(name: &str, setup: &MfSetup) -> Result<MeanFieldProblem> {
    let p = &setup.params;
    let dim = setup.initial.dim();
    let target = setup.target.clone().unwrap_or_else(|| vec![0.5; dim]);
    if target.len() != dim {
        return Err(Error::DimensionMismatch(format!("{name} needs a target of dimension {dim}")));
    }
    let (dynamics, cost): (Arc<dyn MeanFieldDynamics>, TrackingCost) = match name {
        "mf-steering" => {
            check(p, name, &[])?;
            (Arc::new(MeanReversion { dim, alpha: 1.0, beta: 0.0 }), TrackingCost { target, spread: 1.0, mean_weight: 0.0 })
        }
        "mf-interaction" => {
            check(p, name, &["alpha", "beta", "lambda"])?;
            let dynamics = MeanReversion { dim, alpha: p.get("alpha", 1.0), beta: p.get("beta", 0.5) };
            (Arc::new(dynamics), TrackingCost { target, spread: 0.5, mean_weight: p.get("lambda", 1.0) })
        }
        "mf-kernel" => {
            check(p, name, &["kappa"])?;
            (Arc::new(TanhKernel { dim, kappa: p.get("kappa", 1.0) }), TrackingCost { target, spread: 0.5, mean_weight: 0.0 })
        }
        other => return Err(Error::InvalidInput(format!("unknown mean-field scenario `{other}`"))),
    };
    MeanFieldProblem::new(dynamics, Arc::new(cost), setup.control_set.clone(), setup.horizon, setup.initial.clone())
}

/// Optimal cost of `mf-steering` with box controls `[lo, hi]` per axis: the
/// mean moves by `∫u`, the spread decays as `e^{−T}` regardless of `u`.
pub fn steering_optimum(initial: &ParticleEnsemble, target: &[f64], lower: &[f64], upper: &[f64], duration: f64) -> f64 {
    let m = initial.mean();
    let miss: f64 = (0..m.len())
        .map(|c| {
            let (lo, hi) = (m[c] + lower[c] * duration, m[c] + upper[c] * duration);
            let closest = target[c].clamp(lo, hi);
            (closest - target[c]).powi(2)
        })
        .sum();
    miss + initial.variance() * (-2.0 * duration).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> MfSetup {
        MfSetup {
            params: Params::default(),
            target: None,
            horizon: TimeGrid::new(0.0, 1.0, 50).unwrap(),
            control_set: ControlSet::symmetric_box(1, 1.0).unwrap(),
            initial: ParticleEnsemble::gaussian(1, n, 0.0, 0.7, 1).unwrap(),
        }
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in MEAN_FIELD {
            let mfp = meanfield(name, &setup(12)).unwrap();
            assert!(mfp.validate_flat_gradient(10, &mut rng) < 1e-6, "{name}");
            assert!(mfp.validate_jac_measure(10, &mut rng) < 1e-6, "{name}");
        }
    }

    #[test]
    fn batch_overrides_agree_with_generic_sums() {
        struct Generic(MeanReversion);
        impl MeanFieldDynamics for Generic {
            fn state_dim(&self) -> usize {
                self.0.dim
            }
            fn control_dim(&self) -> usize {
                self.0.dim
            }
            fn velocity(&self, t: f64, x: &[f64], p: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.velocity(t, x, p, u, o)
            }
            fn jac_x(&self, t: f64, x: &[f64], p: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.jac_x(t, x, p, u, o)
            }
            fn jac_measure(&self, t: f64, x: &[f64], p: &[f64], y: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.jac_measure(t, x, p, y, u, o)
            }
        }
        let fast = MeanReversion { dim: 2, alpha: 0.7, beta: 0.3 };
        let slow = Generic(fast);
        let pts = [0.1, -0.4, 1.2, 0.3, -0.8, 0.9];
        let w = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let u = [0.2, -0.1];
        let (mut a, mut b) = ([0.0; 6], [0.0; 6]);
        fast.coupling(0.0, &pts, &u, &w, &mut a);
        slow.coupling(0.0, &pts, &u, &w, &mut b);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
        fast.coupling_transpose(0.0, &pts, &u, &w, &mut a);
        slow.coupling_transpose(0.0, &pts, &u, &w, &mut b);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
        fast.velocities(0.0, &pts, &u, &mut a);
        slow.velocities(0.0, &pts, &u, &mut b);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn steering_optimum_examples() {
        let e = ParticleEnsemble::new(1, vec![-1.0, 1.0]).unwrap();
        // reachable target: only the decayed spread remains
        let v = steering_optimum(&e, &[0.5], &[-1.0], &[1.0], 1.0);
        assert!((v - (-2.0_f64).exp()).abs() < 1e-15);
        // unreachable: mean stops 1 short
        let v = steering_optimum(&e, &[3.0], &[-1.0], &[1.0], 2.0);
        assert!((v - 1.0 - (-4.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn unknown_scenarios_are_rejected() {
        assert!(meanfield("mf-swarm", &setup(3)).is_err());
        let mut s = setup(3);
        s.params.0.insert("kappa".into(), 2.0);
        assert!(meanfield("mf-interaction", &s).is_err());
        s.target = Some(vec![0.0, 0.0]);
        assert!(meanfield("mf-kernel", &s).is_err());
    }
}
