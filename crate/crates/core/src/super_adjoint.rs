//! The super-adjoint `p̄_t(x) = ℓ(Φ̄_{t,T}(x))`: cost-to-go of the frozen
//! reference control as a function of the state at time `t`, together with
//! its spatial gradient and Hessian.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, Costate, RiccatiPath, Trajectory};
use crate::linalg;
use crate::problem::{ControlProblem, ControlSignal};

pub struct SuperAdjoint<'a> {
    problem: &'a ControlProblem,
    reference: &'a dyn ControlSignal,
}

impl<'a> SuperAdjoint<'a> {
    pub fn new(problem: &'a ControlProblem, reference: &'a dyn ControlSignal) -> Result<Self> {
        if reference.grid() != &problem.horizon {
            return Err(Error::DimensionMismatch("reference control is not on the problem horizon".into()));
        }
        Ok(Self { problem, reference })
    }

    pub fn problem(&self) -> &ControlProblem {
        self.problem
    }

    fn tail(&self, t_node: usize, x: &[f64]) -> Result<Trajectory> {
        flow::integrate_flow(self.problem, self.reference, x, t_node, self.problem.horizon.n_steps())
    }

    /// `p̄_{t_k}(x)`.
    pub fn value(&self, t_node: usize, x: &[f64]) -> Result<f64> {
        Ok(self.problem.cost.value(self.tail(t_node, x)?.last()))
    }

    /// `∇p̄_{t_k}(x)`: flow forward to `T` under the reference, then pull
    /// `∇ℓ` back with the adjoint equation along that auxiliary trajectory.
    pub fn gradient(&self, t_node: usize, x: &[f64]) -> Result<Vec<f64>> {
        let tail = self.tail(t_node, x)?;
        let costate = flow::adjoint_of(self.problem, self.reference, &tail)?;
        Ok(costate.at(t_node).to_vec())
    }

    /// `∇p̄_t(x)` at the interval midpoint `t = t_k + h/2`: one RK4 half step
    /// of the state and its Jacobian under the reference on interval `k`,
    /// then `DΦᵀ ∇p̄_{t_{k+1}}`.
    pub fn gradient_mid(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let grid = self.problem.horizon;
        if k >= grid.n_steps() {
            return Err(Error::InvalidInput(format!("no interval {k}")));
        }
        let n = x.len();
        let half = 0.5 * grid.step();
        let t_mid = grid.node(k) + half;
        let dynamics = self.problem.dynamics.as_ref();
        // y = (x, M) with M row-major, M(t_mid) = I.
        let mut y = vec![0.0; n + n * n];
        y[..n].copy_from_slice(x);
        for i in 0..n {
            y[n + i * n + i] = 1.0;
        }
        let mut jac = vec![0.0; n * n];
        let mut rk = flow::Rk4::new(y.len());
        rk.step(&mut y, half, |stage, s, out| {
            let t = match stage {
                flow::Stage::Start => t_mid,
                flow::Stage::Mid => t_mid + 0.5 * half,
                flow::Stage::End => t_mid + half,
            };
            let (xs, ms) = s.split_at(n);
            let (fx, fm) = out.split_at_mut(n);
            self.reference.field(dynamics, k, t, xs, fx);
            self.reference.jacobian(dynamics, k, t, xs, &mut jac);
            for i in 0..n {
                for j in 0..n {
                    fm[i * n + j] = (0..n).map(|l| jac[i * n + l] * ms[l * n + j]).sum();
                }
            }
        });
        self.problem.counter().add(1);
        if !linalg::all_finite(&y) {
            return Err(Error::NonFiniteState { node: k + 1, t: grid.node(k + 1) });
        }
        let g = self.gradient(k + 1, &y[..n])?;
        let mut out = vec![0.0; n];
        linalg::matvec_t(&y[n..], &g, &mut out);
        Ok(out)
    }

    /// `D²p̄_{t_k}(x)` by central differences of [`SuperAdjoint::gradient`]
    /// with step `1e-4·(1 + |x|)`, symmetrised.
    pub fn hessian_fd(&self, t_node: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = x.len();
        let delta = 1e-4 * (1.0 + linalg::norm(x));
        let mut h = vec![0.0; n * n];
        let mut xs = x.to_vec();
        for j in 0..n {
            xs[j] = x[j] + delta;
            let gp = self.gradient(t_node, &xs)?;
            xs[j] = x[j] - delta;
            let gm = self.gradient(t_node, &xs)?;
            xs[j] = x[j];
            for i in 0..n {
                h[i * n + j] = (gp[i] - gm[i]) / (2.0 * delta);
            }
        }
        linalg::symmetrize(&mut h, n);
        Ok(linalg::to_matrix(&h, n))
    }
}

/// How the descent sweep evaluates `∇p̄_t(x)` off the reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRoute {
    /// [`GradientRoute::Quadratic`] when it is exact for the problem,
    /// otherwise [`GradientRoute::Adjoint`].
    #[default]
    Auto,
    /// One forward/backward integration per query.
    Adjoint,
    /// `p̄(t) + D²p̄_t (x − x̄(t))` from one adjoint and one Riccati sweep.
    /// Exact when `f` is affine in `x` and `ℓ` is quadratic, because then
    /// `p̄_t` is itself quadratic.
    Quadratic,
}

impl GradientRoute {
    pub fn resolve(self, problem: &ControlProblem) -> GradientRoute {
        match self {
            GradientRoute::Auto if quadratic_is_exact(problem) => GradientRoute::Quadratic,
            GradientRoute::Auto => GradientRoute::Adjoint,
            other => other,
        }
    }
}

pub fn quadratic_is_exact(problem: &ControlProblem) -> bool {
    problem.dynamics.is_state_affine() && problem.cost.is_quadratic()
}

/// Second-order expansion of `∇p̄_t` around the reference trajectory.
pub struct QuadraticModel {
    reference: Trajectory,
    costate: Costate,
    riccati: RiccatiPath,
}

impl QuadraticModel {
    pub fn build(problem: &ControlProblem, reference: &dyn ControlSignal, trajectory: Trajectory) -> Result<Self> {
        let costate = flow::adjoint_of(problem, reference, &trajectory)?;
        let riccati = flow::integrate_riccati(problem, reference, &trajectory, &costate)?;
        Ok(Self { reference: trajectory, costate, riccati })
    }

    pub fn costate(&self) -> &Costate {
        &self.costate
    }

    pub fn gradient(&self, t_node: usize, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let p = self.riccati.raw(t_node);
        let xbar = self.reference.at(t_node);
        let dx: Vec<f64> = x.iter().zip(xbar).map(|(a, b)| a - b).collect();
        let mut g = self.costate.at(t_node).to_vec();
        // P = −D²p̄
        for i in 0..n {
            g[i] -= linalg::dot(&p[i * n..(i + 1) * n], &dx);
        }
        g
    }
}

/// Frozen `∇p̄` used during one descent sweep.
pub enum GradientField<'a> {
    Adjoint(SuperAdjoint<'a>),
    Quadratic(QuadraticModel),
}

impl<'a> GradientField<'a> {
    /// Builds the field for `reference` whose trajectory is `trajectory`.
    pub fn new(
        problem: &'a ControlProblem,
        reference: &'a dyn ControlSignal,
        trajectory: &Trajectory,
        route: GradientRoute,
    ) -> Result<Self> {
        match route.resolve(problem) {
            GradientRoute::Quadratic => {
                if !quadratic_is_exact(problem) {
                    return Err(Error::InvalidInput(
                        "quadratic gradient route needs state-affine dynamics and a quadratic cost".into(),
                    ));
                }
                Ok(GradientField::Quadratic(QuadraticModel::build(problem, reference, trajectory.clone())?))
            }
            _ => Ok(GradientField::Adjoint(SuperAdjoint::new(problem, reference)?)),
        }
    }

    pub fn gradient(&self, t_node: usize, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            GradientField::Adjoint(sa) => sa.gradient(t_node, x),
            GradientField::Quadratic(q) => Ok(q.gradient(t_node, x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Control, ControlSet, FnDynamics, QuadraticCost};
    use crate::TimeGrid;
    use std::sync::Arc;

    fn scalar(a: f64, with_control: bool) -> ControlProblem {
        let dynamics = FnDynamics::new(
            1,
            1,
            move |_, x, u, o| o[0] = a * x[0] + if with_control { u[0] } else { 0.0 },
            move |_, _, _, j| j[0] = a,
        )
        .state_affine(true);
        ControlProblem::new(
            Arc::new(dynamics),
            Arc::new(QuadraticCost::isotropic(0.5, vec![0.0])),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            TimeGrid::new(0.0, 1.0, 100).unwrap(),
            vec![0.5],
        )
        .unwrap()
    }

    #[test]
    fn terminal_value_is_cost() {
        let p = scalar(0.3, true);
        let u = p.constant_control(vec![0.4]).unwrap();
        let sa = SuperAdjoint::new(&p, &u).unwrap();
        assert_eq!(sa.value(100, &[1.7]).unwrap(), 0.5 * 1.7 * 1.7);
        assert_eq!(sa.gradient(100, &[1.7]).unwrap(), vec![1.7]);
    }

    #[test]
    fn identity_flow_keeps_cost() {
        let p = scalar(0.0, true);
        let u = p.constant_control(vec![0.0]).unwrap();
        let sa = SuperAdjoint::new(&p, &u).unwrap();
        for k in [0, 33, 99] {
            assert!((sa.value(k, &[0.8]).unwrap() - 0.32).abs() < 1e-15);
            assert_eq!(sa.gradient(k, &[0.8]).unwrap(), vec![0.8]);
        }
        let h = sa.hessian_fd(10, &[0.8]).unwrap();
        assert!((h[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_hessian_matches_exponential() {
        let a = -0.6;
        let p = scalar(a, false);
        let u = p.constant_control(vec![0.0]).unwrap();
        let sa = SuperAdjoint::new(&p, &u).unwrap();
        for k in [0, 40, 90] {
            let t = p.horizon.node(k);
            let h = sa.hessian_fd(k, &[2.0]).unwrap();
            assert!((h[(0, 0)] - (2.0 * a * (1.0 - t)).exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn quadratic_route_agrees_with_adjoint_route() {
        let p = scalar(0.8, true);
        let u = Control::from_fn(p.horizon, |t| vec![(5.0 * t).cos()]).unwrap();
        let traj = flow::simulate(&p, &u).unwrap();
        let exact = GradientField::new(&p, &u, &traj, GradientRoute::Adjoint).unwrap();
        let quad = GradientField::new(&p, &u, &traj, GradientRoute::Auto).unwrap();
        assert!(matches!(quad, GradientField::Quadratic(_)));
        for k in [0, 17, 64, 100] {
            let x = [traj.at(k)[0] + 0.3];
            let a = exact.gradient(k, &x).unwrap()[0];
            let b = quad.gradient(k, &x).unwrap()[0];
            // each route carries its own O(h⁴) truncation error
            assert!((a - b).abs() < 1e-8, "node {k}: {a} vs {b}");
        }
    }
}
