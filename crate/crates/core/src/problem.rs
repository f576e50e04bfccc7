//! Problem definitions: time grids, control sets, control representations
//! and the Mayer problem `min ℓ(x(T))` subject to `ẋ = f(t, x, u)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Membership tolerance for box control sets.
pub const BOX_TOL: f64 = 1e-12;
/// Tolerance on the per-interval weight sum of a relaxed control.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Uniform grid `t_k = t0 + k·h`, `h = (T − t0)/n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_final: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_final.is_finite()) || t_final <= t0 {
            return Err(Error::InvalidInput(format!(
                "time grid needs finite t0 < T, got [{t0}, {t_final}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput("time grid needs n_steps >= 1".into()));
        }
        Ok(Self { t0, t_final, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn node_count(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_final - self.t0) / self.n_steps as f64
    }

    pub fn duration(&self) -> f64 {
        self.t_final - self.t0
    }

    /// Time of node `k`. Always computed the same way so that sub-span
    /// integrations replay identical arithmetic.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step()
    }

    /// Index of the interval `[t_k, t_{k+1})` containing `t`, clamped to the grid.
    pub fn interval_of(&self, t: f64) -> usize {
        let raw = ((t - self.t0) / self.step()).floor();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.n_steps - 1)
        }
    }

    /// Same span, `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Self {
        Self { n_steps: self.n_steps * factor.max(1), ..*self }
    }

    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        Self::new(self.t0, self.t_final, n_steps)
    }
}

/// Admissible control values `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Atoms(Vec<Vec<f64>>),
}

impl ControlSet {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidInput("box needs finite lower <= upper".into()));
        }
        Ok(ControlSet::Box { lower, upper })
    }

    pub fn symmetric_box(dim: usize, radius: f64) -> Result<Self> {
        Self::new_box(vec![-radius; dim], vec![radius; dim])
    }

    pub fn new_atoms(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(Error::InvalidInput("atom list is empty".into()));
        };
        let dim = first.len();
        if dim == 0 || atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::DimensionMismatch("atoms must share one positive dimension".into()));
        }
        Ok(ControlSet::Atoms(atoms))
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Atoms(atoms) => atoms[0].len(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, h))| *v >= l - BOX_TOL && *v <= h + BOX_TOL),
            ControlSet::Atoms(atoms) => atoms.iter().any(|a| a.as_slice() == u),
        }
    }

    /// A deterministic admissible value: box centre or first atom.
    pub fn default_value(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, h)| 0.5 * (l + h)).collect()
            }
            ControlSet::Atoms(atoms) => atoms[0].clone(),
        }
    }

    /// Draws a value uniformly from the box, or a uniformly chosen atom.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, h)| if h > l { rng.gen_range(*l..=*h) } else { *l })
                .collect(),
            ControlSet::Atoms(atoms) => atoms[rng.gen_range(0..atoms.len())].clone(),
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, ControlSet::Box { .. })
    }
}

/// Piecewise-constant control: one value per grid interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl Control {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::DimensionMismatch(format!(
                "control has {} values for {} intervals",
                values.len(),
                grid.n_steps()
            )));
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch("control values must share one dimension".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("control values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: Vec<f64>) -> Result<Self> {
        Self::new(grid, vec![value; grid.n_steps()])
    }

    /// Control whose interval `k` holds `f(t_k)`.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        Self::new(grid, (0..grid.n_steps()).map(|k| f(grid.node(k))).collect())
    }

    /// Like [`Control::new`] but rejects values outside `set`.
    pub fn admissible(grid: TimeGrid, values: Vec<Vec<f64>>, set: &ControlSet) -> Result<Self> {
        let c = Self::new(grid, values)?;
        c.check_admissible(set)?;
        Ok(c)
    }

    pub fn check_admissible(&self, set: &ControlSet) -> Result<()> {
        match self.values.iter().position(|v| !set.contains(v)) {
            None => Ok(()),
            Some(k) => Err(Error::InvalidInput(format!(
                "control value {:?} on interval {k} lies outside the control set",
                self.values[k]
            ))),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    #[inline]
    pub fn value(&self, interval: usize) -> &[f64] {
        &self.values[interval]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Re-expresses the same function on a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let values = self
            .values
            .iter()
            .flat_map(|v| std::iter::repeat_n(v.clone(), factor))
            .collect();
        Self { grid: self.grid.refine(factor), values }
    }

    /// Affine combination `self + eps·(other − self)`. Inside a box this is
    /// admissible for every `eps ∈ [0, 1]`.
    pub fn lerp(&self, other: &Control, eps: f64) -> Result<Self> {
        if other.grid != self.grid || other.dim() != self.dim() {
            return Err(Error::DimensionMismatch("lerp needs controls on one grid".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + eps * (y - x)).collect())
            .collect();
        Ok(Self { grid: self.grid, values })
    }

    /// Random control piecewise constant on `blocks` equal blocks, so that
    /// refining the grid keeps the same function of time.
    pub fn random_blocks<R: Rng + ?Sized>(
        grid: TimeGrid,
        set: &ControlSet,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = blocks.clamp(1, grid.n_steps());
        let picks: Vec<Vec<f64>> = (0..blocks).map(|_| set.sample(rng)).collect();
        let n = grid.n_steps();
        Self::new(grid, (0..n).map(|k| picks[k * blocks / n].clone()).collect())
    }
}

/// Relaxed (Young-measure) control: per-interval probability weights over a
/// shared atom list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedControl {
    grid: TimeGrid,
    atoms: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl RelaxedControl {
    pub fn new(grid: TimeGrid, atoms: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        ControlSet::new_atoms(atoms.clone())?;
        if weights.len() != grid.n_steps() {
            return Err(Error::DimensionMismatch(format!(
                "relaxed control has {} weight rows for {} intervals",
                weights.len(),
                grid.n_steps()
            )));
        }
        for (k, w) in weights.iter().enumerate() {
            if w.len() != atoms.len() {
                return Err(Error::DimensionMismatch(format!(
                    "weight row {k} has {} entries for {} atoms",
                    w.len(),
                    atoms.len()
                )));
            }
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidInput(format!("weight row {k} has a negative entry")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidInput(format!("weight row {k} sums to {sum}")));
            }
        }
        Ok(Self { grid, atoms, weights })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self, interval: usize) -> &[f64] {
        &self.weights[interval]
    }

    /// `∫_U f(t, x, ω) du_t(ω) = Σ_j w_j(t) f(t, x, atom_j)`.
    pub fn mean_field_value(&self, dynamics: &dyn Dynamics, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if t < self.grid.t0() - 1e-12 || t > self.grid.t_final() + 1e-12 {
            return Err(Error::InvalidInput(format!("t = {t} outside the control grid")));
        }
        let k = self.grid.interval_of(t);
        let mut out = vec![0.0; dynamics.state_dim()];
        self.field(dynamics, k, t, x, &mut out);
        Ok(out)
    }
}

/// Embeds an ordinary control as one-hot weights over `atoms`.
pub fn relax(control: &Control, atoms: &[Vec<f64>]) -> Result<RelaxedControl> {
    let weights = control
        .values()
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let j = atoms
                .iter()
                .position(|a| a.as_slice() == v.as_slice())
                .ok_or_else(|| Error::ValueNotAnAtom { interval: k, value: v.clone() })?;
            let mut w = vec![0.0; atoms.len()];
            w[j] = 1.0;
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    RelaxedControl::new(*control.grid(), atoms.to_vec(), weights)
}

/// Controlled vector field `f(t, x, u)` with its state Jacobian.
///
/// Outputs are written into caller-provided buffers; `jac_x` fills a
/// row-major `n × n` matrix. Implementations must be pure.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn field(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn jac_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);

    /// True when `f` is affine in `x` for every fixed `(t, u)`.
    fn is_state_affine(&self) -> bool {
        false
    }
}

/// Terminal cost `ℓ` with derivatives.
pub trait TerminalCost: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// True when `ℓ` is a quadratic polynomial (constant Hessian).
    fn is_quadratic(&self) -> bool {
        false
    }
}

type FieldFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// [`Dynamics`] assembled from closures.
pub struct FnDynamics {
    state_dim: usize,
    control_dim: usize,
    field: Box<FieldFn>,
    jac: Box<FieldFn>,
    state_affine: bool,
}

impl FnDynamics {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        field: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        jac: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            control_dim,
            field: Box::new(field),
            jac: Box::new(jac),
            state_affine: false,
        }
    }

    pub fn state_affine(mut self, yes: bool) -> Self {
        self.state_affine = yes;
        self
    }
}

impl Dynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn field(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.field)(t, x, u, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.jac)(t, x, u, out)
    }
    fn is_state_affine(&self) -> bool {
        self.state_affine
    }
}

/// `ℓ(x) = ½ (x − z)ᵀ W (x − z)` with symmetric `W`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    weight: DMatrix<f64>,
    target: Vec<f64>,
}

impl QuadraticCost {
    pub fn new(weight: DMatrix<f64>, target: Vec<f64>) -> Result<Self> {
        if weight.nrows() != target.len() || weight.ncols() != target.len() {
            return Err(Error::DimensionMismatch("weight must be n × n for an n-vector target".into()));
        }
        let weight = (&weight + weight.transpose()) * 0.5;
        Ok(Self { weight, target })
    }

    /// `ℓ(x) = scale·|x − z|²`, i.e. `W = 2·scale·I`.
    pub fn isotropic(scale: f64, target: Vec<f64>) -> Self {
        let n = target.len();
        Self { weight: DMatrix::identity(n, n) * (2.0 * scale), target }
    }
}

impl TerminalCost for QuadraticCost {
    fn value(&self, x: &[f64]) -> f64 {
        let n = self.target.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (x[i] - self.target[i]) * self.weight[(i, j)] * (x[j] - self.target[j]);
            }
        }
        0.5 * acc
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.target.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.weight[(i, j)] * (x[j] - self.target[j])).sum();
        }
    }

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.weight.clone())
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// `ℓ(x) = c·x`.
#[derive(Debug, Clone)]
pub struct LinearCost {
    pub coeffs: Vec<f64>,
}

impl TerminalCost for LinearCost {
    fn value(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.coeffs, x)
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.coeffs.len();
        Some(DMatrix::zeros(n, n))
    }
    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Counts integrator steps so solvers can report work in units of
/// full-horizon integrations.
#[derive(Debug, Default)]
pub struct WorkCounter {
    steps: AtomicU64,
}

impl WorkCounter {
    pub fn add(&self, steps: usize) {
        self.steps.fetch_add(steps as u64, Ordering::Relaxed);
    }

    pub fn steps(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }
}

/// Mayer problem: minimise `ℓ(x(T))` over controls in `control_set`,
/// `ẋ = f(t, x, u)`, `x(t0) = initial_state`.
#[derive(Clone)]
pub struct ControlProblem {
    pub dynamics: Arc<dyn Dynamics>,
    pub cost: Arc<dyn TerminalCost>,
    pub control_set: ControlSet,
    pub horizon: TimeGrid,
    pub initial_state: Vec<f64>,
    counter: Arc<WorkCounter>,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("state_dim", &self.state_dim())
            .field("control_dim", &self.control_dim())
            .field("control_set", &self.control_set)
            .field("horizon", &self.horizon)
            .field("initial_state", &self.initial_state)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        cost: Arc<dyn TerminalCost>,
        control_set: ControlSet,
        horizon: TimeGrid,
        initial_state: Vec<f64>,
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
        if initial_state.len() != dynamics.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "initial state has dimension {}, dynamics expect {}",
                initial_state.len(),
                dynamics.state_dim()
            )));
        }
        Ok(Self {
            dynamics,
            cost,
            control_set,
            horizon,
            initial_state,
            counter: Arc::new(WorkCounter::default()),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn counter(&self) -> &WorkCounter {
        &self.counter
    }

    /// Integrations performed so far, in full-horizon equivalents.
    pub fn integrations(&self) -> f64 {
        self.counter.steps() as f64 / self.horizon.n_steps() as f64
    }

    /// Same problem with a fresh work counter (for diagnostics that must not
    /// be billed to a solver).
    pub fn detached(&self) -> Self {
        Self { counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: TimeGrid) -> Self {
        Self { horizon, counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn with_cost(&self, cost: Arc<dyn TerminalCost>) -> Self {
        Self { cost, counter: Arc::new(WorkCounter::default()), ..self.clone() }
    }

    pub fn constant_control(&self, value: Vec<f64>) -> Result<Control> {
        Control::admissible(self.horizon, vec![value; self.horizon.n_steps()], &self.control_set)
    }

    /// Largest relative discrepancy between `cost.gradient` and central
    /// differences of `cost.value` over `probes` random points in
    /// `[-scale, scale]^n`.
    pub fn validate_cost_gradient<R: Rng + ?Sized>(&self, probes: usize, scale: f64, rng: &mut R) -> f64 {
        let n = self.state_dim();
        let mut worst = 0.0_f64;
        let mut grad = vec![0.0; n];
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
            self.cost.gradient(&x, &mut grad);
            let fd: Vec<f64> = (0..n)
                .map(|i| {
                    let step = 1e-6 * (1.0 + x[i].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += step;
                    xm[i] -= step;
                    (self.cost.value(&xp) - self.cost.value(&xm)) / (2.0 * step)
                })
                .collect();
            let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = linalg::norm(&diff) / (1e-8 + linalg::norm(&fd).max(linalg::norm(&grad)));
            worst = worst.max(rel);
        }
        worst
    }

    /// Same check for `dynamics.jac_x` against differences of `dynamics.field`.
    pub fn validate_jacobian<R: Rng + ?Sized>(&self, probes: usize, scale: f64, rng: &mut R) -> f64 {
        let n = self.state_dim();
        let mut worst = 0.0_f64;
        let mut jac = vec![0.0; n * n];
        let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
            let u = self.control_set.sample(rng);
            let t = rng.gen_range(self.horizon.t0()..=self.horizon.t_final());
            self.dynamics.jac_x(t, &x, &u, &mut jac);
            let mut fd = vec![0.0; n * n];
            for j in 0..n {
                let step = 1e-6 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += step;
                xm[j] -= step;
                self.dynamics.field(t, &xp, &u, &mut fp);
                self.dynamics.field(t, &xm, &u, &mut fm);
                for i in 0..n {
                    fd[i * n + j] = (fp[i] - fm[i]) / (2.0 * step);
                }
            }
            let diff: Vec<f64> = jac.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = linalg::norm(&diff) / (1e-8 + linalg::norm(&fd).max(linalg::norm(&jac)));
            worst = worst.max(rel);
        }
        worst
    }
}

/// Anything that assigns a (possibly relaxed) control to each grid interval
/// and can evaluate the resulting field.
pub trait ControlSignal: Sync {
    fn grid(&self) -> &TimeGrid;

    /// `f_t(x, u_t)` on interval `k` (a weighted sum for relaxed signals).
    fn field(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]);

    /// `D_x f_t(x, u_t)` on interval `k`, row-major.
    fn jacobian(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]);
}

impl ControlSignal for Control {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    #[inline]
    fn field(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        dynamics.field(t, x, &self.values[k], out)
    }
    #[inline]
    fn jacobian(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        dynamics.jac_x(t, x, &self.values[k], out)
    }
}

impl ControlSignal for RelaxedControl {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn field(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![0.0; out.len()];
        for (w, atom) in self.weights[k].iter().zip(&self.atoms) {
            if *w != 0.0 {
                dynamics.field(t, x, atom, &mut buf);
                linalg::axpy(*w, &buf, out);
            }
        }
    }
    fn jacobian(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![0.0; out.len()];
        for (w, atom) in self.weights[k].iter().zip(&self.atoms) {
            if *w != 0.0 {
                dynamics.jac_x(t, x, atom, &mut buf);
                linalg::axpy(*w, &buf, out);
            }
        }
    }
}

/// Relaxed convex combination `(1 − ε)·δ_{base} + ε·δ_{target}` on every
/// interval: the weak variation `u^ε = ū + ε(u − ū)`.
pub struct Blend<'a> {
    base: &'a dyn ControlSignal,
    target: &'a dyn ControlSignal,
    eps: f64,
}

impl<'a> Blend<'a> {
    pub fn new(base: &'a dyn ControlSignal, target: &'a dyn ControlSignal, eps: f64) -> Result<Self> {
        if base.grid() != target.grid() {
            return Err(Error::DimensionMismatch("blended controls must share a grid".into()));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidInput(format!("blend weight {eps} outside [0, 1]")));
        }
        Ok(Self { base, target, eps })
    }
}

impl ControlSignal for Blend<'_> {
    fn grid(&self) -> &TimeGrid {
        self.base.grid()
    }
    fn field(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; out.len()];
        self.base.field(dynamics, k, t, x, out);
        self.target.field(dynamics, k, t, x, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += self.eps * (b - *o);
        }
    }
    fn jacobian(&self, dynamics: &dyn Dynamics, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; out.len()];
        self.base.jacobian(dynamics, k, t, x, out);
        self.target.jacobian(dynamics, k, t, x, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += self.eps * (b - *o);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 4).unwrap()
    }

    fn square_field() -> FnDynamics {
        // f(t, x, u) = u²
        FnDynamics::new(1, 1, |_, _, u, out| out[0] = u[0] * u[0], |_, _, _, j| j[0] = 0.0)
    }

    fn affine_field() -> FnDynamics {
        // f(t, x, u) = x + 3u
        FnDynamics::new(1, 1, |_, x, u, out| out[0] = x[0] + 3.0 * u[0], |_, _, _, j| j[0] = 1.0)
    }

    #[test]
    fn grid_rejects_bad_spans() {
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = TimeGrid::new(0.0, 2.0, 4).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.node(4), 2.0);
        assert_eq!(g.interval_of(2.0), 3);
        assert_eq!(g.interval_of(-1.0), 0);
        assert_eq!(g.interval_of(0.75), 1);
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::new_box(vec![1.0], vec![0.0]).is_err());
        assert!(ControlSet::new_atoms(vec![]).is_err());
        assert!(ControlSet::new_atoms(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        let b = ControlSet::symmetric_box(1, 1.0).unwrap();
        assert!(b.contains(&[1.0 + 0.5e-12]));
        assert!(!b.contains(&[1.0 + 1e-11]));
    }

    #[test]
    fn relax_constant_control_is_one_hot() {
        let c = Control::constant(grid(), vec![2.0]).unwrap();
        let rc = relax(&c, &[vec![2.0], vec![-1.0]]).unwrap();
        for k in 0..4 {
            assert_eq!(rc.weights(k), &[1.0, 0.0]);
        }
    }

    #[test]
    fn relax_alternating_control() {
        let c = Control::from_fn(grid(), |t| if ((t * 4.0).round() as usize).is_multiple_of(2) { vec![1.0] } else { vec![-1.0] })
            .unwrap();
        let rc = relax(&c, &[vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(rc.weights(0), &[1.0, 0.0]);
        assert_eq!(rc.weights(1), &[0.0, 1.0]);
        assert_eq!(rc.weights(2), &[1.0, 0.0]);
        assert_eq!(rc.weights(3), &[0.0, 1.0]);
    }

    #[test]
    fn relax_rejects_foreign_value() {
        let c = Control::constant(grid(), vec![0.5]).unwrap();
        let err = relax(&c, &[vec![0.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::ValueNotAnAtom { interval: 0, .. }));
    }

    #[test]
    fn relaxed_weights_must_be_probabilities() {
        let atoms = vec![vec![0.0], vec![1.0]];
        assert!(RelaxedControl::new(grid(), atoms.clone(), vec![vec![0.5, 0.6]; 4]).is_err());
        assert!(RelaxedControl::new(grid(), atoms.clone(), vec![vec![1.5, -0.5]; 4]).is_err());
        assert!(RelaxedControl::new(grid(), atoms, vec![vec![0.25, 0.75]; 4]).is_ok());
    }

    #[test]
    fn mean_field_value_of_dirac_is_plain_field() {
        let f = affine_field();
        let rc = RelaxedControl::new(grid(), vec![vec![2.0], vec![-1.0]], vec![vec![1.0, 0.0]; 4]).unwrap();
        assert_eq!(rc.mean_field_value(&f, 0.3, &[1.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn mean_field_value_linear_field_hits_barycentre() {
        let f = affine_field();
        let rc = RelaxedControl::new(grid(), vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5]; 4]).unwrap();
        assert_eq!(rc.mean_field_value(&f, 0.9, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn mean_field_value_nonlinear_field_differs_from_barycentre() {
        let f = square_field();
        let rc = RelaxedControl::new(grid(), vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5]; 4]).unwrap();
        // ½·(−1)² + ½·1² = 1, while f at the barycentre 0 is 0
        assert_eq!(rc.mean_field_value(&f, 0.5, &[0.0]).unwrap(), vec![1.0]);
        assert!(rc.mean_field_value(&f, 1.5, &[0.0]).is_err());
    }

    #[test]
    fn refine_preserves_function() {
        let c = Control::from_fn(grid(), |t| vec![t]).unwrap();
        let r = c.refine(3);
        assert_eq!(r.grid().n_steps(), 12);
        for k in 0..12 {
            assert_eq!(r.value(k), c.value(k / 3));
        }
    }

    #[test]
    fn quadratic_cost_derivatives() {
        let q = QuadraticCost::isotropic(1.0, vec![1.0, -1.0]);
        assert_eq!(q.value(&[2.0, 1.0]), 5.0);
        let mut g = [0.0; 2];
        q.gradient(&[2.0, 1.0], &mut g);
        assert_eq!(g, [2.0, 4.0]);
        let p = ControlProblem::new(
            Arc::new(affine_field()),
            Arc::new(QuadraticCost::isotropic(1.0, vec![0.3])),
            ControlSet::symmetric_box(1, 1.0).unwrap(),
            grid(),
            vec![0.0],
        )
        .unwrap();
        let mut rng = rand::thread_rng();
        assert!(p.validate_cost_gradient(5, 2.0, &mut rng) < 1e-5);
        assert!(p.validate_jacobian(5, 2.0, &mut rng) < 1e-5);
    }
}
