//! Mayer-type optimal control of ODEs and of nonlocal continuity equations
//! through exact increment formulas, super-adjoints and feedback descent.

pub mod checks;
pub mod config;
pub mod descent;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod meanfield;
pub mod problem;
pub mod report;
pub mod scenarios;
pub mod super_adjoint;
pub mod variation;

pub use error::{Error, Result};
pub use flow::{Costate, RiccatiPath, Trajectory};
pub use problem::{
    relax, Blend, Control, ControlProblem, ControlSet, ControlSignal, Dynamics, FnDynamics, LinearCost,
    QuadraticCost, RelaxedControl, TerminalCost, TimeGrid,
};
pub use super_adjoint::{GradientField, GradientRoute, SuperAdjoint};
pub use variation::{IncrementReport, PmpReport};
pub use descent::{DescentConfig, DescentRecord, DescentTrace};
