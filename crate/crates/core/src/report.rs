//! Text output: CSV tables and the JSON run report.

use serde::{Deserialize, Serialize};

use crate::descent::{DescentRecord, DescentTrace};
use crate::problem::{Control, TimeGrid};

/// Seventeen significant digits, enough for an exact round trip.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rows `t,u_1..` with `t` the start of each interval.
pub fn control_csv(control: &Control) -> String {
    let mut s = String::from("t");
    for i in 1..=control.dim() {
        s.push_str(&format!(",u_{i}"));
    }
    s.push('\n');
    for (k, u) in control.values().iter().enumerate() {
        s.push_str(&num(control.grid().node(k)));
        for v in u {
            s.push(',');
            s.push_str(&num(*v));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub t0: f64,
    pub t_final: f64,
    pub n_steps: usize,
    pub step: f64,
}

impl From<&TimeGrid> for GridInfo {
    fn from(g: &TimeGrid) -> Self {
        Self { t0: g.t0(), t_final: g.t_final(), n_steps: g.n_steps(), step: g.step() }
    }
}

/// Outcome of one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub method: String,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub integrations: f64,
    pub final_pmp_residual: f64,
    pub converged: bool,
    pub trace: Vec<DescentRecord>,
}

impl SolveSummary {
    pub fn new(method: &str, trace: &DescentTrace) -> Self {
        Self {
            method: method.to_string(),
            initial_cost: trace.initial_cost,
            final_cost: trace.final_cost,
            iterations: trace.iterations(),
            integrations: trace.integrations,
            final_pmp_residual: trace.final_pmp_residual,
            converged: trace.converged,
            trace: trace.records.clone(),
        }
    }
}

/// Everything a `solve` run produced except wall-clock time, which goes to a
/// separate file so that reports stay byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub problem: String,
    pub command: String,
    pub seed: u64,
    pub grid: GridInfo,
    pub particles: Option<usize>,
    pub final_cost: f64,
    pub feedback: SolveSummary,
    pub baseline: Option<SolveSummary>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Human-readable summary.
    pub fn render(&self) -> String {
        let mut s = format!(
            "scenario {} ({}), command {}\ngrid [{}, {}] with {} steps",
            self.scenario, self.problem, self.command, self.grid.t0, self.grid.t_final, self.grid.n_steps
        );
        if let Some(n) = self.particles {
            s.push_str(&format!(", {n} particles"));
        }
        s.push('\n');
        s.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>6} {:>13} {:>12}\n",
            "method", "initial", "final", "iters", "integrations", "residual"
        ));
        for run in std::iter::once(&self.feedback).chain(self.baseline.as_ref()) {
            s.push_str(&format!(
                "{:<10} {:>14.6e} {:>14.6e} {:>6} {:>13.1} {:>12.3e}\n",
                run.method, run.initial_cost, run.final_cost, run.iterations, run.integrations, run.final_pmp_residual
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = num(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn control_rows() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let c = Control::new(g, vec![vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(
            control_csv(&c),
            "t,u_1\n0.0000000000000000e0,1.0000000000000000e0\n5.0000000000000000e-1,-1.0000000000000000e0\n"
        );
    }

    #[test]
    fn report_json_round_trip() {
        let trace = DescentTrace {
            initial_cost: 1.0,
            final_cost: 0.1,
            final_pmp_residual: 1e-3,
            integrations: 4.0,
            converged: true,
            records: vec![],
        };
        let r = RunReport {
            scenario: "s".into(),
            problem: "p".into(),
            command: "solve".into(),
            seed: 0,
            grid: GridInfo::from(&TimeGrid::new(0.0, 1.0, 3).unwrap()),
            particles: None,
            final_cost: 0.1,
            feedback: SolveSummary::new("feedback", &trace),
            baseline: None,
        };
        assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.render().contains("feedback"));
    }
}
