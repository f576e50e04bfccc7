//! Acceptance criteria on the shipped scenarios. Runs without the libtest
//! harness so that every criterion prints exactly one PASS/FAIL line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use superadj::checks::{self, CheckReport};
use superadj::config::Scenario;
use superadj::descent::{baseline_gradient_solve, solve};
use superadj::meanfield::models::{meanfield, steering_optimum, ExpectedCost, LocalField, MfSetup};
use superadj::meanfield::{
    lift_adjoint, mf_descent, mf_exact_increment, mf_pmp_residual, particle_flow, MeanFieldProblem, ParticleEnsemble,
};
use superadj::report::{control_csv, RunReport};
use superadj::scenarios::Params;
use superadj::variation::exact_increment;
use superadj::{
    Control, ControlProblem, ControlSet, DescentConfig, DescentTrace, FnDynamics, LinearCost, QuadraticCost,
    TimeGrid,
};

const ODE: [&str; 4] = ["linear_scalar", "double_integrator", "bilinear", "van_der_pol"];
const SEED: u64 = 2024;

fn shipped(id: &str) -> Scenario {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{id}.cfg"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn problem(id: &str) -> ControlProblem {
    shipped(id).classical_problem().unwrap()
}

fn u0(s: &Scenario) -> Control {
    s.initial_control(&s.grid).unwrap()
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn merge(parts: Vec<Verdict>) -> Verdict {
    let passed = parts.iter().all(|v| v.passed);
    let detail = parts.into_iter().map(|v| v.detail).collect::<Vec<_>>().join("; ");
    verdict(passed, detail)
}

fn monotone(trace: &DescentTrace) -> (bool, f64) {
    let mut prev = trace.initial_cost;
    let mut worst = f64::NEG_INFINITY;
    for r in &trace.records {
        worst = worst.max(r.cost - prev);
        prev = r.cost;
    }
    (worst <= 1e-10, worst)
}

fn c1_increment() -> Verdict {
    merge(
        ODE.iter()
            .map(|id| {
                let (coarse, fine) = checks::increment_gaps(&problem(id), 10, 1000, SEED).unwrap();
                let ratio = checks::refinement_ratio(coarse, fine);
                let ok = coarse <= 1e-6 && ratio >= 3.0;
                let shown = if ratio.is_finite() { format!("{ratio:.1}") } else { "roundoff".into() };
                verdict(ok, format!("{id} gap {coarse:.2e} ratio {shown}"))
            })
            .collect(),
    )
}

/// Below the roundoff floor the refinement ratio says nothing, so the
/// convergence order is also measured where truncation error dominates.
fn c1_order() -> Verdict {
    merge(
        ODE.iter()
            .map(|id| {
                let (coarse, fine) = checks::increment_gaps(&problem(id), 10, 25, SEED).unwrap();
                let ratio = checks::refinement_ratio(coarse, fine);
                verdict(ratio >= 3.0, format!("{id} n=25→50 ratio {ratio:.1}"))
            })
            .collect(),
    )
}

fn random_control(p: &ControlProblem, salt: u64) -> Control {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + salt);
    checks::random_pair(p, &mut rng).unwrap().0
}

fn c2_coincidence() -> Verdict {
    let worst = ODE
        .iter()
        .map(|id| {
            let p = problem(id);
            checks::gradient_coincidence(&p, &random_control(&p, 1)).unwrap()
        })
        .fold(0.0, f64::max);
    verdict(worst <= 1e-8, format!("max node gap {worst:.2e}"))
}

fn c3_duality() -> Verdict {
    let worst = ODE
        .iter()
        .map(|id| {
            let p = problem(id);
            checks::duality_spread(&p, &random_control(&p, 2)).unwrap()
        })
        .fold(0.0, f64::max);
    verdict(worst <= 1e-9, format!("max relative stddev {worst:.2e}"))
}

fn c4_riccati() -> Verdict {
    let worst = ODE
        .iter()
        .map(|id| {
            let p = problem(id);
            checks::riccati_hessian_gap(&p, &random_control(&p, 3), 5).unwrap()
        })
        .fold(0.0, f64::max);
    verdict(worst <= 1e-3, format!("max relative gap {worst:.2e}"))
}

fn c5_taylor() -> Verdict {
    let p = problem("van_der_pol");
    let fine = p.with_horizon(p.horizon.with_steps(checks::TAYLOR_STEPS).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let (ubar, u) = checks::random_pair(&p, &mut rng).unwrap();
    let factor = checks::TAYLOR_STEPS / p.horizon.n_steps();
    let (slope, _) = checks::taylor_slope(&fine, &ubar.refine(factor), &u.refine(factor), &checks::taylor_eps()).unwrap();
    verdict(slope >= 2.7, format!("van-der-pol slope {slope:.3}"))
}

/// `u` jumps between the listed values at the given node indices.
fn piecewise(grid: TimeGrid, pieces: &[(usize, f64)]) -> Control {
    let values = (0..grid.n_steps())
        .map(|k| vec![pieces.iter().rev().find(|(start, _)| k >= *start).map_or(0.0, |p| p.1)])
        .collect();
    Control::new(grid, values).unwrap()
}

fn fixed_point(p: &ControlProblem, start: &Control, label: &str) -> Verdict {
    let (_, trace) = solve(p, start, &DescentConfig::default()).unwrap();
    let change = (trace.final_cost - trace.initial_cost).abs();
    let residual = superadj::variation::pmp_residual(p, start).unwrap().residual;
    verdict(change < 1e-10, format!("{label} residual {residual:.1e} change {change:.1e}"))
}

fn c6_monotone() -> Verdict {
    let mut parts = Vec::new();
    for id in ODE {
        let s = shipped(id);
        let (_, trace) = solve(&s.classical_problem().unwrap(), &u0(&s), &s.descent).unwrap();
        let (ok, worst) = monotone(&trace);
        parts.push(verdict(ok, format!("{id} max rise {worst:.1e}")));
    }
    for id in ["mf_steering", "mf_interaction"] {
        let s = shipped(id);
        let (_, trace) = mf_descent(&s.meanfield_problem().unwrap(), &u0(&s), &s.descent).unwrap();
        let (ok, worst) = monotone(&trace);
        parts.push(verdict(ok, format!("{id} max rise {worst:.1e}")));
    }
    // bang-bang transfer of (1, 0) to the origin: −1 on [0, 1), +1 on [1, 2), idle after
    let di = problem("double_integrator");
    let di = di.with_horizon(di.horizon.with_steps(300).unwrap());
    parts.push(fixed_point(&di, &piecewise(di.horizon, &[(0, -1.0), (100, 1.0), (200, 0.0)]), "di transfer"));
    // linear costs with a positive switching function: u ≡ −1 is the extremal
    let ls = problem("linear_scalar").with_cost(Arc::new(LinearCost { coeffs: vec![1.0] }));
    parts.push(fixed_point(&ls, &ls.constant_control(vec![-1.0]).unwrap(), "linear-scalar ℓ=x"));
    let dl = problem("double_integrator").with_cost(Arc::new(LinearCost { coeffs: vec![1.0, 1.0] }));
    parts.push(fixed_point(&dl, &dl.constant_control(vec![-1.0]).unwrap(), "di ℓ=x₁+x₂"));
    merge(parts)
}

fn c7_double_integrator() -> Verdict {
    let s = shipped("double_integrator");
    assert_eq!(s.grid.n_steps(), 400);
    let (_, trace) = solve(&s.classical_problem().unwrap(), &u0(&s), &s.descent).unwrap();
    let ok = trace.final_cost <= 1e-4 && trace.iterations() <= 15;
    verdict(ok, format!("final {:.2e} after {} iterations", trace.final_cost, trace.iterations()))
}

fn c8_baseline() -> Verdict {
    merge(
        ["linear_scalar", "double_integrator", "bilinear"]
            .iter()
            .map(|id| {
                let s = shipped(id);
                let (_, fb) = solve(&s.classical_problem().unwrap(), &u0(&s), &s.descent).unwrap();
                let (_, base) = baseline_gradient_solve(&s.classical_problem().unwrap(), &u0(&s), &s.descent).unwrap();
                let base_cost = base.integrations_to_reach(base.final_cost).unwrap();
                match fb.integrations_to_reach(base.final_cost + 1e-4) {
                    Some(used) => verdict(used < base_cost, format!("{id} feedback {used} vs baseline {base_cost}")),
                    None => verdict(false, format!("{id} feedback never within 1e-4 of {:.3e}", base.final_cost)),
                }
            })
            .collect(),
    )
}

fn kernel_problem(particles: usize) -> MeanFieldProblem {
    let setup = MfSetup {
        params: Params::default(),
        target: None,
        horizon: TimeGrid::new(0.0, 1.0, 200).unwrap(),
        control_set: ControlSet::symmetric_box(1, 1.0).unwrap(),
        initial: ParticleEnsemble::gaussian(1, particles, 0.0, 0.5, SEED).unwrap(),
    };
    meanfield("mf-kernel", &setup).unwrap()
}

fn mf_random(mfp: &MeanFieldProblem, salt: u64) -> Control {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + salt);
    Control::random_blocks(mfp.horizon, &mfp.control_set, 20, &mut rng).unwrap()
}

fn c9_pairing() -> Verdict {
    let interaction = shipped("mf_interaction").with_particles(100).unwrap().meanfield_problem().unwrap();
    let kernel = kernel_problem(100);
    let a = checks::mf_pairing_drift(&interaction, &mf_random(&interaction, 9), 10, SEED).unwrap();
    let b = checks::mf_pairing_drift(&kernel, &mf_random(&kernel, 9), 10, SEED).unwrap();
    verdict(a.max(b) <= 1e-7, format!("interaction {a:.1e}, kernel {b:.1e}"))
}

fn c10_mf_increment() -> Verdict {
    let s = shipped("mf_interaction").with_steps(500).unwrap().with_particles(200).unwrap();
    let mfp = s.meanfield_problem().unwrap();
    let gap = mf_exact_increment(&mfp, &mf_random(&mfp, 10), &mf_random(&mfp, 11)).unwrap().abs_gap;
    let main = verdict(gap <= 1e-5, format!("N=200 n=500 gap {gap:.2e}"));

    // one particle: the mean is the particle, so F = u − β sin x and ℓ = |x − z|²
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let set = ControlSet::symmetric_box(1, 1.0).unwrap();
    let beta = 0.5;
    let single = meanfield(
        "mf-interaction",
        &MfSetup {
            params: Params::default(),
            target: Some(vec![0.5]),
            horizon: grid,
            control_set: set.clone(),
            initial: ParticleEnsemble::dirac(&[0.3], 1).unwrap(),
        },
    )
    .unwrap();
    let ode = ControlProblem::new(
        Arc::new(FnDynamics::new(
            1,
            1,
            move |_, x, u, out| out[0] = u[0] - beta * x[0].sin(),
            move |_, x, _, out| out[0] = -beta * x[0].cos(),
        )),
        Arc::new(QuadraticCost::isotropic(1.0, vec![0.5])),
        set,
        grid,
        vec![0.3],
    )
    .unwrap();
    let (a, b) = (mf_random(&single, 12), mf_random(&single, 13));
    let mf = mf_exact_increment(&single, &a, &b).unwrap().predicted;
    let cl = exact_increment(&ode, &a, &b).unwrap().predicted;
    let dirac = verdict((mf - cl).abs() <= 1e-8, format!("δ-reduction {:.1e}", (mf - cl).abs()));

    // measure-independent field and expected cost: average of classical increments
    let vdp = problem("van_der_pol");
    let starts = [[1.0, 0.0], [0.5, -0.5], [-0.3, 0.8], [1.2, 0.4], [0.0, 0.0]];
    let points: Vec<Vec<f64>> = starts.iter().map(|p| p.to_vec()).collect();
    let local = MeanFieldProblem::new(
        Arc::new(LocalField(vdp.dynamics.clone())),
        Arc::new(ExpectedCost(vdp.cost.clone())),
        vdp.control_set.clone(),
        vdp.horizon,
        ParticleEnsemble::from_points(&points).unwrap(),
    )
    .unwrap();
    let (a, b) = (random_control(&vdp, 14), random_control(&vdp, 15));
    let mf = mf_exact_increment(&local, &a, &b).unwrap().predicted;
    let avg = points
        .iter()
        .map(|x0| {
            let mut p = vdp.clone();
            p.initial_state = x0.clone();
            exact_increment(&p, &a, &b).unwrap().predicted
        })
        .sum::<f64>()
        / points.len() as f64;
    let local = verdict((mf - avg).abs() <= 1e-8, format!("measure-independent {:.1e}", (mf - avg).abs()));
    merge(vec![main, dirac, local])
}

/// `max |p̄_i(t)|` over nodes and particles of the lifted costate.
fn costate_scale(mfp: &MeanFieldProblem, control: &Control) -> f64 {
    let path = particle_flow(mfp, control, &mfp.initial, 0, mfp.horizon.n_steps()).unwrap();
    let mut terminal = vec![0.0; path.last().len()];
    mfp.cost.flat_gradients(path.last(), mfp.state_dim(), &mut terminal);
    let costate = lift_adjoint(mfp, control, &path, &terminal).unwrap();
    (0..=mfp.horizon.n_steps()).flat_map(|k| costate.at(k).to_vec()).fold(0.0, |m, v| m.max(v.abs()))
}

/// The residual bound applies to the converged mean-decoupling run, where the
/// optimum is known; on the interaction scenario the bang-bang sweep stops
/// `O(h)` away from extremality, which is printed for reference only.
fn c11_mf_descent() -> Verdict {
    let mut parts = Vec::new();
    for id in ["mf_steering", "mf_interaction"] {
        let s = shipped(id);
        let mfp = s.meanfield_problem().unwrap();
        let (control, trace) = mf_descent(&mfp, &u0(&s), &s.descent).unwrap();
        let (ok, _) = monotone(&trace);
        parts.push(verdict(ok, format!("{id} monotone")));
        let residual = mf_pmp_residual(&mfp, &control).unwrap().residual;
        let scale = mfp.horizon.duration() * costate_scale(&mfp, &control);
        if id == "mf_steering" {
            parts.push(verdict(residual <= 1e-3 * scale, format!("{id} residual {residual:.2e} vs 1e-3·{scale:.2}")));
            let target = s.target.clone().unwrap();
            let optimum = steering_optimum(&mfp.initial, &target, &[-1.0], &[1.0], mfp.horizon.duration());
            let excess = trace.final_cost - optimum;
            parts.push(verdict(excess.abs() <= 1e-3, format!("{id} final − optimum {excess:.1e}")));
        } else {
            println!("INFO {id}: residual {residual:.2e}, scale {scale:.2} (h = {:.1e})", mfp.horizon.step());
        }
    }
    merge(parts)
}

fn solve_bytes(id: &str) -> Vec<String> {
    let s = shipped(id);
    let (control, trace) = if s.is_meanfield() {
        mf_descent(&s.meanfield_problem().unwrap(), &u0(&s), &s.descent).unwrap()
    } else {
        solve(&s.classical_problem().unwrap(), &u0(&s), &s.descent).unwrap()
    };
    let summary = superadj::report::SolveSummary::new("feedback", &trace);
    let report = RunReport {
        scenario: s.id.clone(),
        problem: s.name.clone(),
        command: "solve".into(),
        seed: s.seed,
        grid: (&s.grid).into(),
        particles: s.meanfield.as_ref().map(|m| m.particles),
        final_cost: trace.final_cost,
        feedback: summary,
        baseline: None,
    };
    vec![report.to_json(), trace.to_csv(), control_csv(&control)]
}

fn check_bytes(id: &str) -> String {
    let s = shipped(id);
    let checks = if s.is_meanfield() {
        checks::run_meanfield(&s.meanfield_problem().unwrap(), s.seed).unwrap()
    } else {
        checks::run_classical(&s.classical_problem().unwrap(), s.seed).unwrap()
    };
    CheckReport { scenario: s.id, seed: s.seed, checks }.to_json()
}

fn c12_determinism() -> Verdict {
    let mut parts = Vec::new();
    for id in ["bilinear", "van_der_pol", "mf_steering"] {
        parts.push(verdict(solve_bytes(id) == solve_bytes(id), format!("solve {id}")));
    }
    for id in ["linear_scalar", "mf_interaction"] {
        parts.push(verdict(check_bytes(id) == check_bytes(id), format!("check {id}")));
    }
    merge(parts)
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("1 exact increment identity", c1_increment),
        ("1 increment convergence order", c1_order),
        ("2 gradient coincidence", c2_coincidence),
        ("3 duality constancy", c3_duality),
        ("4 riccati / hessian", c4_riccati),
        ("5 taylor expansion", c5_taylor),
        ("6 monotone descent", c6_monotone),
        ("7 double-integrator reachability", c7_double_integrator),
        ("8 baseline comparison", c8_baseline),
        ("9 mean-field pairing", c9_pairing),
        ("10 mean-field increment", c10_mf_increment),
        ("11 mean-field descent", c11_mf_descent),
        ("12 determinism", c12_determinism),
    ];
    let verdicts: Vec<Verdict> = std::thread::scope(|scope| {
        let handles: Vec<_> = criteria.iter().map(|(_, run)| scope.spawn(run)).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| verdict(false, "panicked"))).collect()
    });
    let mut failed = 0;
    for ((name, _), v) in criteria.iter().zip(&verdicts) {
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
