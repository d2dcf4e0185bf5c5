//! Acceptance criteria for the case study and the numerical building blocks.
//! Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use h2mix::network::{parse_network, Network};
use h2mix::nlp::{solve, Nlp, SolveStatus, SolverOptions};
use h2mix::ocp::build_nlp;
use h2mix::scenario::{load_documents, Scenario, ScenarioDocument, Series};
use h2mix::simulator::{
    consistency_study, simulate, simulate_homogeneous, BoundaryProfiles, ConsistencyCase, ControlProfiles,
    PeriodicProfile, SimulationOptions, SupplyProfile, Trajectory,
};
use h2mix::workflow::{run_workflow, steady_start_with};
use h2mix::Result;

const DAY: f64 = 86_400.0;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn case_study(alpha2: f64) -> Result<Scenario> {
    let (mut doc, net): (ScenarioDocument, Network) = load_documents(&fixture("case_study_scenario.toml"), None)?;
    doc.supply[0].hydrogen_fraction = Some(Series::Constant(alpha2));
    Scenario::new(doc, net)
}

struct Outcome {
    pass: bool,
    detail: String,
}

/// Linepack defects of every two-constituent simulation run here, with the
/// integrator tolerance it ran at.
#[derive(Default)]
struct Ledger {
    linepack: Vec<(String, f64, f64)>,
}

impl Ledger {
    fn record(&mut self, label: &str, traj: &Trajectory, rtol: f64) {
        self.linepack.push((label.to_string(), traj.linepack_residual, rtol));
    }
}

fn nlp_size() -> Result<Outcome> {
    let start = Instant::now();
    let (doc, net) = load_documents(&fixture("case_study_scenario.toml"), None)?;
    let scenario = Scenario::new(doc, net)?;
    let problem = build_nlp(&scenario.refined, &scenario.config, &scenario.boundary)?;
    let counts = problem.counts();
    let elapsed = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: counts.variables == 780 && counts.equalities == 740 && elapsed < 1.0,
        detail: format!(
            "{} variables, {} equalities, counted in {elapsed:.3} s",
            counts.variables, counts.equalities
        ),
    })
}

fn closeness(ledger: &mut Ledger) -> Result<Outcome> {
    let start = Instant::now();
    let scenario = case_study(0.1)?;
    let out = run_workflow(&scenario, None)?;
    let elapsed = start.elapsed().as_secs_f64();
    ledger.record("case study 10%", &out.simulated, scenario.document.simulation.rtol);
    let r = &out.report;
    Ok(Outcome {
        pass: r.pressure.average_l2 <= 2.0
            && r.pressure.max <= 5.0
            && r.flux.average_l2 <= 8.0
            && r.flux.max <= 30.0
            && elapsed <= 60.0,
        detail: format!(
            "pressure avg {:.3}% max {:.3}%, flux avg {:.3}% max {:.3}%, {elapsed:.2} s",
            r.pressure.average_l2, r.pressure.max, r.flux.average_l2, r.flux.max
        ),
    })
}

fn objective_ordering(ledger: &mut Ledger) -> Result<Outcome> {
    let mut values = Vec::new();
    for alpha in [0.05, 0.10, 0.15] {
        let scenario = case_study(alpha)?;
        let out = run_workflow(&scenario, None)?;
        ledger.record(
            &format!("case study {alpha}"),
            &out.simulated,
            scenario.document.simulation.rtol,
        );
        values.push(out.report.objective);
    }
    Ok(Outcome {
        pass: values.windows(2).all(|w| w[0] < w[1]),
        detail: format!("J = {:.6} < {:.6} < {:.6}", values[0], values[1], values[2]),
    })
}

fn single_pipe() -> Result<Network> {
    parse_network(
        "[[nodes]]\nid = 1\nkind = \"supply\"\n[[nodes]]\nid = 2\nkind = \"withdrawal\"\n\
         [[edges]]\nid = 1\nfrom = 1\nto = 2\nlength_km = 50.0\ndiameter_m = 0.5\nfriction = 0.011\n",
    )
}

fn consistency() -> Result<Outcome> {
    let start = Instant::now();
    let gas = h2mix::dynamics::Gas::new(338.38, 1353.52)?;
    let case = ConsistencyCase {
        gas,
        supply_pressure: 5e6,
        alpha2: 0.1,
        withdrawal: PeriodicProfile::sampled(97, DAY, |t| {
            vec![150.0 + 60.0 * (2.0 * std::f64::consts::PI * t / DAY).sin()]
        })?,
        rtol: 1e-9,
        report_points: 289,
    };
    let caps = [10e3, 5e3, 2.5e3];
    let rep = consistency_study(&single_pipe()?, &case, &caps, 625.0)?;
    let elapsed = start.elapsed().as_secs_f64();
    let decreasing = |e: &[f64]| e.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing(&rep.pressure_errors)
        && decreasing(&rep.flux_errors)
        && rep.pressure_orders.iter().chain(&rep.flux_orders).all(|&o| o >= 0.8)
        && elapsed <= 30.0;
    Ok(Outcome {
        pass,
        detail: format!(
            "pressure errors {:.3e}/{:.3e}/{:.3e} orders {:.2}/{:.2}, flux errors {:.3e}/{:.3e}/{:.3e} orders {:.2}/{:.2}, {elapsed:.2} s",
            rep.pressure_errors[0],
            rep.pressure_errors[1],
            rep.pressure_errors[2],
            rep.pressure_orders[0],
            rep.pressure_orders[1],
            rep.flux_errors[0],
            rep.flux_errors[1],
            rep.flux_errors[2],
            rep.flux_orders[0],
            rep.flux_orders[1]
        ),
    })
}

fn fixed_controls(scenario: &Scenario) -> Result<(ControlProfiles, Vec<f64>)> {
    let ratios = vec![1.3, 1.1];
    let controls = ControlProfiles {
        ratios: PeriodicProfile::constant(ratios.clone(), scenario.config.horizon)?,
    };
    Ok((controls, ratios))
}

fn homogeneous_equivalence(ledger: &mut Ledger) -> Result<Outcome> {
    let scenario = case_study(0.1)?;
    let (controls, ratios) = fixed_controls(&scenario)?;
    let x0 = steady_start_with(&scenario, &ratios)?.state;
    let opts = SimulationOptions {
        rtol: 1e-8,
        record_steps: false,
        ..scenario.document.simulation_options()
    };
    let gas = &scenario.config.gas;
    let full = simulate(&scenario.refined, gas, &scenario.boundary, &controls, &x0, DAY, &opts)?;
    ledger.record("two-density 10%", &full, opts.rtol);
    let reduced = simulate_homogeneous(&scenario.refined, gas, &scenario.boundary, &controls, &x0, DAY, &opts)?;
    let mut worst: f64 = 0.0;
    for (a, b) in full.states.iter().zip(&reduced.states) {
        for (x, y) in a.total_density().iter().zip(b.total_density()) {
            worst = worst.max((x - y).abs() / y.abs());
        }
    }
    let same_grid = full.times == reduced.times;

    let pure = case_study(0.0)?;
    let x0 = steady_start_with(&pure, &ratios)?.state;
    let ng = simulate(
        &pure.refined,
        &pure.config.gas,
        &pure.boundary,
        &controls,
        &x0,
        DAY,
        &opts,
    )?;
    ledger.record("two-density 0%", &ng, opts.rtol);
    let scale = ng
        .states
        .iter()
        .flat_map(|s| s.rho1.iter().copied())
        .fold(0.0, f64::max);
    let leak = ng
        .states
        .iter()
        .flat_map(|s| s.rho2.iter().copied())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Outcome {
        pass: same_grid && worst <= 1e-5 && leak <= f64::EPSILON * scale,
        detail: format!("max relative total-density gap {worst:.3e}, hydrogen-free max |rho2| {leak:.1e}"),
    })
}

fn derivative_check() -> Result<Outcome> {
    let scenario = case_study(0.1)?;
    let problem = build_nlp(&scenario.refined, &scenario.config, &scenario.boundary)?;
    let steady = steady_start_with(&scenario, &[1.0, 1.0])?.state;
    let base = problem.replicated_start(&steady)?;
    let (lo, hi) = problem.var_bounds();
    let n = problem.num_vars();
    let m = problem.num_eq() + problem.num_ineq();
    let pattern = problem.jacobian_structure();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
    let stacked = |x: &[f64]| -> Result<Vec<f64>> {
        let mut c = vec![0.0; problem.num_eq()];
        let mut d = vec![0.0; problem.num_ineq()];
        problem.eq_constraints(x, &mut c)?;
        problem.ineq_constraints(x, &mut d)?;
        c.extend(d);
        Ok(c)
    };
    for _ in 0..10 {
        let x: Vec<f64> = (0..n)
            .map(|i| {
                if lo[i].is_finite() && hi[i].is_finite() && hi[i] > lo[i] {
                    rng.gen_range(lo[i]..hi[i])
                } else if lo[i] == hi[i] {
                    lo[i]
                } else {
                    base[i] * rng.gen_range(0.9..1.1)
                }
            })
            .collect();
        let mut grad = vec![0.0; n];
        problem.gradient(&x, &mut grad)?;
        let mut jac = vec![0.0; pattern.len()];
        problem.jacobian_values(&x, &mut jac)?;
        let mut dense = vec![vec![0.0; n]; m];
        for (&(r, c), &v) in pattern.iter().zip(&jac) {
            dense[r][c] += v;
        }
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (problem.objective(&xp)? - problem.objective(&xm)?) / (2.0 * h);
            worst = worst.max(rel(grad[j], fd));
            let (cp, cm) = (stacked(&xp)?, stacked(&xm)?);
            for r in 0..m {
                worst = worst.max(rel(dense[r][j], (cp[r] - cm[r]) / (2.0 * h)));
            }
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-6,
        detail: format!("max relative error {worst:.3e} over 10 seeded points"),
    })
}

fn steady_fixed_point(ledger: &mut Ledger) -> Result<Outcome> {
    let scenario = case_study(0.1)?;
    let (controls, ratios) = fixed_controls(&scenario)?;
    let gas = &scenario.config.gas;
    let steady = steady_start_with(&scenario, &ratios)?;
    let b0 = scenario.boundary.at(0.0, gas)?;
    let mean_w: Vec<f64> = (0..b0.w.len()).map(|j| scenario.boundary.withdrawal.mean(j)).collect();
    let boundary = BoundaryProfiles {
        supply: SupplyProfile::Densities {
            s1: PeriodicProfile::constant(b0.s1.clone(), DAY)?,
            s2: PeriodicProfile::constant(b0.s2.clone(), DAY)?,
        },
        withdrawal: PeriodicProfile::constant(mean_w, DAY)?,
    };
    let opts = scenario.document.simulation_options();
    let traj = simulate(&scenario.refined, gas, &boundary, &controls, &steady.state, DAY, &opts)?;
    ledger.record("constant boundary", &traj, opts.rtol);
    let x0 = &steady.state;
    let mut drift: f64 = 0.0;
    for s in &traj.states {
        let tot0 = x0.total_density();
        for (a, b) in s.total_density().iter().zip(&tot0) {
            drift = drift.max((a - b).abs() / b);
        }
        let fscale = x0.flux.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in s.flux.iter().zip(&x0.flux) {
            drift = drift.max((a - b).abs() / fscale);
        }
    }
    Ok(Outcome {
        pass: steady.residual <= 1e-10 && drift <= 1e-6,
        detail: format!("Newton residual {:.2e}, 24 h drift {drift:.2e}", steady.residual),
    })
}

fn conservation(ledger: &Ledger) -> Outcome {
    let worst = ledger.linepack.iter().map(|(_, r, tol)| r / tol).fold(0.0, f64::max);
    let failing: Vec<&str> = ledger
        .linepack
        .iter()
        .filter(|(_, r, tol)| *r > 10.0 * tol)
        .map(|(l, _, _)| l.as_str())
        .collect();
    Outcome {
        pass: !ledger.linepack.is_empty() && failing.is_empty(),
        detail: format!(
            "{} trajectories, worst residual {worst:.3} x tolerance{}",
            ledger.linepack.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(", "))
            }
        ),
    }
}

/// `min ½‖x − a‖² + ½‖x‖²` over a box, with one equality `Σx = b` and one
/// inequality `x₀ − x₁ ≤ u`.
struct ConvexQp {
    a: Vec<f64>,
    lower: f64,
    upper: f64,
    sum: Option<f64>,
    gap: Option<f64>,
}

impl Nlp for ConvexQp {
    fn num_vars(&self) -> usize {
        self.a.len()
    }
    fn num_eq(&self) -> usize {
        self.sum.is_some() as usize
    }
    fn num_ineq(&self) -> usize {
        self.gap.is_some() as usize
    }
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![self.lower; self.a.len()], vec![self.upper; self.a.len()])
    }
    fn ineq_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self.gap {
            Some(u) => (vec![f64::NEG_INFINITY], vec![u]),
            None => (vec![], vec![]),
        }
    }
    fn objective(&self, x: &[f64]) -> Result<f64> {
        Ok(x.iter()
            .zip(&self.a)
            .map(|(x, a)| 0.5 * (x - a).powi(2) + 0.5 * x * x)
            .sum())
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) -> Result<()> {
        for i in 0..x.len() {
            g[i] = 2.0 * x[i] - self.a[i];
        }
        Ok(())
    }
    fn eq_constraints(&self, x: &[f64], c: &mut [f64]) -> Result<()> {
        if let Some(b) = self.sum {
            c[0] = x.iter().sum::<f64>() - b;
        }
        Ok(())
    }
    fn ineq_constraints(&self, x: &[f64], d: &mut [f64]) -> Result<()> {
        if self.gap.is_some() {
            d[0] = x[0] - x[1];
        }
        Ok(())
    }
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let mut p = Vec::new();
        if self.sum.is_some() {
            p.extend((0..self.a.len()).map(|i| (0, i)));
        }
        if self.gap.is_some() {
            let r = self.num_eq();
            p.extend([(r, 0), (r, 1)]);
        }
        p
    }
    fn jacobian_values(&self, _x: &[f64], v: &mut [f64]) -> Result<()> {
        let mut k = 0;
        if self.sum.is_some() {
            for _ in 0..self.a.len() {
                v[k] = 1.0;
                k += 1;
            }
        }
        if self.gap.is_some() {
            v[k] = 1.0;
            v[k + 1] = -1.0;
        }
        Ok(())
    }
    fn hessian_structure(&self) -> Option<Vec<(usize, usize)>> {
        Some((0..self.a.len()).map(|i| (i, i)).collect())
    }
}

fn solver_suite() -> Result<Outcome> {
    let opts = SolverOptions {
        tol_kkt: 1e-10,
        tol_feas: 1e-12,
        ..Default::default()
    };
    // box only: x = clamp(a/2)
    let boxed = ConvexQp {
        a: vec![-3.0, -0.5, 0.4, 1.0, 5.0],
        lower: 0.0,
        upper: 2.0,
        sum: None,
        gap: None,
    };
    let boxed_exact: Vec<f64> = boxed.a.iter().map(|a| (a / 2.0).clamp(0.0, 2.0)).collect();
    // equality: x = a/2 + λ·1 with Σx = b
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let shift = (3.0 - a.iter().sum::<f64>() / 2.0) / a.len() as f64;
    let eq = ConvexQp {
        a: a.clone(),
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
        sum: Some(3.0),
        gap: None,
    };
    let eq_exact: Vec<f64> = a.iter().map(|a| a / 2.0 + shift).collect();
    // active inequality: minimizer (2, 0) shifted onto x₀ − x₁ = 1
    let ineq = ConvexQp {
        a: vec![4.0, 0.0],
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
        sum: None,
        gap: Some(1.0),
    };
    let ineq_exact = vec![1.5, 0.5];
    let mut worst: f64 = 0.0;
    let mut converged = true;
    let mut identical = true;
    for (qp, exact) in [(&boxed, &boxed_exact), (&eq, &eq_exact), (&ineq, &ineq_exact)] {
        let x0 = vec![0.7; qp.a.len()];
        let r1 = solve(qp, &x0, &opts)?;
        let r2 = solve(qp, &x0, &opts)?;
        converged &= r1.status == SolveStatus::Converged;
        identical &= r1.x.iter().zip(&r2.x).all(|(a, b)| a.to_bits() == b.to_bits()) && r1.iterations == r2.iterations;
        for (x, e) in r1.x.iter().zip(exact.iter()) {
            worst = worst.max((x - e).abs());
        }
    }
    Ok(Outcome {
        pass: converged && identical && worst <= 1e-8,
        detail: format!("3 programs, max solution error {worst:.2e}, repeat runs bitwise identical: {identical}"),
    })
}

fn periodicity() -> Result<Outcome> {
    let scenario = case_study(0.1)?;
    let out = run_workflow(&scenario, None)?;
    let opt = &out.optimization;
    let tol_feas = scenario.document.solver.tol_feas;
    let residual = opt
        .problem
        .equality_residual(&opt.result.x)?
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let first = &opt.trajectory.states[0];
    let last = &opt.trajectory.states[opt.trajectory.states.len() - 1];
    let closed = first == last;
    let gap = out.report.periodicity_gap;
    Ok(Outcome {
        pass: residual <= tol_feas && closed && gap <= 0.05,
        detail: format!(
            "optimized equality residual {residual:.2e} (tolerance {tol_feas:.0e}), simulated gap {:.2}% of peak-to-peak",
            100.0 * gap
        ),
    })
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let mut lines: Vec<(usize, &str, Result<Outcome>)> = vec![
        (1, "NLP size", nlp_size()),
        (2, "optimize-simulate closeness", closeness(&mut ledger)),
        (3, "objective ordering", objective_ordering(&mut ledger)),
        (4, "refinement consistency", consistency()),
        (5, "homogeneous equivalence", homogeneous_equivalence(&mut ledger)),
        (6, "derivative correctness", derivative_check()),
        (7, "steady-state fixed point", steady_fixed_point(&mut ledger)),
    ];
    let suite = solver_suite();
    let periodic = periodicity();
    lines.push((8, "linepack conservation", Ok(conservation(&ledger))));
    lines.push((9, "solver unit suite", suite));
    lines.push((10, "periodicity", periodic));
    let mut failed = 0;
    for (n, name, outcome) in lines {
        let (pass, detail) = match outcome {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "criterion {n:>2} {name}: {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
