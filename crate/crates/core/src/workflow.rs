//! The optimize-then-simulate validation loop and its file artifacts.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Gas, MixtureModel, MixtureState, SteadyOptions, SteadyState};
use crate::error::{Error, Result, Stage, StageExt};
use crate::nlp::{solve, NlpResult, SolveStatus};
use crate::ocp::{build_nlp, extract_controls, NlpProblem, ProblemCounts};
use crate::scenario::{load_documents, Scenario};
use crate::simulator::{simulate, ControlProfiles, PeriodicProfile, Trajectory, TrajectoryTable};
use crate::validation::{
    compare_tables, compare_trajectories, merged_grid, periodicity_gap, pressure_periodicity_gap, Runtimes,
    SolverSummary, TimeSeries, ValidationReport,
};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CONTROLS_FILE: &str = "controls.csv";
pub const SOLUTION_FILE: &str = "solution.toml";
pub const SIMULATION_FILE: &str = "simulation.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const OPTIMIZED_DIR: &str = "optimized";
pub const SIMULATED_DIR: &str = "simulated";

/// Steady state for time-averaged withdrawals, supply data at `t = 0` and
/// actuators at their lower bounds.
pub fn steady_start(scenario: &Scenario) -> Result<SteadyState> {
    let lower: Vec<f64> = scenario.config.ratio_bounds.iter().map(|b| b.0).collect();
    steady_start_with(scenario, &lower)
}

/// [`steady_start`] with the given actuator ratios.
pub fn steady_start_with(scenario: &Scenario, actuator_ratios: &[f64]) -> Result<SteadyState> {
    let model = MixtureModel::new(&scenario.refined, &scenario.config.gas);
    let mut bnd = scenario.boundary.at(0.0, &scenario.config.gas)?;
    bnd.w = (0..bnd.w.len()).map(|j| scenario.boundary.withdrawal.mean(j)).collect();
    let ratios = model.topology.edge_ratios(actuator_ratios)?;
    model.steady_state(
        &bnd,
        &ratios,
        &SteadyOptions {
            pressure_scale: Some(scenario.config.max_pressure()),
            ..Default::default()
        },
    )
}

/// Result of transcribing and solving the control problem.
#[derive(Debug, Clone)]
pub struct Optimization {
    pub problem: NlpProblem,
    pub result: NlpResult,
    /// Optimized states on the collocation grid, closed at `t = T`.
    pub trajectory: Trajectory,
    pub controls: ControlProfiles,
    pub build_time: Duration,
}

impl Optimization {
    /// Optimal state at `t = 0`, the initial condition for validation.
    pub fn initial_state(&self) -> MixtureState {
        self.trajectory.states[0].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionDocument {
    pub status: String,
    pub horizon_s: f64,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub solve_s: f64,
    pub variables: usize,
    pub equalities: usize,
    pub pressure_rows: usize,
    pub ratio_bounds: usize,
}

/// Run data of a validating simulation, stored next to its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub simulate_s: f64,
    pub linepack_residual: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl SolutionDocument {
    fn summary(&self) -> SolverSummary {
        SolverSummary {
            status: self.status.clone(),
            iterations: self.iterations,
            kkt_residual: self.kkt_residual,
            constraint_violation: self.constraint_violation,
            variables: self.variables,
            equalities: self.equalities,
            pressure_rows: self.pressure_rows,
            ratio_bounds: self.ratio_bounds,
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(fs::write(path, text)?)
}

fn read_table(path: &Path) -> Result<TrajectoryTable> {
    TrajectoryTable::read_csv(fs::File::open(path)?)
}

/// Writes a simulated trajectory and its run data into `dir`.
pub fn write_simulated(dir: &Path, traj: &Trajectory, simulate_s: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    traj.write_csv(fs::File::create(dir.join(TRAJECTORY_FILE))?)?;
    write_toml(
        &dir.join(SIMULATION_FILE),
        &SimulationDocument {
            simulate_s,
            linepack_residual: traj.linepack_residual,
            accepted_steps: traj.stats.accepted,
            rejected_steps: traj.stats.rejected,
        },
    )
}

/// Report from an optimized and a simulated artifact directory.
pub fn validate_dirs(optimized: &Path, simulated: &Path) -> Result<ValidationReport> {
    let solution: SolutionDocument = read_toml(&optimized.join(SOLUTION_FILE))?;
    let simulation: SimulationDocument = read_toml(&simulated.join(SIMULATION_FILE))?;
    let opt = read_table(&optimized.join(TRAJECTORY_FILE))?;
    let sim = read_table(&simulated.join(TRAJECTORY_FILE))?;
    let (pressure, flux) = compare_tables(&opt, &sim, solution.horizon_s)?;
    Ok(ValidationReport {
        objective: solution.objective,
        pressure,
        flux,
        periodicity_gap: pressure_periodicity_gap(&sim.pressure),
        linepack_residual: simulation.linepack_residual,
        solver: solution.summary(),
        runtimes: Runtimes {
            optimize_s: solution.solve_s,
            simulate_s: simulation.simulate_s,
            total_s: solution.solve_s + simulation.simulate_s,
        },
    })
}

fn solver_summary(result: &NlpResult, counts: ProblemCounts) -> SolverSummary {
    SolverSummary {
        status: result.status.to_string(),
        iterations: result.iterations,
        kkt_residual: result.kkt_residual,
        constraint_violation: result.constraint_violation,
        variables: counts.variables,
        equalities: counts.equalities,
        pressure_rows: counts.pressure_rows,
        ratio_bounds: counts.ratio_bounds,
    }
}

/// Steady start, transcription, solve and control extraction. When
/// `artifact_dir` is given the optimized artifacts are written there, also
/// when the solver fails.
pub fn optimize(scenario: &Scenario, artifact_dir: Option<&Path>) -> Result<Optimization> {
    let steady = steady_start(scenario).stage(Stage::SteadyState)?;
    let t0 = Instant::now();
    let problem = build_nlp(&scenario.refined, &scenario.config, &scenario.boundary).stage(Stage::BuildNlp)?;
    let build_time = t0.elapsed();
    let x0 = problem.replicated_start(&steady.state).stage(Stage::BuildNlp)?;
    let result = solve(&problem, &x0, &scenario.document.solver_options()).stage(Stage::Solve)?;
    info!(
        "solver {} after {} iterations, objective {:.6}",
        result.status, result.iterations, result.objective
    );
    let solution = SolutionDocument {
        status: result.status.to_string(),
        horizon_s: scenario.config.horizon,
        objective: result.objective,
        iterations: result.iterations,
        kkt_residual: result.kkt_residual,
        constraint_violation: result.constraint_violation,
        solve_s: result.wall_time.as_secs_f64(),
        variables: problem.counts().variables,
        equalities: problem.counts().equalities,
        pressure_rows: problem.counts().pressure_rows,
        ratio_bounds: problem.counts().ratio_bounds,
    };
    let trajectory = problem
        .trajectory(&result.x, &scenario.refined.network)
        .stage(Stage::ExtractControls)?;
    let controls = extract_controls(&problem, &result.x).stage(Stage::ExtractControls)?;
    if let Some(dir) = artifact_dir {
        write_optimized(dir, &solution, &trajectory, &controls).stage(Stage::Write)?;
    }
    if result.status != SolveStatus::Converged {
        return Err(Error::SolverFailed {
            status: result.status.to_string(),
            iterations: result.iterations,
        }
        .at(Stage::Solve));
    }
    Ok(Optimization {
        problem,
        result,
        trajectory,
        controls,
        build_time,
    })
}

fn write_optimized(
    dir: &Path,
    solution: &SolutionDocument,
    traj: &Trajectory,
    controls: &ControlProfiles,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_toml(&dir.join(SOLUTION_FILE), solution)?;
    traj.write_csv(fs::File::create(dir.join(TRAJECTORY_FILE))?)?;
    write_controls_csv(controls, fs::File::create(dir.join(CONTROLS_FILE))?)
}

/// Simulates the scenario under `controls` from `x0` over one horizon.
pub fn simulate_scenario(scenario: &Scenario, controls: &ControlProfiles, x0: &MixtureState) -> Result<Trajectory> {
    simulate(
        &scenario.refined,
        &scenario.config.gas,
        &scenario.boundary,
        controls,
        x0,
        scenario.config.horizon,
        &scenario.document.simulation_options(),
    )
}

#[derive(Debug, Clone)]
pub struct WorkflowOutput {
    pub optimization: Optimization,
    pub simulated: Trajectory,
    pub report: ValidationReport,
}

/// Optimizes, simulates the optimal schedule from the optimal initial state
/// and compares the two trajectories. Errors carry the failing stage.
pub fn run_workflow(scenario: &Scenario, out_dir: Option<&Path>) -> Result<WorkflowOutput> {
    let start = Instant::now();
    let optimization = optimize(scenario, out_dir.map(|d| d.join(OPTIMIZED_DIR)).as_deref())?;
    let optimize_s = start.elapsed().as_secs_f64();
    let t_sim = Instant::now();
    let simulated =
        simulate_scenario(scenario, &optimization.controls, &optimization.initial_state()).stage(Stage::Simulate)?;
    let simulate_s = t_sim.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        write_simulated(&dir.join(SIMULATED_DIR), &simulated, simulate_s).stage(Stage::Write)?;
    }
    let (pressure, flux) =
        compare_trajectories(&optimization.trajectory, &simulated, scenario.config.horizon).stage(Stage::Validate)?;
    let report = ValidationReport {
        objective: optimization.result.objective,
        pressure,
        flux,
        periodicity_gap: periodicity_gap(&simulated),
        linepack_residual: simulated.linepack_residual,
        solver: solver_summary(&optimization.result, optimization.problem.counts()),
        runtimes: Runtimes {
            optimize_s,
            simulate_s,
            total_s: start.elapsed().as_secs_f64(),
        },
    };
    if let Some(dir) = out_dir {
        report
            .to_toml()
            .and_then(|text| Ok(fs::write(dir.join(REPORT_FILE), text)?))
            .stage(Stage::Write)?;
    }
    Ok(WorkflowOutput {
        optimization,
        simulated,
        report,
    })
}

/// Loads a scenario file (parse stage), resolves it (refine stage) and runs
/// the workflow.
pub fn run_workflow_file(path: &Path, out_dir: Option<&Path>) -> Result<WorkflowOutput> {
    let (document, network) = load_documents(path, None).stage(Stage::Parse)?;
    let scenario = Scenario::new(document, network).stage(Stage::Refine)?;
    run_workflow(&scenario, out_dir)
}

/// Writes optimized and simulated pressures and fluxes side by side on the
/// merged time grid of a run directory, for plotting.
pub fn write_comparison(run_dir: &Path) -> Result<std::path::PathBuf> {
    let solution: SolutionDocument = read_toml(&run_dir.join(OPTIMIZED_DIR).join(SOLUTION_FILE))?;
    let opt = read_table(&run_dir.join(OPTIMIZED_DIR).join(TRAJECTORY_FILE))?;
    let sim = read_table(&run_dir.join(SIMULATED_DIR).join(TRAJECTORY_FILE))?;
    if opt.node_ids != sim.node_ids || opt.edge_ids != sim.edge_ids {
        return Err(Error::InvalidInput(
            "trajectories cover different nodes or edges".into(),
        ));
    }
    let series = [
        (TimeSeries::table_pressures(&opt)?, TimeSeries::table_pressures(&sim)?),
        (TimeSeries::table_fluxes(&opt)?, TimeSeries::table_fluxes(&sim)?),
    ];
    let mut header = vec!["t_s".to_string()];
    for id in &opt.node_ids {
        header.push(format!("p_opt_node_{id}"));
        header.push(format!("p_sim_node_{id}"));
    }
    for id in &opt.edge_ids {
        header.push(format!("phi_opt_edge_{id}"));
        header.push(format!("phi_sim_edge_{id}"));
    }
    let path = run_dir.join(COMPARISON_FILE);
    let mut wr = csv::Writer::from_path(&path)?;
    wr.write_record(&header)?;
    for t in merged_grid(&series[1].0, &series[1].1, solution.horizon_s) {
        let mut row = vec![t];
        for (a, b) in &series {
            for i in 0..a.dim() {
                row.push(a.at(t, i));
                row.push(b.at(t, i));
            }
        }
        wr.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    wr.flush()?;
    Ok(path)
}

/// Writes control profiles as `t_s, mu_actuator_<i>` rows.
pub fn write_controls_csv<W: std::io::Write>(controls: &ControlProfiles, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t_s".to_string()];
    header.extend((1..=controls.num_actuators()).map(|i| format!("mu_actuator_{i}")));
    wr.write_record(&header)?;
    for (t, v) in controls.ratios.sample_times().iter().zip(controls.ratios.values()) {
        wr.write_record(std::iter::once(t).chain(v).map(|x| format!("{x:e}")))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads control profiles written by [`write_controls_csv`].
pub fn read_controls_csv<R: std::io::Read>(r: R, period: f64) -> Result<ControlProfiles> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.get(0) != Some("t_s") {
        return Err(Error::Parse("first controls column must be t_s".into()));
    }
    for (i, name) in header.iter().enumerate().skip(1) {
        if name != format!("mu_actuator_{i}") {
            return Err(Error::Parse(format!("unexpected controls column {name}")));
        }
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in rd.records() {
        let row = rec?
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number {f:?} in controls")))
            })
            .collect::<Result<Vec<_>>>()?;
        times.push(row[0]);
        values.push(row[1..].to_vec());
    }
    Ok(ControlProfiles {
        ratios: PeriodicProfile::new(times, values, period)?,
    })
}

/// State at one row of an exported trajectory: densities from pressure and
/// hydrogen fraction, fluxes as written.
pub fn state_from_table(table: &TrajectoryTable, row: usize, gas: &Gas) -> Result<MixtureState> {
    if row >= table.times.len() {
        return Err(Error::InvalidInput(format!("trajectory has no row {row}")));
    }
    let mut rho1 = Vec::with_capacity(table.node_ids.len());
    let mut rho2 = Vec::with_capacity(table.node_ids.len());
    for (&p, &eta) in table.pressure[row].iter().zip(&table.eta2[row]) {
        let total = p / gas.mixture_sound_speed_sq(eta);
        rho1.push((1.0 - eta) * total);
        rho2.push(eta * total);
    }
    Ok(MixtureState {
        rho1,
        rho2,
        flux: table.flux[row].clone(),
    })
}
