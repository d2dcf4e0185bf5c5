use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use h2mix::error::StageExt;
use h2mix::network::{parse_network, refine};
use h2mix::scenario::{load_documents, Scenario};
use h2mix::simulator::{Trajectory, TrajectoryTable};
use h2mix::validation::ValidationReport;
use h2mix::workflow::{
    optimize, read_controls_csv, run_workflow, simulate_scenario, state_from_table, steady_start, steady_start_with,
    validate_dirs, write_comparison, write_simulated, REPORT_FILE,
};
use h2mix::{Error, Result, Stage};

#[derive(Parser)]
#[command(
    name = "h2mix",
    version,
    about = "Hydrogen blend pipeline simulation and compressor control"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split pipes into segments no longer than the cap.
    Refine {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        cap_km: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Steady state for mean withdrawals, written as a one-row trajectory.
    Steady {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one horizon under given control profiles.
    Simulate {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        controls: PathBuf,
        /// Trajectory whose first row is the initial state; defaults to the
        /// steady state for the initial controls.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Solve the periodic optimal control problem.
    Optimize {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare an optimized and a simulated run directory.
    Validate {
        #[arg(long)]
        optimized: PathBuf,
        #[arg(long)]
        simulated: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metric table of a run and write plot-ready comparison data.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Optimize, simulate and validate one or more scenarios, one worker each.
    Run {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load(scenario: &Path, network: Option<&Path>) -> Result<Scenario> {
    let (document, net) = load_documents(scenario, network).stage(Stage::Parse)?;
    Scenario::new(document, net).stage(Stage::Refine)
}

fn run_refine(network: &Path, cap_km: f64, out: &Path) -> Result<()> {
    let net = fs::read_to_string(network)
        .map_err(Error::from)
        .and_then(|text| parse_network(&text))
        .stage(Stage::Parse)?;
    let refined = refine(&net, cap_km * 1e3).stage(Stage::Refine)?;
    info!(
        "{} edges, {} withdrawal nodes after refinement",
        refined.network.edges().len(),
        refined.network.num_withdrawal()
    );
    fs::write(out, refined.network.to_document())
        .map_err(Error::from)
        .stage(Stage::Write)
}

fn run_steady(scenario: &Scenario, out: &Path) -> Result<()> {
    let steady = steady_start(scenario).stage(Stage::SteadyState)?;
    info!(
        "steady state after {} iterations, residual {:e}",
        steady.iterations, steady.residual
    );
    let traj = Trajectory::from_states(
        vec![0.0],
        vec![steady.state],
        &scenario.config.gas,
        &scenario.refined.network,
    )
    .stage(Stage::SteadyState)?;
    fs::File::create(out)
        .map_err(Error::from)
        .and_then(|f| traj.write_csv(f))
        .stage(Stage::Write)
}

fn run_simulate(scenario: &Scenario, controls: &Path, initial: Option<&Path>, out_dir: &Path) -> Result<()> {
    let controls = fs::File::open(controls)
        .map_err(Error::from)
        .and_then(|f| read_controls_csv(f, scenario.config.horizon))
        .stage(Stage::Parse)?;
    let x0 = match initial {
        Some(path) => fs::File::open(path)
            .map_err(Error::from)
            .and_then(TrajectoryTable::read_csv)
            .and_then(|table| state_from_table(&table, 0, &scenario.config.gas))
            .stage(Stage::Parse)?,
        None => {
            steady_start_with(scenario, &controls.at(0.0))
                .stage(Stage::SteadyState)?
                .state
        }
    };
    let start = Instant::now();
    let traj = simulate_scenario(scenario, &controls, &x0).stage(Stage::Simulate)?;
    info!(
        "{} accepted steps, linepack residual {:e}",
        traj.stats.accepted, traj.linepack_residual
    );
    write_simulated(out_dir, &traj, start.elapsed().as_secs_f64()).stage(Stage::Write)
}

fn run_optimize(scenario: &Scenario, out_dir: &Path) -> Result<()> {
    let opt = optimize(scenario, Some(out_dir))?;
    println!(
        "objective {:.6} after {} iterations",
        opt.result.objective, opt.result.iterations
    );
    Ok(())
}

fn run_validate(optimized: &Path, simulated: &Path, out: &Path) -> Result<()> {
    let report = validate_dirs(optimized, simulated).stage(Stage::Validate)?;
    print_report(&report);
    report
        .to_toml()
        .and_then(|text| Ok(fs::write(out, text)?))
        .stage(Stage::Write)
}

fn run_report(run_dir: &Path) -> Result<()> {
    let report = fs::read_to_string(run_dir.join(REPORT_FILE))
        .map_err(Error::from)
        .and_then(|text| ValidationReport::from_toml(&text))
        .stage(Stage::Parse)?;
    print_report(&report);
    let path = write_comparison(run_dir).stage(Stage::Write)?;
    println!("comparison data: {}", path.display());
    Ok(())
}

fn run_sweep(scenarios: &[PathBuf], network: Option<&Path>, out_dir: &Path) -> Result<()> {
    let dirs: Vec<PathBuf> = if scenarios.len() == 1 {
        vec![out_dir.to_path_buf()]
    } else {
        scenarios
            .iter()
            .map(|p| out_dir.join(p.file_stem().unwrap_or(p.as_os_str())))
            .collect()
    };
    let results: Vec<Result<ValidationReport>> = std::thread::scope(|scope| {
        let workers: Vec<_> = scenarios
            .iter()
            .zip(&dirs)
            .map(|(path, dir)| scope.spawn(move || Ok(run_workflow(&load(path, network)?, Some(dir))?.report)))
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("scenario worker panicked"))
            .collect()
    });
    let mut first_error = None;
    for ((path, dir), result) in scenarios.iter().zip(&dirs).zip(results) {
        println!("== {} -> {}", path.display(), dir.display());
        match result {
            Ok(report) => print_report(&report),
            Err(e) => {
                eprintln!("error: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

fn print_report(r: &ValidationReport) {
    println!("objective            {:.6}", r.objective);
    println!("{:<20} {:>12} {:>12}", "quantity", "avg L2 [%]", "max [%]");
    println!(
        "{:<20} {:>12.4} {:>12.4}",
        "pressure", r.pressure.average_l2, r.pressure.max
    );
    println!("{:<20} {:>12.4} {:>12.4}", "flux", r.flux.average_l2, r.flux.max);
    println!("periodicity gap      {:.4e}", r.periodicity_gap);
    println!("linepack residual    {:.4e}", r.linepack_residual);
    println!(
        "solver               {} ({} iterations, kkt {:.2e}, violation {:.2e})",
        r.solver.status, r.solver.iterations, r.solver.kkt_residual, r.solver.constraint_violation
    );
    println!(
        "problem size         {} variables, {} equalities, {} pressure rows, {} ratio bounds",
        r.solver.variables, r.solver.equalities, r.solver.pressure_rows, r.solver.ratio_bounds
    );
    println!(
        "runtime              optimize {:.2} s, simulate {:.2} s, total {:.2} s",
        r.runtimes.optimize_s, r.runtimes.simulate_s, r.runtimes.total_s
    );
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Refine { network, cap_km, out } => run_refine(&network, cap_km, &out),
        Command::Steady { network, scenario, out } => run_steady(&load(&scenario, network.as_deref())?, &out),
        Command::Simulate {
            network,
            scenario,
            controls,
            initial,
            out_dir,
        } => run_simulate(
            &load(&scenario, network.as_deref())?,
            &controls,
            initial.as_deref(),
            &out_dir,
        ),
        Command::Optimize {
            network,
            scenario,
            out_dir,
        } => run_optimize(&load(&scenario, network.as_deref())?, &out_dir),
        Command::Validate {
            optimized,
            simulated,
            out,
        } => run_validate(&optimized, &simulated, &out),
        Command::Report { run_dir } => run_report(&run_dir),
        Command::Run {
            network,
            scenario,
            out_dir,
        } => run_sweep(&scenario, network.as_deref(), &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let tag = e.stage().map_or_else(|| "unknown".to_string(), |s| s.to_string());
            eprintln!("h2mix [{tag}]: {e}");
            ExitCode::FAILURE
        }
    }
}
