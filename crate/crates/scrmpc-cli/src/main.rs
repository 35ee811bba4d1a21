//! `scr-mpc`: solve, certify, simulate, and verify robust MPC scenarios.
//!
//! Exit codes: 0 success, 2 infeasible problem, 3 solver/backend failure,
//! 4 input error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use scrmpc::conic::ClarabelBackend;
use scrmpc::emit;
use scrmpc::scenario::{bench_table, Scenario};
use scrmpc::scr::{
    certify_margin, monte_carlo_verify, receding_horizon_run, scr_solve, DisturbanceSource, MarginMode, ScrError,
};

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_INPUT: u8 = 4;

#[derive(Parser)]
#[command(name = "scr-mpc", version, about = "Robust MPC by sequential convex restriction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for emitted artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the solver gap/feasibility tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the outer-loop iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Override the safety margin.
    #[arg(long)]
    eps_safe: Option<f64>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Init,
    Dyn,
    Joint,
}

impl From<Mode> for MarginMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Init => MarginMode::Init,
            Mode::Dyn => MarginMode::Dynamics,
            Mode::Joint => MarginMode::Joint,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the scenario and emit the certified plan.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Maximize the certified uncertainty margin of a nominal plan
    /// (zero controls, or a controls.csv from a previous solve).
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Controls CSV (t,u0,u1,...) to certify instead of the zero plan.
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// Closed-loop receding-horizon run.
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Total plant steps to simulate.
        #[arg(long)]
        steps: usize,
        /// Steps between re-plans.
        #[arg(long)]
        period: usize,
        /// Sample plant disturbances from the uncertainty set instead of the nominal.
        #[arg(long, default_value_t = false)]
        disturbed: bool,
    },
    /// Solve, then Monte-Carlo verify the certificate.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Horizon sweep: solve the scenario closed-loop at N ∈ {10,20,30,40}.
    BenchTable {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 120)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        period: usize,
    },
}

fn load(common: &Common) -> Result<(Scenario, scrmpc::scr::RobustProblem, scrmpc::scr::ScrOptions), String> {
    let mut scenario = Scenario::load(&common.scenario).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    let (problem, mut options) = scenario.build().map_err(|e| e.to_string())?;
    if let Some(tol) = common.tol {
        options.tolerances.feasibility = tol;
        options.tolerances.gap_abs = tol;
        options.tolerances.gap_rel = tol;
    }
    if let Some(cap) = common.max_iters {
        options.max_iterations = cap;
    }
    if let Some(eps) = common.eps_safe {
        options.eps_safe = eps;
    }
    Ok((scenario, problem, options))
}

fn read_controls_csv(path: &PathBuf, control_dim: usize, horizon: usize) -> Result<Vec<DVector<f64>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != control_dim + 1 {
            return Err(format!("{}:{}: expected {} columns", path.display(), i + 1, control_dim + 1));
        }
        let u: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse::<f64>()).collect();
        out.push(DVector::from_vec(u.map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?));
    }
    if out.len() != horizon {
        return Err(format!("{}: {} control rows for horizon {}", path.display(), out.len(), horizon));
    }
    Ok(out)
}

fn exit_for_scr_error(e: &ScrError) -> u8 {
    match e {
        ScrError::InfeasibleAtSeed(_) => EXIT_INFEASIBLE,
        ScrError::SamplesRequired | ScrError::PeriodTooShort => EXIT_INPUT,
        _ => EXIT_SOLVER,
    }
}

fn run() -> Result<(), (u8, String)> {
    let cli = Cli::parse();
    let backend = ClarabelBackend;
    match cli.command {
        Command::Solve { common } => {
            let (_, problem, options) = load(&common).map_err(|m| (EXIT_INPUT, m))?;
            let dims = problem.model.dims();
            let init_u = vec![DVector::zeros(dims.m); problem.model.horizon()];
            let cert = scr_solve(&problem, &init_u, &options, &backend).map_err(|e| (exit_for_scr_error(&e), e.to_string()))?;
            let written = emit::emit_solution(&common.out, &cert, dims.n, dims.m).map_err(|e| (EXIT_INPUT, e.to_string()))?;
            println!(
                "solved: iterations={} cost_upper={:.6} status={:?}",
                cert.iterations, cert.cost_upper, cert.status
            );
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Certify { common, mode, controls } => {
            let (_, problem, options) = load(&common).map_err(|m| (EXIT_INPUT, m))?;
            let dims = problem.model.dims();
            let horizon = problem.model.horizon();
            let u = match controls {
                Some(path) => read_controls_csv(&path, dims.m, horizon).map_err(|m| (EXIT_INPUT, m))?,
                None => vec![DVector::zeros(dims.m); horizon],
            };
            let cert = certify_margin(&problem, &u, mode.into(), &options, &backend)
                .map_err(|e| (exit_for_scr_error(&e), e.to_string()))?;
            let path = common.out.join("margin.json");
            emit::write_margin_json(&path, &cert).map_err(|e| (EXIT_INPUT, e.to_string()))?;
            println!("certified margin ({:?}): {}", cert.mode, cert.gamma);
            if !cert.diagnostic.is_empty() {
                println!("note: {}", cert.diagnostic);
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Mpc { common, steps, period, disturbed } => {
            let (scenario, problem, options) = load(&common).map_err(|m| (EXIT_INPUT, m))?;
            let dims = problem.model.dims();
            let source = if disturbed { DisturbanceSource::Sampled } else { DisturbanceSource::Nominal };
            let log = receding_horizon_run(&problem, &options, &backend, steps, period, source, scenario.seed)
                .map_err(|e| (exit_for_scr_error(&e), e.to_string()))?;
            let written = emit::write_run_log(&common.out, &log, dims.n, dims.m).map_err(|e| (EXIT_INPUT, e.to_string()))?;
            println!("closed loop: steps={} realized_cost={:.6} events={}", steps, log.realized_cost, log.events.len());
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Verify { common, samples } => {
            let (scenario, problem, options) = load(&common).map_err(|m| (EXIT_INPUT, m))?;
            let dims = problem.model.dims();
            let init_u = vec![DVector::zeros(dims.m); problem.model.horizon()];
            let cert = scr_solve(&problem, &init_u, &options, &backend).map_err(|e| (exit_for_scr_error(&e), e.to_string()))?;
            let report = monte_carlo_verify(&problem, &cert, samples, scenario.seed)
                .map_err(|e| (exit_for_scr_error(&e), e.to_string()))?;
            let mut written = emit::emit_solution(&common.out, &cert, dims.n, dims.m).map_err(|e| (EXIT_INPUT, e.to_string()))?;
            written.push(
                emit::write_verification_json(&common.out.join("verification.json"), &report)
                    .map_err(|e| (EXIT_INPUT, e.to_string()))?,
            );
            println!(
                "verification: samples={} tube_exits={} obstacle_hits={} cost_violations={} max_cost={:.6} bound={:.6}",
                report.samples, report.tube_exits, report.obstacle_hits, report.cost_violations, report.max_cost, report.cost_upper
            );
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::BenchTable { common, steps, period } => {
            let (scenario, _, _) = load(&common).map_err(|m| (EXIT_INPUT, m))?;
            let rows = bench_table(&scenario, &[10, 20, 30, 40], steps, period, &backend)
                .map_err(|e| (EXIT_SOLVER, e.to_string()))?;
            let path = common.out.join("bench_table.csv");
            emit::write_bench_table_csv(&path, &rows).map_err(|e| (EXIT_INPUT, e.to_string()))?;
            for r in &rows {
                println!(
                    "N={:<3} solver_time={:.4}s constraints={} iterations={:.1} cost={:.1}",
                    r.horizon, r.avg_solver_time_s, r.constraint_count, r.avg_scr_iterations, r.nominal_cost
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
