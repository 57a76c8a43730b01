//! Command-line interface: run the solvers, compare them on a shared
//! scenario, and drive the revival-map and revival-maximization sweeps.

mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Solver};

#[derive(Parser)]
#[command(name = "bhdimer", version, about = "Two-mode Bose-Hubbard dimer with balanced gain and loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Tunneling rate (sets the time unit).
    #[arg(long, default_value_t = 1.0)]
    j: f64,
    /// Macroscopic interaction strength g = (N0 - 1) U.
    #[arg(long, default_value_t = 0.0)]
    g: f64,
    /// Initial particle number.
    #[arg(long, default_value_t = 100)]
    n0: u64,
    /// Loss rate at site 1 (gain is balanced against it unless
    /// --gamma-gain is given).
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long)]
    gamma_gain: Option<f64>,
    /// Initial state angle phi.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    phi: f64,
    /// Initial state angle theta.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    theta: f64,
    #[arg(long, default_value_t = 30.0)]
    t_max: f64,
    /// Number of output intervals over [0, t_max].
    #[arg(long, default_value_t = 600)]
    n_steps: usize,
    /// Trajectory count for the jump solver.
    #[arg(long, default_value_t = 500)]
    n_traj: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-mode Fock truncation (default: ceil(2.5 N0) + 10).
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solver and write a time-series CSV plus JSON metadata.
    Simulate {
        #[arg(long)]
        solver: Option<Solver>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output CSV path (metadata goes to the same stem with .json).
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Load the run configuration from a TOML file instead of flags.
        #[arg(long, conflicts_with_all = ["solver", "output"])]
        config: Option<PathBuf>,
        /// Write the effective configuration to this TOML file and exit.
        #[arg(long)]
        dump_config: Option<PathBuf>,
    },
    /// Run several solvers on one scenario and emit aligned columns with
    /// a deviation summary.
    Compare {
        /// Comma-separated solver list, e.g. bbr,jump.
        #[arg(long, value_delimiter = ',', required = true)]
        solvers: Vec<Solver>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Strongest-revival map over a grid of initial states.
    RevivalMap {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Grid resolution per angle.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long, short)]
        output: PathBuf,
        /// Resume from the checkpoint file if present.
        #[arg(long)]
        resume: bool,
    },
    /// Maximize the revival strength over the initial state, optionally
    /// sweeping gamma or g (format a:b:n).
    Maximize {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        gamma_sweep: Option<String>,
        #[arg(long)]
        g_sweep: Option<String>,
        #[arg(long, default_value_t = 6)]
        multistart: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn init_workers() {
    if let Ok(val) = std::env::var("BHDIMER_THREADS") {
        if let Ok(n) = val.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            solver,
            scenario,
            output,
            config,
            dump_config,
        } => runs::simulate(solver, scenario, output, config, dump_config),
        Command::Compare {
            solvers,
            scenario,
            output,
        } => runs::compare(&solvers, scenario, output),
        Command::RevivalMap {
            scenario,
            grid,
            output,
            resume,
        } => runs::revival_map(scenario, grid, output, resume),
        Command::Maximize {
            scenario,
            gamma_sweep,
            g_sweep,
            multistart,
            output,
        } => runs::maximize(scenario, gamma_sweep, g_sweep, multistart, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(runs::exit_code(&e))
        }
    }
}

impl ScenarioArgs {
    fn to_config(&self, solver: Solver, output: PathBuf) -> RunConfig {
        RunConfig {
            solver,
            j: self.j,
            g: self.g,
            n0: self.n0,
            gamma: self.gamma,
            gamma_gain: self.gamma_gain,
            phi: self.phi,
            theta: self.theta,
            t_max: self.t_max,
            n_steps: self.n_steps,
            n_traj: self.n_traj,
            seed: self.seed,
            n_max: self.n_max,
            output,
        }
    }
}
