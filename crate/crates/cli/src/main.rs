use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sim_isac::experiments::{
    beampattern_artifacts, channel_artifacts, comm_only, grad_check, propagation_artifacts, run_convergence,
    run_sweep, sweep_csv, sweep_realizations_csv, trace_csv, write_artifact, FinalState, GradCheckSpec,
    Scenario, SweepSpec, SweepVariable,
};
use sim_isac::{Error, ScenarioConfig};

#[derive(Parser)]
#[command(name = "sim-isac", version, about = "Stacked-metasurface ISAC simulator and optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `rng_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> sim_isac::Result<(ScenarioConfig, u64)> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.rng_seed = seed;
        }
        cfg.validate()?;
        let seed = cfg.rng_seed;
        Ok((cfg, seed))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variable {
    /// Number of layers `Q`.
    Layers,
    /// Gain threshold in dBi.
    Gamma,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one channel realization; writes the trace and final state.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        realization: u64,
        /// Disable the sensing penalty.
        #[arg(long)]
        comm_only: bool,
    },
    /// Per-iteration objective curves for several layer counts and seeds.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,7")]
        layers: Vec<usize>,
        /// Seeds `seed, seed + 1, ...`.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Mean spectral efficiency over channel realizations per sweep value.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variable: Variable,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        n_ch: usize,
        #[arg(long)]
        comm_only: bool,
    },
    /// Beampattern grid and cuts of a saved state.
    Beampattern {
        #[command(flatten)]
        common: Common,
        /// Final-state JSON written by `run`.
        #[arg(long)]
        state: PathBuf,
        /// Also optimize and plot the penalty-free baseline on the same channel.
        #[arg(long)]
        comm_only: bool,
        #[arg(long, default_value_t = 0)]
        realization: u64,
        /// Grid spacing in degrees for both angles.
        #[arg(long, default_value_t = 1.0)]
        step_deg: f64,
    },
    /// Compare closed-form gradients with finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Meta-atoms per layer, split into the most square grid.
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        q: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        rel_tol: f64,
        #[arg(long, default_value_t = 1e-10)]
        abs_floor: f64,
    },
    /// Write `W_1` and the inter-layer matrices as CSV.
    DumpPropagation {
        #[command(flatten)]
        common: Common,
    },
    /// Write one channel realization, the correlation matrix and path losses.
    DumpChannel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        realization: u64,
    },
}

enum Failure {
    Invalid(String),
    Tolerance(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::CoincidentElements(_)
            | Error::AngleOutOfRange { .. }
            | Error::Dimension(_)
            | Error::InvalidState(_)
            | Error::Json(_)
            | Error::TomlDe(_) => Failure::Invalid(e.to_string()),
            Error::Io(_) | Error::TomlSer(_) => Failure::Other(e.to_string()),
        }
    }
}

fn write_all(dir: &Path, files: &[(String, String)]) -> Result<(), Failure> {
    for (name, contents) in files {
        write_artifact(dir.join(name), contents)?;
    }
    Ok(())
}

/// Most square `(rows, cols)` with `rows <= cols`.
fn square_split(m: usize) -> (usize, usize) {
    let mut rows = (m as f64).sqrt() as usize;
    while rows > 1 && !m.is_multiple_of(rows) {
        rows -= 1;
    }
    (rows.max(1), m / rows.max(1))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            common,
            realization,
            comm_only: baseline,
        } => {
            let (mut cfg, seed) = common.load()?;
            if baseline {
                cfg = comm_only(&cfg);
            }
            let (_, trace) = Scenario::new(&cfg)?.run(seed, realization)?;
            let state = FinalState::from_trace(&trace);
            write_all(
                &common.out_dir,
                &[
                    ("trace.csv".into(), trace_csv(&cfg, seed, &trace)),
                    ("final_state.json".into(), state.to_json()?),
                ],
            )?;
            let rep = &trace.report;
            println!(
                "iterations={} converged={} F={} R={} gain_dBi={}",
                trace.iterations,
                trace.converged,
                rep.objective,
                rep.rate,
                rep.normalized_gain_dbi()
            );
        }
        Command::Convergence { common, layers, seeds } => {
            let (cfg, seed) = common.load()?;
            let seeds: Vec<u64> = (0..seeds).map(|s| seed + s).collect();
            for curve in run_convergence(&cfg, &layers, &seeds)? {
                let mut c = cfg.clone();
                c.layers = curve.layers;
                write_artifact(common.out_dir.join(curve.file_name()), &curve.to_csv(&c))?;
            }
        }
        Command::Sweep {
            common,
            variable,
            values,
            n_ch,
            comm_only: baseline,
        } => {
            let (mut cfg, seed) = common.load()?;
            if baseline {
                cfg = comm_only(&cfg);
            }
            let variable = match variable {
                Variable::Layers => SweepVariable::Layers,
                Variable::Gamma => SweepVariable::GainThreshold,
            };
            let spec = SweepSpec {
                variable,
                values,
                n_ch,
                base: cfg,
                seed,
            };
            let rows = run_sweep(&spec)?;
            let stem = format!("sweep_{}", variable.column());
            write_all(
                &common.out_dir,
                &[
                    (format!("{stem}.csv"), sweep_csv(&spec, &rows)),
                    (format!("{stem}_realizations.csv"), sweep_realizations_csv(&spec, &rows)),
                ],
            )?;
            for r in &rows {
                println!(
                    "{}={} mean_SE={} std_SE={} satisfied={}",
                    variable.column(),
                    r.value,
                    r.mean_se,
                    r.std_se,
                    r.satisfaction_rate
                );
            }
        }
        Command::Beampattern {
            common,
            state,
            comm_only: baseline,
            realization,
            step_deg,
        } => {
            let (cfg, seed) = common.load()?;
            let state = FinalState::load(&state)?.to_state()?;
            let scenario = Scenario::new(&cfg)?;
            if state.layers() != cfg.layers || state.atoms() != cfg.atoms() || state.users() != cfg.users {
                return Err(Failure::Invalid(format!(
                    "state is {}x{} with {} users, config expects {}x{} with {}",
                    state.layers(),
                    state.atoms(),
                    state.users(),
                    cfg.layers,
                    cfg.atoms(),
                    cfg.users
                )));
            }
            write_all(
                &common.out_dir,
                &beampattern_artifacts(&cfg, &scenario.prop, &state, seed, step_deg, "")?,
            )?;
            if baseline {
                let base_cfg = comm_only(&cfg);
                let (_, trace) = Scenario::new(&base_cfg)?.run(seed, realization)?;
                write_all(
                    &common.out_dir,
                    &beampattern_artifacts(&base_cfg, &scenario.prop, &trace.state, seed, step_deg, "comm_only_")?,
                )?;
            }
        }
        Command::GradCheck {
            config,
            seed,
            m,
            q,
            k,
            trials,
            rel_tol,
            abs_floor,
        } => {
            let base = match config {
                Some(path) => ScenarioConfig::load(path)?,
                None => ScenarioConfig::default(),
            };
            if m == 0 || q == 0 || k == 0 || trials == 0 {
                return Err(Failure::Invalid("m, q, k and trials must be positive".into()));
            }
            let (atoms_x, atoms_z) = square_split(m);
            let spec = GradCheckSpec {
                atoms_x,
                atoms_z,
                layers: q,
                users: k,
                trials,
                seed,
                rel: rel_tol,
                floor: abs_floor,
            };
            let report = grad_check(&base, &spec)?;
            println!(
                "max_relative_error={:e} components={} failures={}",
                report.max_relative_error, report.components, report.failures
            );
            if !report.passed() {
                return Err(Failure::Tolerance(format!(
                    "{} of {} components outside tolerance",
                    report.failures, report.components
                )));
            }
        }
        Command::DumpPropagation { common } => {
            let (cfg, _) = common.load()?;
            let scenario = Scenario::new(&cfg)?;
            write_all(&common.out_dir, &propagation_artifacts(&cfg, &scenario.prop))?;
        }
        Command::DumpChannel { common, realization } => {
            let (cfg, seed) = common.load()?;
            let scenario = Scenario::new(&cfg)?;
            let chan = scenario.channel(seed, realization);
            write_all(&common.out_dir, &channel_artifacts(&cfg, seed, realization, &chan))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Tolerance(msg)) => {
            eprintln!("gradient check failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
