//! Command-line surface.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 when a run
//! completes but a check fails (ledger audit, conservation).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use crate::audit::audit_ledger;
use crate::config::{parse_config, to_config_text, SimConfig};
use crate::io;
use crate::ledger::{read_log, PolicyKind};
use crate::model::ScalingParams;
use crate::montecarlo::{epsilon_sweep, martingale_diagnostic, run_ensemble, Capture, SweepOptions, TRAILING_WINDOW};
use crate::reference::{ode_integrate, RefParams, RefPoint};
use crate::scenarios::{build_scenario, ScenarioKind, ScenarioOverrides};

pub const THREADS_ENV: &str = "COMPLIANCE_LAB_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "compliance-lab", version, about = "Seeded compliance-pricing simulator", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the ensemble described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the reference scenarios I, II, III or IV.
    Scenario {
        #[arg(long)]
        kind: ScenarioKind,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trailing-window deviation statistics across a list of epsilons.
    Sweep {
        /// Comma-separated, e.g. 0.08,0.04,0.02
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
        #[arg(long)]
        w: f64,
        #[arg(long)]
        alpha0: f64,
        #[arg(long)]
        beta0: f64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate the reference ODE from one start point.
    Ode {
        #[arg(long)]
        beta0: f64,
        #[arg(long)]
        w: f64,
        #[arg(long)]
        qstar: f64,
        /// Start point as z1,z2
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        start: (f64, f64),
        #[arg(long = "T")]
        t_end: f64,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a ledger file against the config that produced it.
    Audit {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got '{s}'"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    Ok((num(a)?, num(b)?))
}

enum Failure {
    Invalid(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

/// Parse `argv` (including the program name), run, and return the exit status.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_INVALID
                }
            };
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(e)) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_INVALID
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(stderr, "check failed: {msg}");
            EXIT_CHECK_FAILED
        }
    }
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    parse_threads(std::env::var(THREADS_ENV).ok())
}

fn parse_threads(value: Option<String>) -> anyhow::Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) if v.trim().is_empty() => Ok(None),
        Some(v) => {
            let t: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}='{v}' is not a thread count"))?;
            if t == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(Some(t))
        }
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(command: Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Simulate { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let sim = parse_config(&text).with_context(|| format!("in {}", config.display()))?;
            run_and_write(&sim, &out, stdout)
        }
        Command::Scenario {
            kind,
            reps,
            seed,
            n,
            horizon,
            policy,
            out,
        } => {
            let overrides = ScenarioOverrides {
                n,
                horizon,
                reps,
                base_seed: seed,
                policy,
                ..Default::default()
            };
            let sim = build_scenario(kind, &overrides).context("building scenario")?;
            run_and_write(&sim, &out, stdout)
        }
        Command::Sweep {
            epsilons,
            w,
            alpha0,
            beta0,
            n,
            reps,
            seed,
            delta,
            out,
        } => {
            let scaling = ScalingParams {
                epsilon: epsilons.first().copied().unwrap_or(f64::NAN),
                w,
                alpha0,
                beta0,
            };
            for &epsilon in &epsilons {
                ScalingParams { epsilon, ..scaling }.validate().context("scaling parameters")?;
            }
            let base = SimConfig {
                n,
                base_seed: seed,
                ..SimConfig::default()
            };
            let opts = SweepOptions {
                reps,
                delta,
                threads: threads_from_env()?,
                ..SweepOptions::default()
            };
            let table = epsilon_sweep(&base, scaling, &epsilons, &opts).map_err(anyhow::Error::from)?;
            ensure_dir(&out)?;
            io::write_sweep(&table, &out.join("sweep.csv")).map_err(anyhow::Error::from)?;
            let _ = writeln!(stdout, "log-log slope of trailing MSD vs epsilon: {}", io::format_sig(table.slope));
            Ok(())
        }
        Command::Ode {
            beta0,
            w,
            qstar,
            start,
            t_end,
            dt,
            out,
        } => {
            let params = RefParams {
                w,
                beta0,
                q_star: qstar,
                epsilon: 0.0,
            };
            let finite = [beta0, w, qstar, t_end, start.0, start.1].iter().all(|v| v.is_finite());
            if !finite || w <= 0.0 || beta0 <= 0.0 || !(0.0..=1.0).contains(&qstar) || t_end < 0.0 {
                return Err(Failure::Invalid(anyhow::anyhow!(
                    "need finite inputs with w > 0, beta0 > 0, 0 <= qstar <= 1 and T >= 0"
                )));
            }
            let dt = dt.unwrap_or_else(|| params.default_dt());
            if !(dt > 0.0 && dt <= 0.01 / w) {
                return Err(Failure::Invalid(anyhow::anyhow!("dt must lie in (0, 0.01/w]")));
            }
            let traj = ode_integrate(RefPoint::new(start.0, start.1), &params, t_end, dt);
            ensure_dir(&out)?;
            io::write_trajectory(&traj, &params, &out.join("trajectory.csv")).map_err(anyhow::Error::from)?;
            let end = traj.last();
            let _ = writeln!(stdout, "z(T) = ({}, {})", io::format_sig(end.y1), io::format_sig(end.y2));
            Ok(())
        }
        Command::Audit { ledger, config } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let sim = parse_config(&text).with_context(|| format!("in {}", config.display()))?;
            let file = std::fs::File::open(&ledger).with_context(|| format!("opening {}", ledger.display()))?;
            let log = read_log(std::io::BufReader::new(file)).with_context(|| format!("in {}", ledger.display()))?;
            let report = audit_ledger(&log, &sim);
            let _ = writeln!(stdout, "{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Check(format!("{} problem(s) in {}", report.problems.len(), ledger.display())))
            }
        }
    }
}

/// Outputs: timeseries.csv, agents.csv, ledger.txt (first repetition),
/// config.txt, and diagnostics.csv when diagnostics are recorded.
fn run_and_write(sim: &SimConfig, out: &Path, stdout: &mut dyn Write) -> Result<(), Failure> {
    let capture = Capture {
        ledger: true,
        signals: false,
        window: 0,
    };
    let agg = run_ensemble(sim, &capture, threads_from_env()?).map_err(anyhow::Error::from)?;
    ensure_dir(out)?;
    let write = |r: Result<(), io::IoError>| r.map_err(anyhow::Error::from);
    write(io::write_timeseries(&agg, &out.join("timeseries.csv")))?;
    write(io::write_agents(&agg.agents, &out.join("agents.csv")))?;
    write(io::write_text(&to_config_text(sim), &out.join("config.txt")))?;
    let first = &agg.runs[0];
    if let Some(ledger) = &first.ledger {
        let path = out.join("ledger.txt");
        let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        ledger
            .write_to(std::io::BufWriter::new(file))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if sim.record_diagnostics {
        let w = sim.scaling.map_or(1.0, |s| s.w);
        if let Some(report) = martingale_diagnostic(&agg.runs, w) {
            write(io::write_diagnostics(&report, &out.join("diagnostics.csv")))?;
        }
    }
    let last = agg.mean.len() - 1;
    let from = last.saturating_sub(TRAILING_WINDOW as usize);
    let _ = writeln!(
        stdout,
        "scenario {} reps {} : mean compliance over k in [{from}, {last}] = {}",
        sim.scenario,
        agg.reps,
        io::format_sig(agg.mean_compliance_between(from, last))
    );
    if let Some(bad) = agg.runs.iter().position(|r| !r.conserved_every_step) {
        return Err(Failure::Check(format!("token conservation violated in repetition {bad}")));
    }
    Ok(())
}
