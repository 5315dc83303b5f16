use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use koopman_core::closedloop::ControllerKind;
use koopman_core::config::{describe_keys, RunConfig};
use koopman_core::pipeline::{self, OpenLoopOutcome};
use koopman_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_ASSERT: u8 = 4;

#[derive(Parser)]
#[command(name = "koopman", version, about = "Koopman model reduction and MPC of a distillation column")]
#[command(after_long_help = describe_keys())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides io.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    KoopmanNmpc,
    KoopmanLmpc,
    IdealNmpc,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::KoopmanNmpc => ControllerKind::KoopmanNmpc,
            ControllerArg::KoopmanLmpc => ControllerKind::KoopmanLmpc,
            ControllerArg::IdealNmpc => ControllerKind::IdealNmpc,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant under random input steps and store training windows.
    #[command(after_long_help = describe_keys())]
    Sample(Common),
    /// Train a model on the stored dataset.
    #[command(after_long_help = describe_keys())]
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Open-loop step test of a trained model against the plant.
    #[command(after_long_help = describe_keys())]
    EvalOpenloop {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 when an accuracy requirement is missed.
        #[arg(long)]
        assert: bool,
    },
    /// Closed-loop run of the configured scenario.
    #[command(after_long_help = describe_keys())]
    RunMpc(Common),
    /// Compare controller solve times on the configured scenario.
    #[command(after_long_help = describe_keys())]
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Controllers to run, in order; default all available.
        #[arg(long = "controller", value_enum)]
        controllers: Vec<ControllerArg>,
    },
}

enum Failure {
    Core(Error),
    Other(anyhow::Error),
    Assert(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().or_else(|| cfg.io.out_dir.clone()).unwrap_or_else(|| PathBuf::from("run"));
    cfg.io.out_dir = Some(out.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create run directory {}", out.display()))?;
    Ok((cfg, out))
}

fn print_openloop(outcome: &OpenLoopOutcome) {
    let show = |label: &str, r: &koopman_core::closedloop::OpenLoopReport| {
        for c in &r.outputs {
            println!(
                "{label:<8} {:<12} rel. RMSE {:>8.4} %   final offset {:>8.4} % of range",
                c.name,
                100.0 * c.relative_rmse,
                100.0 * c.final_offset_relative
            );
        }
        if let Some(off) = OpenLoopOutcome::impurity_offset(r) {
            println!("{label:<8} impurity final offset {off:.3e}");
        }
    };
    show("model", &outcome.model);
    if let Some(lin) = &outcome.linear {
        show("linear", lin);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sample(common) => {
            let (cfg, out) = resolve(&common)?;
            let ds = pipeline::sample(&cfg, &out)?;
            let s = pipeline::DatasetSummary::of(&ds);
            println!("{} training windows, {} validation windows ({} steady)", s.train_windows, s.validation_windows, s.steady_windows);
            for c in &s.channels {
                println!("  {:<14} [{:.6}, {:.6}]", c.name, c.min, c.max);
            }
        }
        Command::Train { common, resume } => {
            let (cfg, out) = resolve(&common)?;
            let (_, report) = pipeline::train_model(&cfg, &out, resume.as_deref())?;
            println!("best validation loss {:.6e} at epoch {}", report.best_val_loss, report.best_epoch);
            println!("wrote {}", out.join("best.ckpt").display());
        }
        Command::EvalOpenloop { common, assert } => {
            let (cfg, out) = resolve(&common)?;
            let outcome = pipeline::eval_openloop(&cfg, &out)?;
            print_openloop(&outcome);
            let failures = outcome.failures();
            if assert && !failures.is_empty() {
                return Err(Failure::Assert(failures));
            }
        }
        Command::RunMpc(common) => {
            let (cfg, out) = resolve(&common)?;
            let (_, s) = pipeline::run_mpc(&cfg, &out)?;
            for p in &s.plateaus {
                println!("t {:>6.1}..{:>6.1}  setpoint {:.5}  value {:.5}  error {:.4} %", p.start, p.end, p.setpoint, p.value, 100.0 * p.relative_error);
            }
            println!(
                "{}: input violations {}, bound violation integral {:.3e}, mean solve {:.3} ms",
                s.controller, s.input_violations, s.violation_integral, s.mean_solve_ms
            );
        }
        Command::Benchmark { common, controllers } => {
            let (cfg, out) = resolve(&common)?;
            let kinds: Vec<ControllerKind> = controllers.into_iter().map(Into::into).collect();
            pipeline::benchmark(&cfg, &out, &kinds)?;
            print!("{}", std::fs::read_to_string(out.join("benchmark.txt")).context("benchmark table")?);
        }
    }
    Ok(())
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Core(e) if e.is_config() => EXIT_CONFIG,
        Failure::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
        Failure::Assert(_) => EXIT_ASSERT,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(f) => {
            match &f {
                Failure::Core(e) => error!("{e}"),
                Failure::Other(e) => error!("{e:#}"),
                Failure::Assert(msgs) => {
                    for m in msgs {
                        error!("requirement missed: {m}");
                    }
                }
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
