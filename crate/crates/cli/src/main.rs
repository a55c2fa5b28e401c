//! `mgflow` command-line front end.
//!
//! Exit codes: 0 success, 1 config or io error, 2 numeric failure, 3 a check
//! in the `check` battery failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgflow::harness::run::{write_file, write_sample_output, write_sweep_output};
use mgflow::harness::{check, emit_toy_panels, run_sample, run_sweep, ExperimentConfig, Overrides};
use mgflow::mlp::{train, Checkpoint};
use mgflow::{Error, ExecPolicy};

#[derive(Parser)]
#[command(name = "mgflow", version, about = "Rectified-flow sampling lab with momentum guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample endpoints and a few full trajectories.
    Sample(RunArgs),
    /// Grid sweep over (alpha, beta, omega, steps) with metrics per cell.
    Sweep(RunArgs),
    /// Train the MLP velocity net on the mixture.
    Train(RunArgs),
    /// 2D toy panels (SVG) and the quiver table.
    Toy(RunArgs),
    /// Invariant battery; exits 3 when any check fails.
    Check(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn load(&self) -> mgflow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            alpha: self.alpha,
            beta: self.beta,
            omega: self.omega,
            steps: self.steps,
            seed: self.seed,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }

    fn policy(&self) -> ExecPolicy {
        if self.sequential {
            ExecPolicy::Sequential
        } else {
            ExecPolicy::Parallel
        }
    }
}

enum Failure {
    Error(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sample(a) => {
            let cfg = a.load()?;
            let out = run_sample(&cfg, a.policy())?;
            report(&write_sample_output(&out, &cfg.out)?);
        }
        Command::Sweep(a) => {
            let cfg = a.load()?;
            let result = run_sweep(&cfg, a.policy())?;
            let failed = result.rows.iter().filter(|r| r.report.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see the error column", result.rows.len());
            }
            report(&write_sweep_output(&result, &cfg.out)?);
        }
        Command::Train(a) => {
            let cfg = a.load()?;
            let gmm = cfg.load_mixture()?;
            let trained = train(&gmm, &cfg.train)?;
            let ck = Checkpoint { config: cfg.train.clone(), params: trained.params, ema_params: trained.ema_params };
            let path = cfg.out.join("checkpoint.json");
            std::fs::create_dir_all(&cfg.out)
                .map_err(|e| Error::Io { path: cfg.out.display().to_string(), detail: e.to_string() })?;
            ck.save(&path)?;
            let loss = write_file(&cfg.out.join("loss.csv"), |w| {
                writeln!(w, "step,loss")?;
                for (i, l) in trained.loss_curve.iter().enumerate() {
                    writeln!(w, "{i},{}", mgflow::csvfmt::num(*l))?;
                }
                Ok(())
            })?;
            if let Some(last) = trained.loss_curve.last() {
                println!("final batch loss {last:.4}");
            }
            report(&[path, loss]);
        }
        Command::Toy(a) => {
            let cfg = a.load()?;
            report(&emit_toy_panels(&cfg, &cfg.out, a.policy())?);
        }
        Command::Check(a) => {
            // a config that does not parse is a config error, not a failed check
            let cfg = a.load()?;
            let result = check(&cfg, a.policy());
            print!("{}", result.render());
            let path = write_file(&cfg.out.join("check.csv"), |w| result.write_csv(w))?;
            report(&[path]);
            if !result.passed() {
                return Err(Failure::Checks);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
