use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harqopt::experiment::{self, ExperimentConfig, SEED_ENV};
use harqopt::Error;

#[derive(Parser)]
#[command(name = "harqopt", version, about = "HARQ power allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one scheme at one budget; writes history.csv and model.ckpt.
    Train(Common),
    /// Train every scheme over the budget grid at fixed rho; writes sweep_power.csv.
    SweepPower(Common),
    /// Train every scheme on rho ~ U[0,1) and evaluate over the rho grid; writes sweep_rho.csv.
    SweepRho(Common),
    /// Compare asymptotic outage with Monte-Carlo; writes mc_report.csv.
    McValidate(Common),
    /// Compare trained policies with the grid-search optimum; writes oracle.csv.
    Oracle(Common),
    /// Run the built-in invariant checks.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file (a manifest from an earlier run works too).
    #[arg(long, alias = "manifest")]
    config: Option<PathBuf>,
    /// Scheme list: typei, cc, ir (comma separated).
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "pbar-dbw", allow_hyphen_values = true)]
    pbar_dbw: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "mc-trials")]
    mc_trials: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other setting, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut v = Vec::new();
        for s in &self.set {
            let (k, val) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            v.push((k.trim().to_string(), val.trim().to_string()));
        }
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k.to_string(), val));
            }
        };
        push("schemes", self.scheme.clone());
        push("seed", self.seed.map(|x| x.to_string()));
        push("pbar_dbw", self.pbar_dbw.map(|x| x.to_string()));
        push("rho", self.rho.map(|x| x.to_string()));
        push("epochs", self.epochs.map(|x| x.to_string()));
        push("mc_trials", self.mc_trials.map(|x| x.to_string()));
        push("threads", self.threads.map(|x| x.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        Ok(v)
    }

    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let env_seed = std::env::var(SEED_ENV).ok();
        ExperimentConfig::resolve(
            self.config.as_deref(),
            env_seed.as_deref(),
            &self.overrides()?,
        )
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    let common = match &cmd {
        Cmd::Train(c)
        | Cmd::SweepPower(c)
        | Cmd::SweepRho(c)
        | Cmd::McValidate(c)
        | Cmd::Oracle(c)
        | Cmd::Selftest(c) => c,
    };
    let cfg = common.resolve()?;
    let num = experiment::fmt_num;
    match cmd {
        Cmd::Train(_) => {
            let r = experiment::run_train(&cfg)?;
            let rep = &r.point.report;
            println!(
                "{} pbar={}dBW rho={} tau_s={} pout_K={} pavg_w={} feasible={} powers_w={:?}",
                r.scheme,
                cfg.link.p_bar_dbw,
                r.point.rho,
                num(rep.tau),
                num(rep.outage_k()),
                num(rep.p_avg),
                rep.feasible(),
                r.point.policy.powers()
            );
        }
        Cmd::SweepPower(_) => {
            for r in experiment::run_sweep_power(&cfg)? {
                println!(
                    "pbar={} {} tau_s={} pout_K={} pavg_w={} feasible={}",
                    r.p_bar_dbw,
                    r.scheme,
                    num(r.report.tau),
                    num(r.report.outage_k()),
                    num(r.report.p_avg),
                    r.feasible
                );
            }
        }
        Cmd::SweepRho(_) => {
            for r in experiment::run_sweep_rho(&cfg)? {
                println!(
                    "rho={} {} tau_s={} pout_K={}",
                    r.rho,
                    r.scheme,
                    num(r.report.tau),
                    num(r.report.outage_k())
                );
            }
        }
        Cmd::McValidate(_) => {
            for r in experiment::run_mc_validate(&cfg)? {
                println!(
                    "{} k={} analytic={} mc={} stderr={} ratio={} ({})",
                    r.scheme,
                    r.k,
                    num(r.analytic),
                    num(r.estimate.mean),
                    num(r.estimate.stderr),
                    num(r.ratio()),
                    r.estimator.tag()
                );
            }
        }
        Cmd::Oracle(_) => {
            let rows = experiment::run_oracle(&cfg);
            if let Ok(rows) = &rows {
                for r in rows {
                    println!(
                        "{} tau_star_s={} tau_gcn_s={} gap={} gcn_feasible={}",
                        r.scheme,
                        num(r.oracle.as_ref().map_or(f64::NAN, |o| o.tau())),
                        num(r.gcn.tau),
                        num(r.gap().unwrap_or(f64::NAN)),
                        r.gcn_audit
                    );
                }
            }
            rows?;
        }
        Cmd::Selftest(_) => {
            let checks = experiment::run_selftest(&cfg)?;
            for c in &checks {
                println!(
                    "{} {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                return Err(Error::Degenerate(format!("self-test '{}' failed", c.name)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
