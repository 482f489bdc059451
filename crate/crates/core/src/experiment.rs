//! Experiment configuration, runners and CSV output.
//!
//! Configuration is a flat `key = value` text file. Values are resolved in
//! the order defaults, config file, `HARQOPT_SEED`, explicit overrides, and
//! every run writes the resolved set to `manifest.txt` so it can be replayed.

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analytics::{
    correlation_factor, dbw_to_watts, evaluate, g_function, ChannelParams, LinkConfig,
    PerformanceReport, PowerPolicy, Scheme,
};
use crate::autodiff::finite_diff_check;
use crate::error::{Error, Result};
use crate::gcn::{self, Checkpoint, LayerSpec};
use crate::graph::Normalization;
use crate::mc::{self, McConfig, ValidationRow};
use crate::oracle::{self, AuditTolerance, GridSpec, OracleResult};
use crate::trainer::{self, LatencyUnit, Multipliers, RhoDistribution, TrainConfig, TrainState};

pub const SEED_ENV: &str = "HARQOPT_SEED";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SWEEP_POWER_FILE: &str = "sweep_power.csv";
pub const SWEEP_RHO_FILE: &str = "sweep_rho.csv";
pub const MC_REPORT_FILE: &str = "mc_report.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const SELFTEST_FILE: &str = "selftest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    SweepPower,
    SweepRho,
    McValidate,
    Oracle,
    Selftest,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::SweepPower,
        Command::SweepRho,
        Command::McValidate,
        Command::Oracle,
        Command::Selftest,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::SweepPower => "sweep-power",
            Command::SweepRho => "sweep-rho",
            Command::McValidate => "mc-validate",
            Command::Oracle => "oracle",
            Command::Selftest => "selftest",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.tag() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

/// Resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub k: usize,
    pub delta: u32,
    /// Per-round channel powers; `None` means ξ_k² = 1 for every round.
    pub xi_sq: Option<Vec<f64>>,
    /// Correlation used by fixed-ρ runs (sweep-power, oracle, mc-validate).
    pub rho: f64,
    pub link: LinkConfig,
    /// Training hyperparameters. Seed and thread count come from the fields
    /// below.
    pub train: TrainConfig,
    pub schemes: Vec<Scheme>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub pbar_grid_dbw: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub mc_trials: u64,
    pub mc_power_dbw: f64,
    pub grid_points: usize,
    pub audit: AuditTolerance,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 3,
            delta: 1,
            xi_sq: None,
            rho: 0.5,
            link: LinkConfig::default(),
            train: TrainConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            pbar_grid_dbw: (12..=18).map(f64::from).collect(),
            rho_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98],
            mc_trials: 10_000_000,
            mc_power_dbw: 30.0,
            grid_points: 40,
            audit: AuditTolerance::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key.trim() {
            "k" => self.k = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "xi_sq" => self.xi_sq = Some(parse_list(key, value)?),
            "rho" => {
                self.rho = parse(key, value)?;
                if let RhoDistribution::Fixed(_) = t.rho_distribution {
                    t.rho_distribution = RhoDistribution::Fixed(self.rho);
                }
            }
            "rate" => self.link.rate = parse(key, value)?,
            "payload_bits" => self.link.payload_bits = parse(key, value)?,
            "bandwidth" => self.link.bandwidth = parse(key, value)?,
            "epsilon" => self.link.epsilon = parse(key, value)?,
            "pbar_dbw" => self.link.p_bar_dbw = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "dataset_size" => t.dataset_size = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_weights" => t.lr_weights = parse(key, value)?,
            "lr_lambda" => t.lr_lambda = parse(key, value)?,
            "lr_upsilon" => t.lr_upsilon = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps_hat" => t.eps_hat = parse(key, value)?,
            "lambda0" => t.lambda0 = parse(key, value)?,
            "upsilon0" => t.upsilon0 = parse(key, value)?,
            "guard_factor" => t.guard_factor = parse(key, value)?,
            "freeze_duals" => t.freeze_duals = parse_bool(key, value)?,
            "latency_unit" => {
                t.latency_unit = match value.trim() {
                    "s" => LatencyUnit::Seconds,
                    "ms" => LatencyUnit::Milliseconds,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected s or ms, got '{value}'"
                        )))
                    }
                }
            }
            "rho_distribution" => {
                t.rho_distribution = match value.trim() {
                    "uniform" => RhoDistribution::Uniform,
                    "fixed" => RhoDistribution::Fixed(self.rho),
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected uniform or fixed, got '{value}'"
                        )))
                    }
                }
            }
            "layer_dims" => t.layer_spec = LayerSpec::relu_stack(parse_list(key, value)?),
            "normalization" => t.normalization = parse(key, value)?,
            "schemes" | "scheme" => self.schemes = parse_list(key, value)?,
            "out" => self.out_dir = PathBuf::from(value.trim()),
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "pbar_grid_dbw" => self.pbar_grid_dbw = parse_list(key, value)?,
            "rho_grid" => self.rho_grid = parse_list(key, value)?,
            "mc_trials" => self.mc_trials = parse(key, value)?,
            "mc_power_dbw" => self.mc_power_dbw = parse(key, value)?,
            "grid_points" => self.grid_points = parse(key, value)?,
            "audit_outage_factor" => self.audit.outage_factor = parse(key, value)?,
            "audit_power_factor" => self.audit.power_factor = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Apply every setting of a config text. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Defaults, then the config file, then the seed variable, then the
    /// overrides, then validation.
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        if let Some(s) = env_seed {
            cfg.set("seed", s)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting in a stable order, with values that parse back to the
    /// same config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let dist = match t.rho_distribution {
            RhoDistribution::Uniform => "uniform",
            RhoDistribution::Fixed(_) => "fixed",
        };
        let mut v = vec![("k", self.k.to_string()), ("delta", self.delta.to_string())];
        if let Some(xi) = &self.xi_sq {
            v.push(("xi_sq", join(xi)));
        }
        v.extend([
            ("rho", self.rho.to_string()),
            ("rate", self.link.rate.to_string()),
            ("payload_bits", self.link.payload_bits.to_string()),
            ("bandwidth", self.link.bandwidth.to_string()),
            ("epsilon", self.link.epsilon.to_string()),
            ("pbar_dbw", self.link.p_bar_dbw.to_string()),
            ("epochs", t.epochs.to_string()),
            ("dataset_size", t.dataset_size.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_weights", t.lr_weights.to_string()),
            ("lr_lambda", t.lr_lambda.to_string()),
            ("lr_upsilon", t.lr_upsilon.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps_hat", t.eps_hat.to_string()),
            ("lambda0", t.lambda0.to_string()),
            ("upsilon0", t.upsilon0.to_string()),
            ("guard_factor", t.guard_factor.to_string()),
            ("freeze_duals", t.freeze_duals.to_string()),
            (
                "latency_unit",
                match t.latency_unit {
                    LatencyUnit::Seconds => "s",
                    LatencyUnit::Milliseconds => "ms",
                }
                .to_string(),
            ),
            ("rho_distribution", dist.to_string()),
            ("layer_dims", join(&t.layer_spec.dims)),
            ("normalization", t.normalization.to_string()),
            ("schemes", join(&self.schemes)),
            ("out", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("pbar_grid_dbw", join(&self.pbar_grid_dbw)),
            ("rho_grid", join(&self.rho_grid)),
            ("mc_trials", self.mc_trials.to_string()),
            ("mc_power_dbw", self.mc_power_dbw.to_string()),
            ("grid_points", self.grid_points.to_string()),
            ("audit_outage_factor", self.audit.outage_factor.to_string()),
            ("audit_power_factor", self.audit.power_factor.to_string()),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Channel template with the configured K, δ and ξ² at ρ = `rho`.
    pub fn channel(&self, rho: f64) -> Result<ChannelParams> {
        let xi = self.xi_sq.clone().unwrap_or_else(|| vec![1.0; self.k]);
        if xi.len() != self.k {
            return Err(Error::Config(format!(
                "xi_sq has {} entries but k = {}",
                xi.len(),
                self.k
            )));
        }
        ChannelParams::new(rho, self.delta, xi)
            .map_err(|e| Error::Config(format!("channel parameters: {e}")))
    }

    /// Training settings with the run seed and thread count applied.
    pub fn train_config(&self, distribution: RhoDistribution) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            rho_distribution: distribution,
            ..self.train.clone()
        }
    }

    pub fn link_at(&self, p_bar_dbw: f64) -> LinkConfig {
        self.link.clone().with_budget(p_bar_dbw)
    }

    pub fn workers(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.channel(self.rho)?;
        self.link.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        if self.pbar_grid_dbw.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("power grid entries must be finite".into()));
        }
        if self.rho_grid.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("rho grid entries must lie in [0, 1)".into()));
        }
        if self.mc_trials == 0 {
            return Err(Error::Config("mc_trials must be positive".into()));
        }
        if !self.mc_power_dbw.is_finite() {
            return Err(Error::Config("mc_power_dbw must be finite".into()));
        }
        GridSpec::around_budget(self.grid_points, self.link.p_bar_dbw).map_err(cfg)?;
        if !(self.audit.outage_factor >= 1.0 && self.audit.power_factor >= 1.0) {
            return Err(Error::Config("audit factors must be at least 1".into()));
        }
        Ok(())
    }

    /// The single scheme a `train` run uses.
    pub fn single_scheme(&self) -> Result<Scheme> {
        match self.schemes.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::Config(format!(
                "this command takes exactly one scheme, got {}",
                join(&self.schemes)
            ))),
        }
    }
}

/// Fixed scientific format, six significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.5e}")
}

struct Csv {
    out: BufWriter<File>,
}

impl Csv {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn prepare_dir(cfg: &ExperimentConfig, command: Command) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut f = BufWriter::new(File::create(cfg.out_dir.join(MANIFEST_FILE))?);
    writeln!(f, "# harqopt {}", command.tag())?;
    f.write_all(cfg.to_text().as_bytes())?;
    f.flush()?;
    Ok(())
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn bool_field(b: bool) -> String {
    b.to_string()
}

pub fn write_history(path: &Path, state: &TrainState) -> Result<()> {
    let mut csv = Csv::create(
        path,
        &[
            "iter",
            "mean_tau_s",
            "mean_log_pout",
            "mean_pavg_w",
            "lambda",
            "upsilon",
        ],
    )?;
    for r in &state.history {
        csv.row(&[
            r.iter.to_string(),
            fmt_num(r.mean_tau_s),
            fmt_num(r.mean_log_pout),
            fmt_num(r.mean_pavg_w),
            fmt_num(r.lambda),
            fmt_num(r.upsilon),
        ])?;
    }
    csv.finish()
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub scheme: Scheme,
    pub state: TrainState,
    /// Trained policy at the configured ρ.
    pub point: trainer::PolicyPoint,
}

/// Train one scheme at the configured budget. Writes the history, the
/// checkpoint and the manifest.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    let scheme = cfg.single_scheme()?;
    prepare_dir(cfg, Command::Train)?;
    let template = cfg.channel(cfg.rho)?;
    let state = trainer::train(
        scheme,
        &template,
        &cfg.link,
        &cfg.train_config(cfg.train.rho_distribution),
    )?;
    write_history(&cfg.out_dir.join(HISTORY_FILE), &state)?;
    state.checkpoint().save(cfg.out_dir.join(CHECKPOINT_FILE))?;
    let point = trainer::evaluate_policy(&state, &template, &[cfg.rho], scheme, &cfg.link)?
        .pop()
        .expect("one point requested");
    Ok(TrainRun {
        scheme,
        state,
        point,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPowerRow {
    pub p_bar_dbw: f64,
    pub scheme: Scheme,
    pub policy: PowerPolicy,
    pub report: PerformanceReport,
    /// Passes the audit tolerances.
    pub feasible: bool,
}

/// One fixed-ρ training per (budget, scheme), evaluated at that ρ.
pub fn run_sweep_power(cfg: &ExperimentConfig) -> Result<Vec<SweepPowerRow>> {
    prepare_dir(cfg, Command::SweepPower)?;
    let template = cfg.channel(cfg.rho)?;
    let tc = cfg.train_config(RhoDistribution::Fixed(cfg.rho));
    let mut rows = Vec::new();
    for &pb in &cfg.pbar_grid_dbw {
        let link = cfg.link_at(pb);
        for &scheme in &cfg.schemes {
            let state = trainer::train(scheme, &template, &link, &tc)?;
            let p = trainer::evaluate_policy(&state, &template, &[cfg.rho], scheme, &link)?
                .pop()
                .expect("one point requested");
            let feasible = oracle::audit(&p.report, &link, cfg.audit);
            rows.push(SweepPowerRow {
                p_bar_dbw: pb,
                scheme,
                policy: p.policy,
                report: p.report,
                feasible,
            });
        }
    }
    let mut csv = Csv::create(
        &cfg.out_dir.join(SWEEP_POWER_FILE),
        &[
            "pbar_dbw", "scheme", "tau_s", "pout_K", "pavg_w", "feasible",
        ],
    )?;
    for r in &rows {
        csv.row(&[
            fmt_num(r.p_bar_dbw),
            r.scheme.tag().into(),
            fmt_num(r.report.tau),
            fmt_num(r.report.outage_k()),
            fmt_num(r.report.p_avg),
            bool_field(r.feasible),
        ])?;
    }
    csv.finish()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRhoRow {
    pub rho: f64,
    pub scheme: Scheme,
    pub policy: PowerPolicy,
    pub report: PerformanceReport,
}

/// One training per scheme on ρ ~ U[0, 1), evaluated over the ρ grid.
pub fn run_sweep_rho(cfg: &ExperimentConfig) -> Result<Vec<SweepRhoRow>> {
    prepare_dir(cfg, Command::SweepRho)?;
    let template = cfg.channel(0.0)?;
    let tc = cfg.train_config(RhoDistribution::Uniform);
    let mut rows = Vec::new();
    for &scheme in &cfg.schemes {
        let state = trainer::train(scheme, &template, &cfg.link, &tc)?;
        for p in trainer::evaluate_policy(&state, &template, &cfg.rho_grid, scheme, &cfg.link)? {
            rows.push(SweepRhoRow {
                rho: p.rho,
                scheme,
                policy: p.policy,
                report: p.report,
            });
        }
    }
    let mut csv = Csv::create(
        &cfg.out_dir.join(SWEEP_RHO_FILE),
        &["rho", "scheme", "tau_s", "pout_K"],
    )?;
    for r in &rows {
        csv.row(&[
            fmt_num(r.rho),
            r.scheme.tag().into(),
            fmt_num(r.report.tau),
            fmt_num(r.report.outage_k()),
        ])?;
    }
    csv.finish()?;
    Ok(rows)
}

/// Asymptotic versus simulated outage at uniform per-round power
/// `mc_power_dbw` and the configured ρ.
pub fn run_mc_validate(cfg: &ExperimentConfig) -> Result<Vec<ValidationRow>> {
    prepare_dir(cfg, Command::McValidate)?;
    let params = cfg.channel(cfg.rho)?;
    let policy = PowerPolicy::uniform(cfg.k, dbw_to_watts(cfg.mc_power_dbw))?;
    let mc = McConfig::new(cfg.mc_trials, cfg.seed).with_workers(cfg.workers());
    let rows = mc::validation_report(&cfg.schemes, &params, &policy, cfg.link.rate, &mc)?;
    let mut csv = Csv::create(
        &cfg.out_dir.join(MC_REPORT_FILE),
        &["scheme", "k", "analytic", "mc_mean", "mc_stderr", "ratio"],
    )?;
    for r in &rows {
        csv.row(&[
            r.scheme.tag().into(),
            r.k.to_string(),
            fmt_num(r.analytic),
            fmt_num(r.estimate.mean),
            fmt_num(r.estimate.stderr),
            fmt_num(r.ratio()),
        ])?;
    }
    csv.finish()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub scheme: Scheme,
    /// `None` when no grid point is feasible.
    pub oracle: Option<OracleResult>,
    pub gcn_policy: PowerPolicy,
    pub gcn: PerformanceReport,
    pub gcn_audit: bool,
}

impl OracleRow {
    /// τ_GCN / τ* − 1.
    pub fn gap(&self) -> Option<f64> {
        self.oracle.as_ref().map(|o| self.gcn.tau / o.tau() - 1.0)
    }
}

/// Grid-search optimum versus a fixed-ρ trained policy for each scheme. The
/// CSV is written even when a scheme is infeasible on the grid, and the run
/// then fails with [`Error::Infeasible`].
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<Vec<OracleRow>> {
    prepare_dir(cfg, Command::Oracle)?;
    let params = cfg.channel(cfg.rho)?;
    let grid = GridSpec::around_budget(cfg.grid_points, cfg.link.p_bar_dbw)?;
    let tc = cfg.train_config(RhoDistribution::Fixed(cfg.rho));
    let mut rows = Vec::new();
    for &scheme in &cfg.schemes {
        let found = with_pool(cfg.threads, || {
            oracle::grid_search(scheme, &params, &cfg.link, &grid)
        })?;
        let found = match found {
            Ok(r) => Some(r),
            Err(Error::Infeasible) => None,
            Err(e) => return Err(e),
        };
        let state = trainer::train(scheme, &params, &cfg.link, &tc)?;
        let p = trainer::evaluate_policy(&state, &params, &[cfg.rho], scheme, &cfg.link)?
            .pop()
            .expect("one point requested");
        rows.push(OracleRow {
            scheme,
            oracle: found,
            gcn_audit: oracle::audit(&p.report, &cfg.link, cfg.audit),
            gcn_policy: p.policy,
            gcn: p.report,
        });
    }
    let mut csv = Csv::create(
        &cfg.out_dir.join(ORACLE_FILE),
        &[
            "scheme",
            "tau_star_s",
            "pout_star",
            "pavg_star_w",
            "tau_gcn_s",
            "pout_gcn",
            "pavg_gcn_w",
            "gap",
            "gcn_feasible",
        ],
    )?;
    for r in &rows {
        let (t, p, a) = r
            .oracle
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |o| {
                (o.tau(), o.report.outage_k(), o.report.p_avg)
            });
        csv.row(&[
            r.scheme.tag().into(),
            fmt_num(t),
            fmt_num(p),
            fmt_num(a),
            fmt_num(r.gcn.tau),
            fmt_num(r.gcn.outage_k()),
            fmt_num(r.gcn.p_avg),
            fmt_num(r.gap().unwrap_or(f64::NAN)),
            bool_field(r.gcn_audit),
        ])?;
    }
    csv.finish()?;
    if rows.iter().any(|r| r.oracle.is_none()) {
        return Err(Error::Infeasible);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck {
        name,
        passed,
        detail,
    }
}

/// Quick invariant suite over the closed forms, gradients, Monte-Carlo,
/// oracle and checkpoint round trip. Independent of the config apart from
/// the seed and output directory.
pub fn run_selftest(cfg: &ExperimentConfig) -> Result<Vec<SelfCheck>> {
    prepare_dir(cfg, Command::Selftest)?;
    let mut out = Vec::new();

    let l1 = correlation_factor(&ChannelParams::uniform(1, 0.7, 1)?, 1)?;
    let l2 = correlation_factor(&ChannelParams::uniform(2, 0.5, 1)?, 2)?;
    let l0 = correlation_factor(&ChannelParams::uniform(4, 0.0, 1)?, 4)?;
    out.push(check(
        "correlation_factor",
        l1 == 1.0 && l0 == 1.0 && l2 == 0.984375,
        format!("l(0.7,1)={l1} l(0,4)={l0} l(0.5,2)={l2}"),
    ));
    let g3 = g_function(2.0, 3);
    out.push(check(
        "g_function",
        g_function(2.0, 1) == 3.0 && g_function(0.0, 3) == 0.0 && (g3 - 1.29844).abs() <= 1e-5,
        format!("G_3(2)={g3:.7}"),
    ));

    let params = ChannelParams::uniform(3, 0.5, 1)?;
    let link = LinkConfig::default();
    let pol = PowerPolicy::new(vec![29.5, 17.5, 15.2])?;
    let outs: Vec<f64> = Scheme::ALL
        .iter()
        .map(|s| evaluate(*s, &params, &pol, &link).map(|r| r.outage_k()))
        .collect::<Result<_>>()?;
    out.push(check(
        "scheme_ordering",
        outs[2] <= outs[1] && outs[1] <= outs[0],
        format!(
            "typei={:.3e} cc={:.3e} ir={:.3e}",
            outs[0], outs[1], outs[2]
        ),
    ));

    let w = gcn::init_weights(&LayerSpec::default(), cfg.seed)?;
    let duals = Multipliers {
        lambda: 0.3,
        upsilon: 0.2,
    };
    let (mut g, _, nodes) = trainer::build_policy_lagrangian(
        &w,
        Normalization::Causal,
        Scheme::IncrementalRedundancy,
        &params,
        &link,
        duals,
        LatencyUnit::Milliseconds,
    )?;
    let fd = finite_diff_check(&mut g, nodes.root, 1e-4)?;
    out.push(check(
        "gradient",
        fd.max_rel_error < 1e-4,
        format!(
            "max_rel_error={:.3e} over {} weights",
            fd.max_rel_error, fd.checked
        ),
    ));

    let p = 10.0;
    let est = mc::estimate_outage(
        Scheme::TypeI,
        &ChannelParams::uniform(1, 0.0, 1)?,
        &PowerPolicy::new(vec![p])?,
        link.rate,
        1,
        &McConfig::new(200_000, cfg.seed).with_workers(cfg.workers()),
    )?;
    let exact = 1.0 - (-3.0 / p).exp();
    out.push(check(
        "monte_carlo",
        (est.mean - exact).abs() <= 4.0 * est.stderr,
        format!(
            "mc={:.5} exact={exact:.5} stderr={:.1e}",
            est.mean, est.stderr
        ),
    ));

    let coarse = oracle::grid_search(
        Scheme::IncrementalRedundancy,
        &params,
        &link,
        &GridSpec::around_budget(10, 15.0)?,
    )?;
    let fine = oracle::grid_search(
        Scheme::IncrementalRedundancy,
        &params,
        &link,
        &GridSpec::around_budget(20, 15.0)?,
    )?;
    out.push(check(
        "oracle_refinement",
        fine.tau() <= coarse.tau()
            && oracle::is_feasible(Scheme::IncrementalRedundancy, &params, &fine.policy, &link),
        format!("tau10={:.6} tau20={:.6}", coarse.tau(), fine.tau()),
    ));

    let ck = Checkpoint {
        weights: w,
        normalization: Normalization::Causal,
    };
    let path = cfg.out_dir.join("selftest.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    fs::remove_file(&path)?;
    out.push(check("checkpoint_roundtrip", back == ck, String::new()));

    let mut csv = Csv::create(
        &cfg.out_dir.join(SELFTEST_FILE),
        &["check", "passed", "detail"],
    )?;
    for c in &out {
        csv.row(&[
            c.name.into(),
            bool_field(c.passed),
            c.detail.replace(',', ";"),
        ])?;
    }
    csv.finish()?;
    Ok(out)
}
