//! `mdiqkd` command implementations.
//!
//! Exit codes: 0 success, 2 usage, 3 data or infeasibility, 4 internal.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use mdi_core::coexistence::{apply_coexistence, ChannelPlan, NoiseModel};
use mdi_core::decoy::{DecoyError, DecoyResult};
use mdi_core::fit::{
    bundled_measurements, fit_raman_slope, fit_start, fit_tables, transfer_raman, FitOptions, FitParam, FitResult,
    MeasuredTable,
};
use mdi_core::fixtures::{self, Condition, Environment};
use mdi_core::forward::full_gain_table;
use mdi_core::model::{cell_keys, Basis, ByIntensity, Intensity};
use mdi_core::pipeline::{analyze_table, key_rate, sweep_loss, sweep_power, PipelineOptions, SweepAxis, SweepReport};
use mdi_core::pulse_sim::{empirical_gain_table, estimate_cell, simulate_batch, SimError};
use mdi_core::session::{replay, run_session, SessionError};
use mdi_core::table_io::{fmt_sci, gain_table_to_string, read_partial_table, PartialTable, TableError};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Rounds => CliError::Usage(e.to_string()),
            SessionError::Model(_) | SessionError::Log { .. } => CliError::Data(e.to_string()),
            SessionError::Protocol { .. } | SessionError::Internal(_) => CliError::Internal(e.to_string()),
        }
    }
}

fn decoy_error(e: DecoyError) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "mdiqkd", version, about = "Three-node MDI-QKD simulator and decoy-state analysis")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub rounds: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic gain table of the configured scenario.
    Gains,
    /// Pulse-by-pulse Monte Carlo: per-cell counts, rates and standard errors.
    Montecarlo {
        /// Also write the empirical gain table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Decoy analysis of gain-table files (one complete table, or one file per basis).
    Decoy {
        files: Vec<PathBuf>,
        /// Bundled measured table instead of files, e.g. `lab:19db` or `lab:155uw`.
        #[arg(long)]
        bundled: Option<String>,
        /// Alice's intensities `signal,decoy,vacuum`; defaults to the config.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        mu_a: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', num_args = 3)]
        mu_b: Option<Vec<f64>>,
        /// Error-correction inefficiency.
        #[arg(long)]
        f: Option<f64>,
        /// Relative widening of every constraint interval.
        #[arg(long)]
        rel_slack: Option<f64>,
    },
    /// Forward model and decoy analysis of the configured scenario.
    Keyrate,
    /// Key rate against total loss (dB).
    SweepLoss {
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<f64>>,
    },
    /// Key rate against per-node data launch power (µW).
    SweepPower {
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<f64>>,
    },
    /// Fit scenario parameters to measured tables; writes the fitted config.
    Fit {
        /// `LOSS_DB:PATH`; repeat per file (X and Z files of one loss merge).
        #[arg(long = "table")]
        tables: Vec<String>,
        /// Exclude a cell, `LOSS_DB:BASIS:IA:IB`, e.g. `35:X:s:d`.
        #[arg(long)]
        exclude: Vec<String>,
        /// Parameters to fit, comma separated.
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<String>>,
        /// Fit a bundled table series: `lab` or `deployed`.
        #[arg(long)]
        bundled: Option<String>,
        /// Carry the Raman slope of this fitted config into a deployed fit.
        #[arg(long)]
        raman_from: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
    },
    /// Three-node protocol session; prints the final report.
    Session {
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Rebuild the report from an event log instead of running.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn emit(output: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&p.to_string_lossy())?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.rounds {
        cfg.rounds = r;
    }
    // Config files store integers as TOML i64.
    if cfg.seed > i64::MAX as u64 || cfg.rounds > i64::MAX as u64 {
        return Err(CliError::Usage("seed and rounds must fit in a signed 64-bit integer".into()));
    }
    Ok(cfg)
}

fn output_path(cli: &Cli, cfg: &RunConfig) -> Option<PathBuf> {
    cli.output.clone().or_else(|| cfg.output_path.as_ref().map(PathBuf::from))
}

fn pipeline_options(cfg: &RunConfig) -> Result<PipelineOptions, CliError> {
    Ok(PipelineOptions {
        decoy: cfg.decoy_options()?,
        auto_slack: cfg.decoy.auto_slack,
        ..PipelineOptions::default()
    })
}

fn decoy_csv(d: &DecoyResult, rel_slack: f64) -> String {
    let mut s = String::from("quantity,value\n");
    for (k, v) in [
        ("s11_z_lower", d.s11_z_lower),
        ("e11_x_upper", d.e11_x_upper),
        ("y11_z_lower", d.y11_z_lower),
        ("y11_x_lower", d.y11_x_lower),
        ("b11_x_upper", d.b11_x_upper),
        ("R", d.r),
        ("R_clamped", d.r_clamped),
        ("rel_slack", rel_slack),
    ] {
        let _ = writeln!(s, "{k},{}", fmt_sci(v));
    }
    let _ = writeln!(s, "degenerate,{}", d.degenerate);
    s
}

fn sweep_csv(rep: &SweepReport) -> String {
    let mut s = String::from("axis,R,R_clamped,noise_cps\n");
    for p in &rep.points {
        let axis = match rep.axis {
            SweepAxis::Loss => p.axis,
            SweepAxis::Power => p.axis * 1e6,
        };
        let _ = writeln!(s, "{},{},{},{}", fmt_sci(axis), fmt_sci(p.r), fmt_sci(p.r_clamped), fmt_sci(p.noise_cps));
    }
    s
}

fn parse_mu(v: &Option<Vec<f64>>, fallback: ByIntensity<f64>) -> Result<ByIntensity<f64>, CliError> {
    match v {
        None => Ok(fallback),
        Some(x) if x.len() == 3 => Ok(ByIntensity::new(x[0], x[1], x[2])),
        Some(x) => Err(CliError::Usage(format!("expected 3 intensities, got {}", x.len()))),
    }
}

/// `lab:19db`, `deployed:26db`, `lab:4.68uw`.
pub fn parse_bundled(spec: &str) -> Result<(Environment, Condition), CliError> {
    let usage = || CliError::Usage(format!("bundled table {spec:?} must look like lab:19db or lab:4.68uw"));
    let (env, cond) = spec.split_once(':').ok_or_else(usage)?;
    let env = Environment::parse(env).ok_or_else(usage)?;
    let cond = cond.to_ascii_lowercase();
    let cond = if let Some(v) = cond.strip_suffix("db") {
        Condition::LossDb(v.parse().map_err(|_| usage())?)
    } else if let Some(v) = cond.strip_suffix("uw") {
        Condition::Launch(v.parse::<f64>().map_err(|_| usage())? * 1e-6)
    } else {
        return Err(usage());
    };
    Ok((env, cond))
}

fn read_partial(path: &Path) -> Result<PartialTable, CliError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_partial_table(f).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn environment_arg(s: &str) -> Result<Environment, CliError> {
    Environment::parse(s).ok_or_else(|| CliError::Usage(format!("unknown environment {s:?}; use lab or deployed")))
}

fn parse_exclude(s: &str) -> Result<(f64, (Basis, Intensity, Intensity)), CliError> {
    let usage = || CliError::Usage(format!("exclusion {s:?} must look like 35:X:s:d"));
    let f: Vec<&str> = s.split(':').collect();
    if f.len() != 4 {
        return Err(usage());
    }
    Ok((
        f[0].parse().map_err(|_| usage())?,
        (
            Basis::parse(f[1]).ok_or_else(usage)?,
            Intensity::parse(f[2]).ok_or_else(usage)?,
            Intensity::parse(f[3]).ok_or_else(usage)?,
        ),
    ))
}

fn fit_summary(r: &FitResult) -> String {
    let mut s = String::new();
    for e in &r.estimates {
        let _ = writeln!(s, "{} = {:.6e} +- {:.2e}", e.param.name(), e.value, e.stderr);
    }
    let _ = writeln!(
        s,
        "residual_rms = {:.4}  cost = {:.4}  residuals = {}  iterations = {}  converged = {}  condition = {:.3e}",
        r.residual, r.cost, r.residual_count, r.iterations, r.converged, r.condition_number
    );
    if !r.converged {
        let _ = writeln!(s, "warning: fit stopped at the iteration limit; best point so far reported");
    }
    s
}

fn cmd_fit(cli: &Cli, cfg: &RunConfig, args: FitArgs) -> Result<(), CliError> {
    let free = match &args.free {
        None => FitParam::DEFAULT_FREE.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| FitParam::parse(n).ok_or_else(|| CliError::Usage(format!("unknown fit parameter {n:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let opts = FitOptions {
        free,
        max_iter: args.max_iter,
        ..FitOptions::default()
    };
    let popts = pipeline_options(cfg)?;
    let (start, mut data, env) = match &args.bundled {
        Some(e) => {
            let env = environment_arg(e)?;
            let start = if cli.config.is_some() { cfg.scenario()? } else { fit_start(env) };
            (start, bundled_measurements(env), Some(env))
        }
        None => (cfg.scenario()?, Vec::new(), None),
    };
    let mut by_loss: Vec<(f64, PartialTable)> = Vec::new();
    for t in &args.tables {
        let (loss, path) = t
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("table {t:?} must look like LOSS_DB:PATH")))?;
        let loss: f64 = loss.parse().map_err(|_| CliError::Usage(format!("bad loss in {t:?}")))?;
        let part = read_partial(Path::new(path))?;
        match by_loss.iter_mut().find(|(l, _)| *l == loss) {
            Some((_, p)) => *p = p.clone().merge(&part)?,
            None => by_loss.push((loss, part)),
        }
    }
    for (loss, cells) in by_loss {
        data.push(MeasuredTable {
            loss_db: loss,
            cells,
            exclude: Vec::new(),
        });
    }
    for x in &args.exclude {
        let (loss, cell) = parse_exclude(x)?;
        let t = data
            .iter_mut()
            .find(|t| t.loss_db == loss)
            .ok_or_else(|| CliError::Usage(format!("no table at {loss} dB to exclude {x:?} from")))?;
        t.exclude.push(cell);
    }
    let result = fit_tables(&start, &data, &opts).map_err(|e| match e {
        mdi_core::fit::FitError::TooFewTables { .. } | mdi_core::fit::FitError::NothingFree => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    })?;
    eprint!("{}", fit_summary(&result));

    let (noise, launch) = match env {
        Some(Environment::Lab) => {
            let rf = fit_raman_slope(
                &result.scenario,
                fixtures::LAB_REFERENCE_LAUNCH,
                &fixtures::launch_points(Environment::Lab),
                &popts,
            )
            .map_err(|e| CliError::Data(e.to_string()))?;
            eprintln!(
                "raman_slope = {:.6e} cps/W  base_dark_rate = {:.6e} cps  raman_fraction = {:.4}",
                rf.model.raman_slope, rf.model.base_dark_rate, rf.fraction
            );
            for p in &rf.points {
                eprintln!(
                    "  {:.2} uW: reported ratio {:.4e}  model ratio {:.4e}",
                    p.launch * 1e6,
                    p.reported_ratio,
                    p.model_ratio
                );
            }
            (rf.model, fixtures::LAB_REFERENCE_LAUNCH)
        }
        Some(Environment::Deployed) => {
            let launch = fixtures::DEPLOYED_REFERENCE_LAUNCH;
            let model = match &args.raman_from {
                Some(p) => {
                    let lab = RunConfig::load(&p.to_string_lossy())?;
                    transfer_raman(&lab.noise_model()?, &lab.scenario()?, &result.scenario, launch)
                }
                None => NoiseModel::anchored(&result.scenario, launch, 0.0),
            };
            (model, launch)
        }
        None => {
            let launch = cfg.launch_power()?;
            let slope = cfg.noise_model()?.raman_slope;
            (NoiseModel::anchored(&result.scenario, launch, slope), launch)
        }
    };
    let mut out = RunConfig::from_parts(&result.scenario, &noise, &ChannelPlan::lab_default(launch));
    out.seed = cfg.seed;
    out.rounds = cfg.rounds;
    out.decoy = cfg.decoy.clone();
    out.session = cfg.session.clone();
    emit(&cli.output, &out.to_toml())
}

struct FitArgs {
    free: Option<Vec<String>>,
    bundled: Option<String>,
    raman_from: Option<PathBuf>,
    tables: Vec<String>,
    exclude: Vec<String>,
    max_iter: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let out = output_path(&cli, &cfg);
    let popts = pipeline_options(&cfg)?;
    match &cli.command {
        Command::Gains => {
            let t = full_gain_table(&cfg.scenario()?).map_err(|e| CliError::Data(e.to_string()))?;
            emit(&out, &gain_table_to_string(&t))
        }
        Command::Montecarlo { table } => {
            let summary = simulate_batch(&cfg.scenario()?, cfg.rounds, cfg.seed).map_err(|e| match e {
                SimError::Rounds(_) => CliError::Usage(e.to_string()),
                SimError::Model(_) => CliError::Data(e.to_string()),
            })?;
            let mut s = String::from("basis,mu_a,mu_b,sent,psi_minus,errors,Q,Q_stderr,E,flag\n");
            for (b, ia, ib) in cell_keys() {
                let c = summary.cell(b, ia, ib);
                let (cell, se, issue) = estimate_cell(c);
                let flag = match issue {
                    None => "",
                    Some(mdi_core::pulse_sim::CellIssue::NothingSent) => "nothing_sent",
                    Some(mdi_core::pulse_sim::CellIssue::NoHerald) => "no_herald",
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    b.label(),
                    ia.label(),
                    ib.label(),
                    c.sent,
                    c.psi_minus,
                    c.errors,
                    fmt_sci(cell.q),
                    fmt_sci(se),
                    fmt_sci(cell.e),
                    flag
                );
            }
            if let Some(p) = table {
                let t = empirical_gain_table(&summary);
                std::fs::write(p, gain_table_to_string(&t.table)).map_err(|e| io_err(p, e))?;
            }
            emit(&out, &s)
        }
        Command::Decoy {
            files,
            bundled,
            mu_a,
            mu_b,
            f,
            rel_slack,
        } => {
            let table = match (bundled, files.is_empty()) {
                (Some(spec), true) => {
                    let (env, cond) = parse_bundled(spec)?;
                    fixtures::combined(env, cond)?.0
                }
                (None, false) => {
                    let mut p = PartialTable::default();
                    for path in files {
                        p = p.merge(&read_partial(path)?)?;
                    }
                    p.complete()?
                }
                (Some(_), false) => return Err(CliError::Usage("give either table files or --bundled, not both".into())),
                (None, true) => return Err(CliError::Usage("no gain table given".into())),
            };
            let scenario = cfg.scenario()?;
            let mu_a = parse_mu(mu_a, scenario.alice.mu)?;
            let mu_b = parse_mu(mu_b, scenario.bob.mu)?;
            let mut opts = popts;
            if let Some(f) = f {
                opts.decoy.f = *f;
            }
            if let Some(e) = rel_slack {
                opts.decoy.rel_slack = *e;
            }
            // An explicit table is analysed as given.
            opts.auto_slack = false;
            let (d, eps) = analyze_table(&table, &mu_a, &mu_b, &opts).map_err(decoy_error)?;
            emit(&out, &decoy_csv(&d, eps))
        }
        Command::Keyrate => {
            let rep = key_rate(&cfg.scenario()?, &popts).map_err(|e| match e {
                mdi_core::pipeline::PipelineError::Decoy(d) => decoy_error(d),
                e => CliError::Data(e.to_string()),
            })?;
            emit(&out, &decoy_csv(&rep.result, rep.rel_slack))
        }
        Command::SweepLoss { points } => {
            let pts = points.clone().unwrap_or_else(|| {
                if cfg.sweep.axis == SweepAxis::Loss {
                    cfg.sweep.points.clone()
                } else {
                    Vec::new()
                }
            });
            let rep = sweep_loss(&cfg.scenario()?, &pts, &popts).map_err(|e| CliError::Usage(e.to_string()))?;
            report_sweep(&rep);
            emit(&out, &sweep_csv(&rep))
        }
        Command::SweepPower { points } => {
            let pts_uw = points.clone().unwrap_or_else(|| {
                if cfg.sweep.axis == SweepAxis::Power {
                    cfg.sweep.points.clone()
                } else {
                    Vec::new()
                }
            });
            let pts: Vec<f64> = pts_uw.iter().map(|p| p * 1e-6).collect();
            let scenario = cfg.scenario()?;
            let noise = cfg.noise_model()?;
            let rep = sweep_power(&scenario, &noise, &pts, &popts).map_err(|e| CliError::Usage(e.to_string()))?;
            report_sweep(&rep);
            emit(&out, &sweep_csv(&rep))
        }
        Command::Fit {
            tables,
            exclude,
            free,
            bundled,
            raman_from,
            max_iter,
        } => {
            if tables.is_empty() && bundled.is_none() {
                return Err(CliError::Usage("fit needs --table LOSS_DB:PATH entries or --bundled".into()));
            }
            let args = FitArgs {
                free: free.clone(),
                bundled: bundled.clone(),
                raman_from: raman_from.clone(),
                tables: tables.clone(),
                exclude: exclude.clone(),
                max_iter: *max_iter,
            };
            cmd_fit(&cli, &cfg, args)
        }
        Command::Session { log, replay: replay_from } => {
            let scenario = cfg.scenario()?;
            let report = match replay_from {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    replay(&text, &scenario.alice.mu, &scenario.bob.mu, &popts)?
                }
                None => {
                    let mut sc = cfg.session_config()?;
                    sc.record_log = log.is_some();
                    let o = run_session(&scenario, cfg.rounds, cfg.seed, &sc, &popts)?;
                    if o.causality.violations > 0 {
                        return Err(CliError::Internal(format!(
                            "causality monitor reported {} violations",
                            o.causality.violations
                        )));
                    }
                    if let (Some(p), Some(text)) = (log, &o.log) {
                        std::fs::write(p, text).map_err(|e| io_err(p, e))?;
                    }
                    o.report
                }
            };
            emit(&out, &report.to_text())
        }
    }
}

fn report_sweep(rep: &SweepReport) {
    for p in &rep.points {
        if let Some(e) = &p.error {
            eprintln!("warning: point {} failed: {e}", p.axis);
        }
    }
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
}

/// Apply the coexistence noise of the config's channel plan to its scenario.
pub fn scenario_with_plan(cfg: &RunConfig) -> Result<mdi_core::forward::ScenarioConfig, CliError> {
    Ok(apply_coexistence(&cfg.scenario()?, &cfg.noise_model()?, cfg.launch_power()?))
}

/// Thread-count override from `MDIQKD_THREADS`.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MDIQKD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("MDIQKD_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("MDIQKD_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}
