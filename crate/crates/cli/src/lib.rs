//! Subcommands of the `dealer` binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dealer_core::engine::{compute_metrics, read_log, write_log, EventBody, MetricsConfig, RunMetrics, TruthSeries};
use dealer_core::sim::{self, aggregate, mm_for, run_batch, JumpKind, SimConfig, Summary};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dealer", version, about = "Dealer-market simulations, log replay and the live trading service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a batch of single-market simulations.
    Sim(SimArgs),
    /// LMSR against the Bayesian market maker under both jump regimes.
    Table2(Table2Args),
    /// Recompute run statistics from an event log.
    Replay(ReplayArgs),
    /// Start the HTTP/WebSocket trading service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MmKind {
    Lmsr,
    Bmm,
    /// Bayesian market maker without the adaptive reset.
    Zp,
}

impl MmKind {
    fn name(self) -> &'static str {
        match self {
            MmKind::Lmsr => "lmsr",
            MmKind::Bmm => "bmm",
            MmKind::Zp => "zp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Jumps {
    Gaussian,
    Uniform,
    None,
}

impl Jumps {
    fn name(self) -> &'static str {
        match self {
            Jumps::Gaussian => "gaussian",
            Jumps::Uniform => "uniform",
            Jumps::None => "none",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, value_enum, default_value = "bmm")]
    pub mm: MmKind,
    /// LMSR liquidity parameter.
    #[arg(long, default_value_t = 125.0)]
    pub b: f64,
    /// Trades in the adaptive consistency window.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Consistency threshold of the adaptive reset.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub jumps: Jumps,
    /// Per-step jump probability.
    #[arg(long, default_value_t = 0.01)]
    pub pj: f64,
    #[arg(long = "sigma-j", default_value_t = 5.0)]
    pub sigma_j: f64,
    /// Trader valuation noise, also given to the Bayesian market maker.
    #[arg(long = "sigma-eps", default_value_t = 5.0)]
    pub sigma_eps: f64,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: u32,
    /// Base seed; a random one is drawn and printed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for runs.csv, series.csv and summary.csv.
    #[arg(long, default_value = "sim-out")]
    pub out: PathBuf,
    /// Also write the event log of run 0 here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Table2Args {
    /// Runs per cell.
    #[arg(long, default_value_t = 200)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write table2.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
    /// Only this market.
    #[arg(long)]
    pub market: Option<String>,
    /// Spread probe convention; picked from the log when absent.
    #[arg(long, value_enum)]
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Probe {
    /// Half of the two-sided 20-share spread.
    Simulation,
    /// Full two-sided 40-share spread.
    Live,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "DEALER_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "DEALER_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long = "log-dir", env = "DEALER_LOG_DIR", default_value = "logs")]
    pub log_dir: PathBuf,
    /// Session registry file; `<log-dir>/sessions.json` when absent.
    #[arg(long, env = "DEALER_REGISTRY")]
    pub registry: Option<PathBuf>,
    /// Required in `x-admin-token` for operator routes when set.
    #[arg(long = "admin-token", env = "DEALER_ADMIN_TOKEN")]
    pub admin_token: Option<String>,
}

/// Failure of a subcommand, with the process exit code to use.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::new(e.to_string())
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Sim(a) => cmd_sim(&a, out),
        Command::Table2(a) => cmd_table2(&a, out),
        Command::Replay(a) => cmd_replay(&a, out),
        Command::Serve(a) => cmd_serve(&a, out),
    }
}

fn seed_or_draw(seed: Option<u64>, out: &mut dyn Write) -> std::io::Result<u64> {
    match seed {
        Some(s) => Ok(s),
        None => {
            let s = rand::random::<u64>() >> 11;
            writeln!(out, "generated seed {s}")?;
            Ok(s)
        }
    }
}

impl SimArgs {
    pub fn config(&self, seed: u64) -> Result<SimConfig, String> {
        let jumps = match self.jumps {
            Jumps::Gaussian => JumpKind::Gaussian { sigma_j: self.sigma_j },
            Jumps::Uniform => JumpKind::Uniform,
            Jumps::None => JumpKind::None,
        };
        let config = SimConfig {
            steps: self.steps,
            p_j: self.pj,
            jumps,
            sigma_eps: self.sigma_eps,
            mm: mm_for(self.mm.name(), self.b, self.window, self.alpha, self.sigma_eps)?,
            seed,
            keep_events: self.log.is_some(),
            ..SimConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    mm: &'a str,
    jumps: &'a str,
    runs: usize,
    seed: u64,
    profit: f64,
    max_loss: f64,
    spread: f64,
    rmsd: f64,
    rmsd_eq: f64,
}

impl<'a> SummaryRow<'a> {
    fn new(mm: &'a str, jumps: &'a str, seed: u64, s: &Summary) -> Self {
        Self {
            mm,
            jumps,
            runs: s.runs,
            seed,
            profit: s.mean_profit,
            max_loss: s.max_loss,
            spread: s.mean_spread,
            rmsd: s.mean_rmsd,
            rmsd_eq: s.mean_rmsd_eq,
        }
    }
}

fn write_table(out: &mut dyn Write, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<6} {:<9} {:>6} {:>12} {:>12} {:>9} {:>9} {:>9}",
        "mm", "jumps", "runs", "Profit", "Max Loss", "Spread", "RMSD", "RMSD_eq"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<6} {:<9} {:>6} {:>12.2} {:>12.2} {:>9.3} {:>9.3} {:>9.3}",
            r.mm, r.jumps, r.runs, r.profit, r.max_loss, r.spread, r.rmsd, r.rmsd_eq
        )?;
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_sim(args: &SimArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.runs == 0 {
        return Err(CliError::new("--runs must be at least 1"));
    }
    let seed = seed_or_draw(args.seed, out)?;
    let config = args.config(seed)?;
    let runs = run_batch(&config, args.runs)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::new(format!("cannot create {}: {e}", args.out.display())))?;
    sim::write_runs_csv(create_file(&args.out.join("runs.csv"))?, &runs)?;
    sim::write_series_csv(create_file(&args.out.join("series.csv"))?, &runs)?;
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
    let summary = aggregate(&metrics);
    let row = SummaryRow::new(args.mm.name(), args.jumps.name(), seed, &summary);
    let mut w = csv::Writer::from_writer(create_file(&args.out.join("summary.csv"))?);
    w.serialize(&row)?;
    w.flush()?;
    if let Some(path) = &args.log {
        write_log(create_file(path)?, &runs[0].events)?;
    }
    write_table(out, &[row])?;
    Ok(())
}

pub fn cmd_table2(args: &Table2Args, out: &mut dyn Write) -> Result<(), CliError> {
    if args.runs == 0 {
        return Err(CliError::new("--runs must be at least 1"));
    }
    let seed = seed_or_draw(args.seed, out)?;
    let mut summaries = Vec::new();
    for (jumps, jump_name) in [(JumpKind::Gaussian { sigma_j: 5.0 }, "gaussian"), (JumpKind::Uniform, "uniform")] {
        for mm_name in ["lmsr", "bmm"] {
            // the same seeds for both market makers so they face identical truth paths
            let config = SimConfig {
                jumps,
                mm: mm_for(mm_name, 125.0, 5, 1.0, 5.0)?,
                seed,
                ..SimConfig::default()
            };
            let metrics: Vec<RunMetrics> = run_batch(&config, args.runs)?.into_iter().map(|r| r.metrics).collect();
            summaries.push((mm_name, jump_name, aggregate(&metrics)));
        }
    }
    let rows: Vec<SummaryRow> = summaries
        .iter()
        .map(|(mm, jumps, s)| SummaryRow::new(mm, jumps, seed, s))
        .collect();
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| CliError::new(format!("cannot create {}: {e}", dir.display())))?;
        let mut w = csv::Writer::from_writer(create_file(&dir.join("table2.csv"))?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_table(out, &rows)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ReplayReport {
    pub session: Option<String>,
    pub events: usize,
    pub markets: BTreeMap<String, RunMetrics>,
}

fn zeroed() -> RunMetrics {
    RunMetrics {
        mm_profit: 0.0,
        mm_max_loss: 0.0,
        avg_spread: 0.0,
        rmsd: 0.0,
        rmsd_eq: 0.0,
        buys: 0,
        sells: 0,
        samples: 0,
    }
}

pub fn replay_report(args: &ReplayArgs) -> Result<ReplayReport, CliError> {
    let file = File::open(&args.log).map_err(|e| CliError::new(format!("cannot open {}: {e}", args.log.display())))?;
    let events = read_log(BufReader::new(file)).map_err(|e| CliError {
        code: 2,
        message: e.to_string(),
    })?;
    let Some(first) = events.first() else {
        let markets = args.market.iter().map(|m| (m.clone(), zeroed())).collect();
        return Ok(ReplayReport {
            session: None,
            events: 0,
            markets,
        });
    };
    let EventBody::Opened { config, .. } = &first.body else {
        return Err(CliError::new(format!("log starts with `{}`, not `opened`", first.body.kind())));
    };
    let ids: Vec<String> = config.markets.iter().map(|m| m.id.clone()).collect();
    let probe = args.probe.unwrap_or(if ids == [sim::MARKET] { Probe::Simulation } else { Probe::Live });
    let metrics_config = match probe {
        Probe::Simulation => MetricsConfig::simulation(),
        Probe::Live => MetricsConfig::live(),
    };
    let wanted: Vec<String> = match &args.market {
        Some(m) if ids.contains(m) => vec![m.clone()],
        Some(m) => return Err(CliError::new(format!("market `{m}` is not in this log"))),
        None => ids,
    };
    let mut markets = BTreeMap::new();
    for id in wanted {
        let truth = TruthSeries::from_events(&events, &id);
        let m = compute_metrics(&events, &id, &truth, metrics_config)?;
        markets.insert(id, m);
    }
    Ok(ReplayReport {
        session: Some(first.session.clone()),
        events: events.len(),
        markets,
    })
}

pub fn cmd_replay(args: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = replay_report(args)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Startup<'a> {
    event: &'static str,
    addr: String,
    log_dir: &'a Path,
    registry: &'a Path,
    sessions: usize,
}

pub fn cmd_serve(args: &ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| {
            let why = if e.kind() == std::io::ErrorKind::AddrInUse {
                "port already in use".to_owned()
            } else {
                e.to_string()
            };
            CliError::new(format!("cannot listen on {addr}: {why}"))
        })?;
        let mut config = dealer_service::ServiceConfig::new(&args.log_dir);
        if let Some(r) = &args.registry {
            config.registry_path = r.clone();
        }
        config.admin_token = args.admin_token.clone();
        let registry = config.registry_path.clone();
        let hub = dealer_service::Hub::open(config)?;
        let startup = Startup {
            event: "listening",
            addr: listener.local_addr()?.to_string(),
            log_dir: &args.log_dir,
            registry: &registry,
            sessions: hub.list().len(),
        };
        writeln!(out, "{}", serde_json::to_string(&startup)?)?;
        out.flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        dealer_service::serve(listener, hub, shutdown).await?;
        Ok(())
    })
}
