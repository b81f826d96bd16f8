//! Command-line entry points.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::careplan::{CarePlanConfig, DEFAULT_CAREPLAN};
use crate::controller::Controller;
use crate::report::RunReport;
use crate::simworld::Scenario;
use crate::telemetry::server::Server;
use crate::telemetry::{
    encode_frame, read_log, replay, Frame, LatencyModel, LogWriter, DEFAULT_PORT, SERIAL_DELAY_MS,
};
use crate::tradeoff::{
    apply_availability, enumerate_configs, load_catalog, load_weights, select_optimal, ConfigCandidate,
    Criterion, MergePolicy,
};

#[derive(Debug, Parser)]
#[command(name = "robonurse", version, about = "Ward simulator and control stack for a nursing robot")]
pub struct Cli {
    /// Log verbosity: repeat for more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a ward scenario.
    Sim(SimArgs),
    /// Rank module configurations by weighted cost.
    Tradeoff(TradeoffArgs),
    /// Re-emit a recorded frame log.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario file; the built-in eight-bed ward when omitted.
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// RNG seed; overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated seconds to run.
    #[arg(long, default_value_t = 3600.0)]
    pub duration: f64,
    /// JSON-lines command script; each line is a `cmd` frame issued at its `issued_at`.
    #[arg(long, value_name = "FILE")]
    pub commands: Option<PathBuf>,
    /// Care plan file; the built-in plan when omitted.
    #[arg(long, value_name = "FILE")]
    pub careplan: Option<PathBuf>,
    /// Open the websocket telemetry port and run paced to wall-clock time.
    #[arg(long)]
    pub serve: bool,
    /// Telemetry port used with --serve.
    #[arg(long, default_value_t = DEFAULT_PORT, requires = "serve")]
    pub port: u16,
    /// Sim seconds per wall-clock second with --serve.
    #[arg(long, default_value_t = 1.0, requires = "serve")]
    pub speed: f64,
    /// Directory for frame logs and reports.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub data_dir: PathBuf,
    /// Unix start time used in the log file name; the current time when omitted.
    #[arg(long, value_name = "SECS")]
    pub start_time: Option<u64>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub machine: bool,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    /// Alternatives catalog (TOML).
    #[arg(long, value_name = "FILE")]
    pub catalog: PathBuf,
    /// Weight matrix (TOML).
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
    /// Number of configurations to list.
    #[arg(short = 'k', default_value_t = 5)]
    pub k: usize,
    /// Fold a tied runner-up into the availability-adjusted pick.
    #[arg(long)]
    pub merge_ties: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub machine: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Frame log to replay.
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Playback speed relative to recorded sim time; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0, conflicts_with = "serve")]
    pub speed: f64,
    /// Serve the log on the telemetry port at recorded pace.
    #[arg(long)]
    pub serve: bool,
    /// Telemetry port used with --serve.
    #[arg(long, default_value_t = DEFAULT_PORT, requires = "serve")]
    pub port: u16,
    /// Print a report aggregated from the log instead of the frames.
    #[arg(long)]
    pub report: bool,
}

/// Failure reported to the user; the process exits with status 2.
#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

fn fail(msg: impl Into<String>) -> CliError {
    CliError(msg.into())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Cmd::Sim(a) => cmd_sim(&a, out).map(|_| ()),
        Cmd::Tradeoff(a) => cmd_tradeoff(&a, out),
        Cmd::Replay(a) => cmd_replay(&a, out),
    }
}

/// Parses a command script: one encoded command per line, blank lines and
/// `#` comments ignored. Returns `(issued_at, line)` pairs.
pub fn read_command_script(path: &Path) -> Result<Vec<(f64, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| fail(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        let at = v.get("issued_at").and_then(serde_json::Value::as_f64).unwrap_or(0.0);
        out.push((at, line.to_string()));
    }
    Ok(out)
}

pub struct SimOutcome {
    pub report: RunReport,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
}

pub fn cmd_sim(a: &SimArgs, out: &mut dyn Write) -> Result<SimOutcome, CliError> {
    if !(a.duration.is_finite() && a.duration >= 0.0) {
        return Err(fail("--duration must be a non-negative number of seconds"));
    }
    let scenario = match &a.scenario {
        Some(p) => Scenario::load(p).map_err(|e| fail(e.to_string()))?,
        None => Scenario::default_ward(),
    };
    let careplan = match &a.careplan {
        Some(p) => CarePlanConfig::load(p).map_err(|e| fail(format!("{}: {e}", p.display())))?,
        None => CarePlanConfig::parse(DEFAULT_CAREPLAN).expect("built-in careplan"),
    };
    let script = match &a.commands {
        Some(p) => read_command_script(p)?,
        None => Vec::new(),
    };
    let seed = a.seed.unwrap_or(scenario.seed);
    let name = scenario.name.clone();
    let start = a.start_time.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });

    let mut ctl = Controller::with_seed(scenario, careplan, seed).map_err(|e| fail(e.to_string()))?;
    let writer = LogWriter::for_run(&a.data_dir, &name, seed, start).map_err(|e| fail(e.to_string()))?;
    let log_path = writer.path().expect("file-backed writer").to_path_buf();
    ctl.set_writer(writer);
    for (at, line) in &script {
        ctl.submit_line(line.as_bytes(), *at);
    }

    let mut frames: Vec<Frame> = Vec::new();
    if a.serve {
        serve_sim(&mut ctl, a, &mut frames)?;
    } else {
        ctl.run_until(a.duration);
    }
    ctl.finish();
    frames.extend(ctl.take_frames());

    let report = RunReport::from_frames(&frames);
    let report_path = log_path.with_extension("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, json.as_bytes() as &[u8])
        .map_err(|e| fail(format!("{}: {e}", report_path.display())))?;

    if a.machine {
        writeln!(out, "{json}").map_err(|e| fail(e.to_string()))?;
    } else {
        write!(out, "{}", report.to_table()).map_err(|e| fail(e.to_string()))?;
        writeln!(out, "\nlog     {}\nreport  {}", log_path.display(), report_path.display())
            .map_err(|e| fail(e.to_string()))?;
    }
    Ok(SimOutcome {
        report,
        log_path,
        report_path,
    })
}

/// Runs the controller paced to wall-clock time while serving telemetry.
fn serve_sim(ctl: &mut Controller, a: &SimArgs, frames: &mut Vec<Frame>) -> Result<(), CliError> {
    if !(a.speed.is_finite() && a.speed > 0.0) {
        return Err(fail("--speed must be positive"));
    }
    let (tx, rx) = mpsc::channel();
    let mut server = Server::start(&format!("0.0.0.0:{}", a.port), tx)
        .map_err(|e| fail(format!("cannot listen on port {}: {e}", a.port)))?;
    eprintln!("serving telemetry on ws://{}", server.local_addr());
    let mut latency = LatencyModel::standard(ctl.world().clock.seed ^ 0x5345_5256);
    let mut in_flight: VecDeque<(f64, Vec<Frame>)> = VecDeque::new();
    let mut last_delivery = 0.0;
    let wall0 = Instant::now();
    while ctl.now() < a.duration {
        while let Ok(payload) = rx.try_recv() {
            ctl.deliver(payload);
        }
        ctl.step();
        let now = ctl.now();
        let batch = ctl.take_frames();
        if !batch.is_empty() {
            let at = (now + (latency.sample_ms() + SERIAL_DELAY_MS) / 1000.0).max(last_delivery);
            last_delivery = at;
            frames.extend(batch.iter().cloned());
            in_flight.push_back((at, batch));
        }
        while in_flight.front().is_some_and(|(at, _)| *at <= now) {
            let (_, batch) = in_flight.pop_front().expect("front");
            server.hub.broadcast(&batch);
        }
        let target = Duration::from_secs_f64(now / a.speed);
        if let Some(wait) = target.checked_sub(wall0.elapsed()) {
            std::thread::sleep(wait);
        }
    }
    for (_, batch) in in_flight {
        server.hub.broadcast(&batch);
    }
    std::thread::sleep(Duration::from_millis(100));
    server.shutdown();
    Ok(())
}

#[derive(Serialize)]
struct RankedRow {
    rank: usize,
    code: String,
    breakdown: BTreeMap<&'static str, f64>,
    total: f64,
}

fn row(rank: usize, c: &ConfigCandidate) -> RankedRow {
    RankedRow {
        rank,
        code: c.code(),
        breakdown: Criterion::ALL.into_iter().map(|k| (k.name(), c.component(k))).collect(),
        total: c.total,
    }
}

pub fn cmd_tradeoff(a: &TradeoffArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let catalog = load_catalog(&a.catalog).map_err(|e| fail(format!("{}: {e}", a.catalog.display())))?;
    let weights = load_weights(&a.weights).map_err(|e| fail(format!("{}: {e}", a.weights.display())))?;
    let all = enumerate_configs(&catalog, &weights).map_err(|e| fail(e.to_string()))?;
    let top = select_optimal(&all, a.k);
    let merge = if a.merge_ties {
        MergePolicy::TiedRunnerUp
    } else {
        MergePolicy::None
    };
    let adjusted = apply_availability(&select_optimal(&all, 2), &HashMap::new(), &catalog, &weights, merge);

    let io = |e: std::io::Error| fail(e.to_string());
    if a.machine {
        #[derive(Serialize)]
        struct Out {
            configurations: usize,
            ranked: Vec<RankedRow>,
            available: Option<RankedRow>,
            available_error: Option<String>,
        }
        let (available, available_error) = match &adjusted {
            Ok(c) => (Some(row(1, c)), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let o = Out {
            configurations: all.len(),
            ranked: top.iter().enumerate().map(|(i, c)| row(i + 1, c)).collect(),
            available,
            available_error,
        };
        let json = serde_json::to_string_pretty(&o).expect("serializes");
        writeln!(out, "{json}").map_err(io)?;
        return Ok(());
    }

    writeln!(out, "{} configurations scored", all.len()).map_err(io)?;
    writeln!(
        out,
        "{:>4}  {:<20} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "rank", "configuration", "cost", "accuracy", "weight", "speed", "total"
    )
    .map_err(io)?;
    for (i, c) in top.iter().enumerate() {
        let b = |k| c.component(k);
        writeln!(
            out,
            "{:>4}  {:<20} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            i + 1,
            c.code(),
            b(Criterion::Cost),
            b(Criterion::Accuracy),
            b(Criterion::Weight),
            b(Criterion::Speed),
            c.total
        )
        .map_err(io)?;
    }
    match adjusted {
        Ok(c) => writeln!(out, "\nwith current availability: {} (total {:.3})", c.code(), c.total).map_err(io)?,
        Err(e) => writeln!(out, "\nwith current availability: {e}").map_err(io)?,
    }
    Ok(())
}

pub fn cmd_replay(a: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.log).map_err(|e| fail(format!("{}: {e}", a.log.display())))?;
    if a.report {
        let (frames, warnings) = read_log(&a.log).map_err(|e| fail(e.to_string()))?;
        let report = RunReport::from_frames(&frames);
        let json = serde_json::to_string_pretty(&report).expect("serializes");
        writeln!(out, "{json}").map_err(|e| fail(e.to_string()))?;
        if !warnings.is_empty() {
            eprintln!("{} corrupt lines skipped", warnings.len());
        }
        return Ok(());
    }
    if a.serve {
        let (tx, _rx) = mpsc::channel();
        let mut server = Server::start(&format!("0.0.0.0:{}", a.port), tx)
            .map_err(|e| fail(format!("cannot listen on port {}: {e}", a.port)))?;
        eprintln!("replaying on ws://{}", server.local_addr());
        let outcome = replay(&bytes, 1.0, |f| {
            server.hub.broadcast(std::slice::from_ref(f));
            Ok(())
        })
        .map_err(|e| fail(e.to_string()))?;
        std::thread::sleep(Duration::from_millis(200));
        server.shutdown();
        eprintln!("{} frames replayed, {} corrupt lines skipped", outcome.frames, outcome.warnings.len());
        return Ok(());
    }
    if !(a.speed.is_finite() && a.speed >= 0.0) {
        return Err(fail("--speed must be >= 0"));
    }
    let outcome = replay(&bytes, a.speed, |f| {
        let line = encode_frame(f).map_err(std::io::Error::other)?;
        out.write_all(&line)
    })
    .map_err(|e| fail(e.to_string()))?;
    if !outcome.warnings.is_empty() {
        eprintln!("{} corrupt lines skipped", outcome.warnings.len());
    }
    Ok(())
}
