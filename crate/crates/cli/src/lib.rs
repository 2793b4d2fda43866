//! Command implementations behind the `ssnsim` binary.
//!
//! Every command renders into a `String` so it can be tested without
//! spawning a process; `main` only prints and maps errors to exit codes.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use ssn_core::controller::{plan_deployment, Ack, ControllerConfig, NodeView};
use ssn_core::energy::{duty_cycle_of, energy_rate, lifetime, CurrentDraws, EnergyRole, NodeEnergyConfig, DEFAULT_PROFILE};
use ssn_core::netsim::{LinkModel, NodeId, SimConfig, COORDINATOR_SERIAL_BPS, MEASURED_IMAGES, NODE_SERIAL_BPS};
use ssn_core::proto::{build_schedule, decode_frame, AppConfig, AppKind, FirmwareId, Frame};
use ssn_core::scenario::{bundled, Scenario, ScenarioEvent};
use ssn_core::store::{RegisterQuery, Store};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unreadable input.
    #[error("{0}")]
    Usage(String),
    #[error("missing data: {0}")]
    MissingData(String),
    /// Carries the log so it can still be printed.
    #[error("{} invariant violation(s):\n{}", .violations.len(), .violations.join("\n"))]
    Violations { violations: Vec<String>, log: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 invariant violation, 2 usage or parse error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Violations { .. } => 1,
            _ => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ssnsim", version, about = "Shared sensor network controller and simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and print its event log.
    Run(RunArgs),
    /// Print one of the analytical or stored reports.
    Report(ReportArgs),
    /// Encode or decode wire frames.
    Codec {
        #[command(subcommand)]
        op: CodecOp,
    },
    /// Show how the controller would deploy a request on a node.
    Plan(PlanArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    pub scenario: String,
    /// Directory for the table files; in memory when absent.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Simulated time in seconds.
    #[arg(long, default_value_t = 3600.0)]
    pub duration: f64,
    /// Seed for generated presence events.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generated presence events per node and hour, on top of the scenario's.
    #[arg(long, default_value_t = 0.0)]
    pub pir_rate: f64,
    /// Current-draw profile: `default` or a file path.
    #[arg(long, default_value = "default")]
    pub profile: String,
    /// Write the log here instead of stdout.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    UpdateTimes,
    Lifetimes,
    Monitor,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub kind: ReportKind,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub profile: String,
    /// Monitor: only this device.
    #[arg(long)]
    pub device: Option<u32>,
    /// Monitor: only this application.
    #[arg(long)]
    pub app: Option<String>,
    /// Monitor: earliest timestamp, ms.
    #[arg(long)]
    pub from_ms: Option<u64>,
    /// Monitor: latest timestamp, ms.
    #[arg(long)]
    pub to_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum CodecOp {
    /// Build the schedule frame for `kind:interval` pairs, e.g. `temp:5,hum:10`.
    Encode { apps: String },
    /// Parse a frame and describe it.
    Decode {
        frame: String,
        /// Print the canonical re-encoding instead of a description.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Running firmware id, or `none`.
    #[arg(long, default_value = "none")]
    pub running: String,
    /// Running applications as `kind:interval` pairs.
    #[arg(long, default_value = "")]
    pub apps: String,
    /// Firmware ids on the SD card, comma separated.
    #[arg(long, default_value = "")]
    pub sd: String,
    /// The request, `kind[:interval]`.
    pub request: String,
}

pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Codec { op } => cmd_codec(&op),
        Command::Plan(a) => cmd_plan(&a),
    }
}

pub fn load_profile(name: &str) -> Result<CurrentDraws, CliError> {
    let text = if name == "default" {
        DEFAULT_PROFILE.to_string()
    } else {
        std::fs::read_to_string(name).map_err(|e| usage(format!("{name}: {e}")))?
    };
    CurrentDraws::parse_profile(&text).map_err(|e| usage(format!("{name}: {e}")))
}

fn open_store(dir: Option<&PathBuf>) -> Result<Store, CliError> {
    match dir {
        Some(d) => Store::open(d).map_err(usage),
        None => Ok(Store::in_memory()),
    }
}

/// Runs a scenario. The returned text is the event log; with `--log` it is
/// written to the file and the return value is empty.
pub fn cmd_run(a: &RunArgs) -> Result<String, CliError> {
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(usage("--duration must be a positive number of seconds"));
    }
    if !(a.pir_rate >= 0.0 && a.pir_rate.is_finite()) {
        return Err(usage("--pir-rate must be non-negative"));
    }
    let text = match bundled(&a.scenario) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(&a.scenario).map_err(|e| usage(format!("{}: {e}", a.scenario)))?,
    };
    let mut scenario = Scenario::parse(&text).map_err(|e| usage(format!("{}: {e}", a.scenario)))?;
    let draws = load_profile(&a.profile)?;
    let duration_ms = (a.duration * 1000.0).round() as u64;

    let out = if scenario.is_empty() {
        String::new()
    } else {
        if a.pir_rate > 0.0 {
            let extra: Vec<ScenarioEvent> = scenario.generate_pir(a.seed, duration_ms, a.pir_rate);
            scenario.events.extend(extra);
        }
        let cfg = SimConfig {
            draws: draws.clone(),
            controller: ControllerConfig {
                draws,
                ..ControllerConfig::default()
            },
            ..SimConfig::default()
        };
        let store = open_store(a.data_dir.as_ref())?;
        let mut sim = scenario.build(cfg, store).map_err(usage)?;
        sim.log_mut().comment(format!("scenario={}", a.scenario));
        sim.log_mut().comment(format!("seed={} pir_rate={}", a.seed, a.pir_rate));
        sim.log_mut().comment(format!("duration_s={}", a.duration));
        sim.run_until(duration_ms);
        let violations = sim.check_invariants();
        let log = sim.log().to_text();
        if let Some(path) = &a.log {
            std::fs::write(path, &log)?;
        }
        if let Some(dir) = &a.data_dir {
            sim.store().compact().map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        }
        if !violations.is_empty() {
            let log = if a.log.is_some() { String::new() } else { log };
            return Err(CliError::Violations { violations, log });
        }
        log
    };
    Ok(if a.log.is_some() { String::new() } else { out })
}

pub fn cmd_report(a: &ReportArgs) -> Result<String, CliError> {
    match a.kind {
        ReportKind::UpdateTimes => Ok(update_times()),
        ReportKind::Lifetimes => lifetimes(&load_profile(&a.profile)?),
        ReportKind::Monitor => {
            let store = match &a.data_dir {
                Some(d) if !d.is_dir() => return Err(CliError::MissingData(format!("{} is not a directory", d.display()))),
                d => open_store(d.as_ref())?,
            };
            let app = a
                .app
                .as_deref()
                .map(|s| AppKind::parse(s).ok_or_else(|| usage(format!("unknown application {s:?}"))))
                .transpose()?;
            Ok(store.monitor_csv(&RegisterQuery {
                device: a.device.map(NodeId),
                app,
                from_ms: a.from_ms,
                to_ms: a.to_ms,
            }))
        }
    }
}

/// One-hop `-send` transfers of the measured images.
pub fn update_times() -> String {
    let link = LinkModel::default();
    let mut out = String::from("firmware\tframes\tsize_bytes\tbytes_sent\ttime_s\trate_kbps\n");
    for (id, _, _) in MEASURED_IMAGES {
        let fw = FirmwareId::new(id).expect("measured ids are valid");
        let d = link.descriptor(fw, 1);
        let t = link.ota_transfer(&d, COORDINATOR_SERIAL_BPS, NODE_SERIAL_BPS);
        let _ = writeln!(
            out,
            "{id}\t{}\t{}\t{}\t{:.1}\t{:.2}",
            d.frame_count,
            d.size_bytes,
            t.bytes_sent,
            t.duration_s,
            t.effective_rate_bps / 1000.0
        );
    }
    out
}

/// Estimates for one temperature application at 10 s, listening every minute.
pub fn lifetimes(draws: &CurrentDraws) -> Result<String, CliError> {
    let temp10 = AppConfig::periodic(AppKind::Temperature, 10).expect("valid config");
    let mut out = String::from("role\tcurrent_ma\tlifetime_days\tt_sleep\tt_sense\tt_send\tt_recv\tt_listen\n");
    for (name, role) in [("router", EnergyRole::Router), ("end_device", EnergyRole::EndDevice)] {
        let cfg = NodeEnergyConfig::new(role, vec![temp10], Some(1));
        let d = duty_cycle_of(&cfg).map_err(usage)?;
        let ec = energy_rate(&cfg, draws).map_err(usage)?;
        let days = lifetime(&cfg, draws).map_err(usage)?;
        let _ = writeln!(
            out,
            "{name}\t{ec:.4}\t{days:.2}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}",
            d.t_sleep, d.t_sense, d.t_send, d.t_recv, d.t_listen_window
        );
    }
    Ok(out)
}

/// Parses `kind:interval` pairs; presence takes no interval.
pub fn parse_apps(list: &str) -> Result<Vec<AppConfig>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (kind, interval) = match item.split_once(':') {
                Some((k, i)) => (k, Some(i.parse::<u32>().map_err(|_| usage(format!("bad interval in {item:?}")))?)),
                None => (item, None),
            };
            let kind = AppKind::parse(kind).ok_or_else(|| usage(format!("unknown application {kind:?}")))?;
            AppConfig::new(kind, interval).map_err(|e| usage(format!("{item}: {e}")))
        })
        .collect()
}

fn describe(frame: &Frame) -> String {
    let mut out = format!("frame: {}\n", frame.name());
    match frame {
        Frame::ScheduleUpdate { schedule } => {
            let _ = writeln!(out, "intervals: {:?}", schedule.intervals());
            let ix: Vec<u8> = schedule.indices().iter().map(|f| f.get()).collect();
            let _ = writeln!(out, "indices: {ix:?}");
            let _ = writeln!(out, "hyperperiod_s: {}", schedule.hyperperiod());
            for (kind, interval) in schedule.app_intervals() {
                let _ = writeln!(out, "app: {} every {interval} s", kind.name());
            }
            let _ = writeln!(out, "firing (offset_s -> firmware):");
            let offsets = schedule.offsets();
            for (i, off) in offsets.iter().enumerate() {
                let _ = writeln!(out, "  {off:>6} -> {}", schedule.indices()[i]);
            }
            let _ = writeln!(out, "  {:>6} -> {}", schedule.hyperperiod(), schedule.indices()[offsets.len()]);
        }
        other => {
            let _ = writeln!(out, "{other:#?}");
        }
    }
    out
}

pub fn cmd_codec(op: &CodecOp) -> Result<String, CliError> {
    match op {
        CodecOp::Encode { apps } => {
            let configs = parse_apps(apps)?;
            let schedule = build_schedule(&configs).map_err(usage)?;
            Ok(format!("{}\n", Frame::ScheduleUpdate { schedule }))
        }
        CodecOp::Decode { frame, raw } => {
            let f = decode_frame(frame.trim().as_bytes()).map_err(usage)?;
            Ok(if *raw { format!("{f}\n") } else { describe(&f) })
        }
    }
}

fn parse_firmware(s: &str) -> Result<FirmwareId, CliError> {
    s.trim()
        .parse::<u8>()
        .ok()
        .and_then(|i| FirmwareId::new(i).ok())
        .ok_or_else(|| usage(format!("firmware id must be 1..=15, got {s:?}")))
}

pub fn cmd_plan(a: &PlanArgs) -> Result<String, CliError> {
    let running = match a.running.as_str() {
        "none" | "" => None,
        s => Some(parse_firmware(s)?),
    };
    let sd = a
        .sd
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_firmware)
        .collect::<Result<_, _>>()?;
    let intervals = parse_apps(&a.apps)?
        .iter()
        .filter_map(|c| c.interval_s().map(|i| (c.kind(), i)))
        .collect();
    let request = parse_apps(&a.request)?;
    let [request] = request.as_slice() else {
        return Err(usage("exactly one request expected"));
    };
    let view = NodeView {
        node: NodeId(1),
        running,
        intervals,
        sd,
        battery_pct: 100,
    };
    let plan = plan_deployment(&view, request).map_err(usage)?;
    let mut out = format!(
        "case={} ({:?}) fw={}\n",
        plan.case.number(),
        plan.case,
        plan.firmware.map_or("none".to_string(), |f| f.to_string())
    );
    for (i, step) in plan.steps.iter().enumerate() {
        let ack = match step.ack {
            Ack::ProgOk => "PROGOK".to_string(),
            Ack::Stored(f) => format!("stored fw={f}"),
            Ack::Deleted(f) => format!("deleted fw={f}"),
            Ack::Info(f) => format!("INFO fw={f}"),
        };
        let _ = writeln!(out, "{}. {}  ack: {ack}", i + 1, step.frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> Result<String, CliError> {
        let cli = Cli::try_parse_from(std::iter::once("ssnsim").chain(args.iter().copied())).map_err(usage)?;
        execute(cli)
    }

    #[test]
    fn codec_round_trip() {
        let enc = run(&["codec", "encode", "temp:5,hum:10,lum:15"]).unwrap();
        assert_eq!(enc.trim(), "2|<5><5><5><5><5><5>|-|<7><1><3><5><3><1><7>|");
        let raw = run(&["codec", "decode", "--raw", enc.trim()]).unwrap();
        assert_eq!(raw, enc);
        let pretty = run(&["codec", "decode", enc.trim()]).unwrap();
        assert!(pretty.contains("hyperperiod_s: 30"), "{pretty}");
        assert!(pretty.contains("app: humidity every 10 s"));
        assert_eq!(run(&["codec", "decode", "#NOPE"]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn plan_cases() {
        let out = run(&["plan", "--running", "3", "--apps", "temp:5,hum:10", "--sd", "1,3", "temp:5"]).unwrap();
        assert!(out.starts_with("case=1"), "{out}");
        let out = run(&["plan", "--running", "2", "--apps", "hum:10", "--sd", "2,6", "lum:10"]).unwrap();
        assert!(out.starts_with("case=3") && out.contains("fw=6"), "{out}");
        let out = run(&["plan", "lum:10"]).unwrap();
        assert!(out.starts_with("case=4"), "{out}");
        assert!(run(&["plan", "--running", "16", "lum:10"]).is_err());
    }

    #[test]
    fn reports() {
        let t = run(&["report", "update-times"]).unwrap();
        assert_eq!(t.lines().count(), 5);
        let l = run(&["report", "lifetimes", "--profile", "default"]).unwrap();
        assert!(l.contains("router") && l.contains("end_device"));
        let m = run(&["report", "monitor"]).unwrap();
        assert_eq!(m.lines().count(), 1);
    }

    #[test]
    fn run_rejects_bad_arguments() {
        assert_eq!(run(&["run", "--scenario", "fig8_demo", "--duration", "0"]).unwrap_err().exit_code(), 2);
        assert_eq!(run(&["run", "--scenario", "/no/such/file"]).unwrap_err().exit_code(), 2);
        assert_eq!(run(&["run", "--scenario", "fig8_demo", "--profile", "/no/such"]).unwrap_err().exit_code(), 2);
    }
}
