//! Co-simulation runner: drives the plant against a controller over the bus,
//! checks invariants, computes metrics and writes run artifacts.

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bus::{
    inproc_pair, tcp_pair, ControllerEndpoint, FaultyLink, FrameLink, FrameLog, PlantEndpoint, Quantizer,
    SessionError, SessionMode, SetpointSchedule, TcpLink,
};
use crate::controller::{read_controller_log, run_controller, write_controller_log, ControllerLogRow, ControllerRun, ControllerState};
use crate::domain::{scale_series, PowerSeries, Scenario};
use crate::plant::{write_plant_trace, PlantError, PlantState, PlantTraceRow};
use crate::ramp::{ramp_report, RampReport, RampSettings};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("input: {0}")]
    Input(String),
    #[error("invariant breached at step {step}: {what}")]
    Invariant { step: usize, what: String },
    #[error("protocol fault at step {step}: {source}")]
    Protocol {
        step: usize,
        #[source]
        source: SessionError,
    },
    #[error("controller: {0}")]
    Controller(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RunError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invariant { .. } => 2,
            RunError::Input(_) => 3,
            RunError::Protocol { .. } | RunError::Controller(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

/// How the controller is hosted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TransportKind {
    /// Controller on a thread, frames over an in-memory channel.
    #[default]
    InProcess,
    /// Controller on a thread, frames over loopback TCP.
    Socket,
    /// Controller in a child process (`<exe> controller ...`) over loopback TCP.
    SocketProcess { exe: PathBuf },
}

impl TransportKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransportKind::InProcess => "inproc",
            TransportKind::Socket => "socket",
            TransportKind::SocketProcess { .. } => "socket-process",
        }
    }
}

/// Bits to flip in outgoing frames, as `(frame_index, bit)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub sensor_flips: Vec<(usize, usize)>,
    pub setpoint_flips: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub transport: TransportKind,
    pub faults: FaultPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocSummary {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    pub final_soc: f64,
    pub clamp_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: usize,
    /// Setpoint frames the plant could not decode (a zero current was applied).
    pub plant_rejected_setpoints: u64,
    /// Sensor frames the controller could not decode or use.
    pub controller_rejected_frames: u64,
    pub setpoint_faults: u64,
    /// Steps where the applied current differs from the requested one.
    pub setpoint_divergences: usize,
    pub clean_end: bool,
}

/// Everything that goes into `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub window_samples: usize,
    pub warmup_samples: usize,
    pub raw: RampReport,
    pub smoothed: RampReport,
    pub grid: RampReport,
    pub soc: SocSummary,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Input after scaling, as the plant saw it.
    pub series: PowerSeries,
    pub mode: SessionMode,
    pub transport: String,
    pub trace: Vec<PlantTraceRow>,
    pub controller: ControllerRun,
    pub frames: FrameLog,
    pub metrics: RunMetrics,
}

/// Apply the scenario's nameplate and scaling rules to an input series.
pub fn prepare_series(scenario: &Scenario, series: &PowerSeries) -> Result<PowerSeries, RunError> {
    let cfg = &scenario.config;
    if series.sample_period_s() != cfg.sample_period_s {
        return Err(RunError::Input(format!(
            "series sample period {} s does not match scenario sample_period_s {} s",
            series.sample_period_s(),
            cfg.sample_period_s
        )));
    }
    let mut out = series.clone();
    if let Some(rated) = cfg.scaling.source_rated_w {
        out = PowerSeries::new(out.samples().to_vec(), out.sample_period_s(), rated, out.start_time_s())
            .map_err(|e| RunError::Input(format!("scaling.source_rated_w: {e}")))?;
    }
    if let Some(target) = cfg.scaling.target_rated_w {
        out = scale_series(&out, target).map_err(|e| RunError::Input(format!("scaling.target_rated_w: {e}")))?;
    }
    Ok(out)
}

fn quantizer(scenario: &Scenario, series: &PowerSeries) -> Option<Quantizer> {
    let cfg = &scenario.config;
    cfg.transport.quantization.as_ref().map(|q| {
        Quantizer::resolve(
            q,
            series.rated_power_w(),
            cfg.battery.v_max_v,
            cfg.battery.current_limit_a.min(cfg.supply.current_limit_a),
        )
    })
}

fn sim_time_ms(k: usize, period_s: f64) -> u64 {
    (k as f64 * period_s * 1000.0).round() as u64
}

fn plant_error(step: usize, e: PlantError) -> RunError {
    RunError::Invariant {
        step,
        what: e.to_string(),
    }
}

struct PlantSide {
    trace: Vec<PlantTraceRow>,
    frames: FrameLog,
    rejected: u64,
    sent: Vec<(f64, f64)>,
}

fn drive_plant<L: FrameLink>(
    link: L,
    scenario: &Scenario,
    series: &PowerSeries,
    quant: Option<Quantizer>,
) -> Result<PlantSide, RunError> {
    let cfg = &scenario.config;
    let mut endpoint = PlantEndpoint::new(link, &cfg.transport, quant, cfg.seed);
    let mut plant = PlantState::new(series, &cfg.battery);
    let mut schedule = SetpointSchedule::default();
    let mut trace = Vec::with_capacity(series.len());
    let mut sent = Vec::with_capacity(series.len());
    let mut sensor = plant.sensor();
    loop {
        let k = plant.k;
        let now = sim_time_ms(k, cfg.sample_period_s);
        let ex = endpoint
            .exchange(now, sensor.p_pv_w, sensor.v_batt_v)
            .map_err(|source| RunError::Protocol { step: k, source })?;
        sent.push((ex.p_pv_sent_w, ex.v_batt_sent_v));
        let request = match cfg.transport.mode {
            SessionMode::Lockstep => ex.setpoint_a,
            SessionMode::FreeRunning => {
                schedule.push(ex.setpoint_delivered_ms, ex.setpoint_a);
                schedule.active_at(now)
            }
        };
        let (row, next) = plant.step(series, request, cfg).map_err(|e| plant_error(k, e))?;
        trace.push(row);
        match next {
            Some(s) => sensor = s,
            None => break,
        }
    }
    let rejected = endpoint.rejected_frames();
    let end = sim_time_ms(plant.k, cfg.sample_period_s);
    let frames = endpoint
        .finish(end)
        .map_err(|source| RunError::Protocol { step: plant.k, source })?;
    Ok(PlantSide {
        trace,
        frames,
        rejected,
        sent,
    })
}

/// Outcome of a controller served over one link, as reported to the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub steps: usize,
    pub rejected_frames: u64,
    pub setpoint_faults: u64,
    pub clean_end: bool,
    pub error: Option<i32>,
}

/// Serve the controller side of a session on `link`.
pub fn serve_controller<L: FrameLink>(
    link: L,
    window_samples: usize,
    sample_period_s: f64,
    mode: SessionMode,
) -> Result<ControllerRun, RunError> {
    let state =
        ControllerState::new(window_samples, sample_period_s).map_err(|e| RunError::Input(e.to_string()))?;
    let mut endpoint = ControllerEndpoint::new(link, mode);
    run_controller(&mut endpoint, state).map_err(|e| RunError::Controller(e.to_string()))
}

fn boxed_controller_link<L: FrameLink + 'static>(link: L, flips: &[(usize, usize)]) -> Box<dyn FrameLink> {
    if flips.is_empty() {
        Box::new(link)
    } else {
        let mut faulty = FaultyLink::new(link);
        for &(frame, bit) in flips {
            faulty = faulty.flip_bit(frame, bit);
        }
        Box::new(faulty)
    }
}

fn run_threaded<P: FrameLink + 'static, C: FrameLink + 'static>(
    plant_link: P,
    ctrl_link: C,
    scenario: &Scenario,
    series: &PowerSeries,
    faults: &FaultPlan,
) -> Result<(PlantSide, ControllerRun), RunError> {
    let plant_link = boxed_controller_link(plant_link, &faults.sensor_flips);
    let ctrl_link = boxed_controller_link(ctrl_link, &faults.setpoint_flips);
    let window = scenario.window_samples;
    let period = scenario.config.sample_period_s;
    let mode = scenario.config.transport.mode;
    let handle = thread::Builder::new()
        .name("controller".into())
        .spawn(move || serve_controller(ctrl_link, window, period, mode))?;
    let plant = drive_plant(plant_link, scenario, series, quantizer(scenario, series));
    let ctrl = handle
        .join()
        .map_err(|_| RunError::Controller("controller thread panicked".into()))?;
    let plant = plant?;
    Ok((plant, ctrl?))
}

fn run_process(
    exe: &Path,
    scenario: &Scenario,
    series: &PowerSeries,
    faults: &FaultPlan,
) -> Result<(PlantSide, ControllerRun), RunError> {
    if !faults.setpoint_flips.is_empty() {
        return Err(RunError::Input("setpoint fault injection is not available with a child-process controller".into()));
    }
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let log_dir = tempfile::tempdir()?;
    let log_path = log_dir.path().join("controller_log.csv");
    let mode = match scenario.config.transport.mode {
        SessionMode::Lockstep => "lockstep",
        SessionMode::FreeRunning => "free-running",
    };
    let mut child = Command::new(exe)
        .arg("controller")
        .arg("--connect")
        .arg(addr.to_string())
        .arg("--window-samples")
        .arg(scenario.window_samples.to_string())
        .arg("--sample-period")
        .arg(scenario.config.sample_period_s.to_string())
        .arg("--mode")
        .arg(mode)
        .arg("--log")
        .arg(&log_path)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;

    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + Duration::from_secs(30);
    let stream = loop {
        match listener.accept() {
            Ok((stream, _)) => break stream,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if let Some(status) = child.try_wait()? {
                    return Err(RunError::Controller(format!("controller process exited early: {status}")));
                }
                if Instant::now() > deadline {
                    let _ = child.kill();
                    return Err(RunError::Controller("controller process never connected".into()));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nonblocking(false)?;
    let link = boxed_controller_link(TcpLink::new(stream)?, &faults.sensor_flips);
    let plant = drive_plant(link, scenario, series, quantizer(scenario, series));

    let output = child.wait_with_output()?;
    let plant = plant?;
    let summary: ControllerSummary = serde_json::from_slice(&output.stdout).map_err(|e| {
        RunError::Controller(format!("unreadable controller summary ({e}), exit status {}", output.status))
    })?;
    if let Some(code) = summary.error {
        return Err(RunError::Controller(format!("controller process failed with code {code}")));
    }
    let log = read_controller_log(BufReader::new(fs::File::open(&log_path)?))?;
    Ok((
        plant,
        ControllerRun {
            log,
            rejected_frames: summary.rejected_frames,
            setpoint_faults: summary.setpoint_faults,
            clean_end: summary.clean_end,
        },
    ))
}

/// Connect to a runner at `addr`, serve one session and write the log.
/// The returned summary is what the child process prints on stdout.
pub fn controller_process<A: ToSocketAddrs>(
    addr: A,
    window_samples: usize,
    sample_period_s: f64,
    mode: SessionMode,
    log_path: &Path,
) -> ControllerSummary {
    let fail = |code| ControllerSummary {
        steps: 0,
        rejected_frames: 0,
        setpoint_faults: 0,
        clean_end: false,
        error: Some(code),
    };
    let link = match TcpLink::connect(addr) {
        Ok(l) => l,
        Err(_) => return fail(1),
    };
    let run = match serve_controller(link, window_samples, sample_period_s, mode) {
        Ok(r) => r,
        Err(e) => return fail(e.exit_code()),
    };
    if write_atomic(log_path, |w| write_controller_log(&run.log, w)).is_err() {
        return fail(1);
    }
    ControllerSummary {
        steps: run.log.len(),
        rejected_frames: run.rejected_frames,
        setpoint_faults: run.setpoint_faults,
        clean_end: run.clean_end,
        error: None,
    }
}

/// Controller rows must satisfy the subtractive split and the current law
/// bit for bit, and must carry exactly what the plant put on the wire.
fn check_controller_rows(rows: &[ControllerLogRow], sent: &[(f64, f64)], run: &ControllerRun) -> Result<(), RunError> {
    for row in rows {
        let step = row.k as usize;
        if row.p_batt_w.to_bits() != (row.p_pv_w - row.p_hat_w).to_bits() {
            return Err(RunError::Invariant {
                step,
                what: format!("p_batt {} != p_pv - p_hat {}", row.p_batt_w, row.p_pv_w - row.p_hat_w),
            });
        }
        let law = row.p_batt_w / row.v_batt_v;
        let faulted = !(row.v_batt_v.is_finite() && row.v_batt_v > 0.0) && row.i_set_a == 0.0;
        if !faulted && row.i_set_a.to_bits() != law.to_bits() {
            return Err(RunError::Invariant {
                step,
                what: format!("i_set {} != p_batt / v_batt {}", row.i_set_a, law),
            });
        }
    }
    if run.rejected_frames == 0 {
        if rows.len() != sent.len() {
            return Err(RunError::Invariant {
                step: rows.len().min(sent.len()),
                what: format!("controller logged {} steps, plant ran {}", rows.len(), sent.len()),
            });
        }
        for (row, &(p, v)) in rows.iter().zip(sent) {
            if row.p_pv_w.to_bits() != p.to_bits() || row.v_batt_v.to_bits() != v.to_bits() {
                return Err(RunError::Invariant {
                    step: row.k as usize,
                    what: "sensor values changed in transit".into(),
                });
            }
        }
    }
    Ok(())
}

fn ramp_settings(scenario: &Scenario) -> RampSettings {
    let cfg = &scenario.config;
    RampSettings {
        interval_s: cfg.rr_interval_s,
        alignment: cfg.rr_alignment,
        limit_pct_per_min: cfg.ramp_limit_pct_per_min,
        bin_width: cfg.histogram_bin_width,
        warmup_samples: scenario.window_samples,
    }
}

fn metrics(
    scenario: &Scenario,
    series: &PowerSeries,
    trace: &[PlantTraceRow],
    ctrl: &ControllerRun,
    plant_rejected: u64,
) -> Result<RunMetrics, RunError> {
    let settings = ramp_settings(scenario);
    let period = series.sample_period_s();
    let rated = series.rated_power_w();
    let t0 = series.start_time_s();
    let report = |samples: &[f64], what: &str| {
        ramp_report(samples, period, rated, t0, &settings).map_err(|e| RunError::Input(format!("{what} ramp rates: {e}")))
    };
    let raw = report(series.samples(), "raw")?;
    let p_hat: Vec<f64> = ctrl.log.iter().map(|r| r.p_hat_w).collect();
    let smoothed = report(&p_hat, "smoothed")?;
    let p_grid: Vec<f64> = trace.iter().map(|r| r.p_grid_w).collect();
    let grid = report(&p_grid, "grid")?;

    let initial = scenario.config.battery.soc_init;
    let (min, max) = trace
        .iter()
        .fold((initial, initial), |(lo, hi), r| (lo.min(r.soc), hi.max(r.soc)));
    let soc = SocSummary {
        initial,
        min,
        max,
        final_soc: trace.last().map_or(initial, |r| r.soc),
        clamp_events: trace
            .iter()
            .filter(|r| r.i_applied_a.to_bits() != r.i_request_a.to_bits())
            .count() as u64,
    };
    let counters = Counters {
        steps: trace.len(),
        plant_rejected_setpoints: plant_rejected,
        controller_rejected_frames: ctrl.rejected_frames,
        setpoint_faults: ctrl.setpoint_faults,
        setpoint_divergences: soc.clamp_events as usize,
        clean_end: ctrl.clean_end,
    };
    Ok(RunMetrics {
        window_samples: scenario.window_samples,
        warmup_samples: settings.warmup_samples,
        raw,
        smoothed,
        grid,
        soc,
        counters,
    })
}

/// Run a scenario end to end over the bus.
pub fn run_scenario(scenario: &Scenario, input: &PowerSeries, options: &RunOptions) -> Result<RunOutcome, RunError> {
    let series = prepare_series(scenario, input)?;
    let (plant, ctrl) = match &options.transport {
        TransportKind::InProcess => {
            let (p, c) = inproc_pair();
            run_threaded(p, c, scenario, &series, &options.faults)?
        }
        TransportKind::Socket => {
            let (p, c) = tcp_pair()?;
            run_threaded(p, c, scenario, &series, &options.faults)?
        }
        TransportKind::SocketProcess { exe } => run_process(exe, scenario, &series, &options.faults)?,
    };
    check_controller_rows(&ctrl.log, &plant.sent, &ctrl)?;
    let metrics = metrics(scenario, &series, &plant.trace, &ctrl, plant.rejected)?;
    Ok(RunOutcome {
        series,
        mode: scenario.config.transport.mode,
        transport: options.transport.name().to_string(),
        trace: plant.trace,
        controller: ctrl,
        frames: plant.frames,
        metrics,
    })
}

/// The same closed loop with the controller called directly, no bus.
pub fn simulate_direct(
    scenario: &Scenario,
    input: &PowerSeries,
) -> Result<(Vec<PlantTraceRow>, Vec<ControllerLogRow>), RunError> {
    let cfg = &scenario.config;
    let series = prepare_series(scenario, input)?;
    let mut ctrl = ControllerState::new(scenario.window_samples, cfg.sample_period_s)
        .map_err(|e| RunError::Input(e.to_string()))?;
    let mut plant = PlantState::new(&series, &cfg.battery);
    let mut trace = Vec::with_capacity(series.len());
    let mut log = Vec::with_capacity(series.len());
    let mut sensor = plant.sensor();
    loop {
        let k = plant.k;
        let ctrl_k = ctrl.k();
        let out = ctrl
            .step(sensor.p_pv_w, sensor.v_batt_v)
            .map_err(|e| RunError::Input(format!("step {k}: {e}")))?;
        log.push(ControllerLogRow {
            k: ctrl_k,
            p_pv_w: sensor.p_pv_w,
            v_batt_v: sensor.v_batt_v,
            p_hat_w: out.p_hat_w,
            p_batt_w: out.p_batt_w,
            i_set_a: out.i_set_a,
        });
        let (row, next) = plant.step(&series, out.i_set_a, cfg).map_err(|e| plant_error(k, e))?;
        trace.push(row);
        match next {
            Some(s) => sensor = s,
            None => break,
        }
    }
    Ok((trace, log))
}

/// Provenance written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub config_sha256: String,
    pub input_sha256: String,
    pub seed: u64,
    pub transport: String,
    pub mode: SessionMode,
    pub created_at: String,
}

impl RunMetadata {
    pub fn new(scenario: &Scenario, input: &PowerSeries, outcome: &RunOutcome, created_at: String) -> Self {
        let config = serde_json::to_vec(&scenario.config).unwrap_or_default();
        let mut h = Sha256::new();
        for p in input.samples() {
            h.update(p.to_le_bytes());
        }
        h.update(input.sample_period_s().to_le_bytes());
        h.update(input.rated_power_w().to_le_bytes());
        h.update(input.start_time_s().to_le_bytes());
        Self {
            tool_version: crate::VERSION.to_string(),
            config_sha256: hex::encode(Sha256::digest(&config)),
            input_sha256: hex::encode(h.finalize()),
            seed: scenario.config.seed,
            transport: outcome.transport.clone(),
            mode: outcome.mode,
            created_at,
        }
    }
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut io::BufWriter<&mut tempfile::NamedTempFile>) -> io::Result<()>,
{
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(&mut tmp);
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub const ARTIFACT_FILES: &[&str] = &[
    "plant_trace.csv",
    "controller_log.csv",
    "metrics.json",
    "rates_raw.tsv",
    "rates_smoothed.tsv",
    "rates_grid.tsv",
    "histogram_raw.csv",
    "histogram_smoothed.csv",
    "histogram_grid.csv",
    "frames.hex",
    "metadata.json",
];

/// Write every artifact of a run into `dir`, creating it if needed.
pub fn write_artifacts(outcome: &RunOutcome, meta: &RunMetadata, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let m = &outcome.metrics;
    write_atomic(&dir.join("plant_trace.csv"), |w| write_plant_trace(&outcome.trace, w))?;
    write_atomic(&dir.join("controller_log.csv"), |w| write_controller_log(&outcome.controller.log, w))?;
    write_atomic(&dir.join("metrics.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, m)?;
        writeln!(w)
    })?;
    for (name, report) in [("raw", &m.raw), ("smoothed", &m.smoothed), ("grid", &m.grid)] {
        write_atomic(&dir.join(format!("rates_{name}.tsv")), |w| report.rates.write_tsv(w))?;
        write_atomic(&dir.join(format!("histogram_{name}.csv")), |w| report.histogram.write_csv(w))?;
    }
    write_atomic(&dir.join("frames.hex"), |w| outcome.frames.write_hex(w, outcome.mode))?;
    write_atomic(&dir.join("metadata.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, meta)?;
        writeln!(w)
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BatteryParams, ScenarioConfig, VoltageModel};
    use crate::synth::{synth_pv, ClearSky, SynthProfile, SynthSpec};

    fn scenario(window_s: f64) -> Scenario {
        crate::domain::validate_scenario(ScenarioConfig {
            window_s,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    fn cloudy(duration_s: f64) -> PowerSeries {
        synth_pv(&SynthSpec {
            profile: SynthProfile::cloud_random(3),
            duration_s,
            sample_period_s: 5.0,
            rated_w: 1000.0,
            clear: ClearSky::default(),
        })
        .unwrap()
    }

    #[test]
    fn bus_run_matches_direct_composition() {
        let sc = scenario(300.0);
        let pv = cloudy(3600.0);
        let out = run_scenario(&sc, &pv, &RunOptions::default()).unwrap();
        let (trace, log) = simulate_direct(&sc, &pv).unwrap();
        assert_eq!(out.trace, trace);
        assert_eq!(out.controller.log, log);
        assert!(out.controller.clean_end);
        assert_eq!(out.metrics.counters.steps, 720);
    }

    #[test]
    fn frame_log_passes_protocol_check_and_tampering_is_caught() {
        let sc = scenario(300.0);
        let out = run_scenario(&sc, &cloudy(600.0), &RunOptions::default()).unwrap();
        let check = out.frames.check_protocol();
        assert!(check.ok(), "{:?}", check.issues);
        assert_eq!(check.exchanges, 120);

        let mut log = out.frames.clone();
        log.entries.swap(2, 4);
        assert!(!log.check_protocol().ok());
        let mut log = out.frames.clone();
        log.entries.pop();
        assert!(!log.check_protocol().ended);
    }

    #[test]
    fn socket_thread_matches_inproc() {
        let sc = scenario(300.0);
        let pv = cloudy(1800.0);
        let a = run_scenario(&sc, &pv, &RunOptions::default()).unwrap();
        let b = run_scenario(
            &sc,
            &pv,
            &RunOptions {
                transport: TransportKind::Socket,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn period_mismatch_is_an_input_error() {
        let sc = scenario(300.0);
        let pv = PowerSeries::new(vec![1.0; 100], 10.0, 10.0, 0.0).unwrap();
        let err = run_scenario(&sc, &pv, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn corrupted_sensor_frame_is_rejected_not_fatal() {
        let sc = scenario(300.0);
        let pv = cloudy(1800.0);
        let out = run_scenario(
            &sc,
            &pv,
            &RunOptions {
                faults: FaultPlan {
                    sensor_flips: vec![(10, 200)],
                    setpoint_flips: vec![],
                },
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.metrics.counters.controller_rejected_frames, 1);
        let check = out.frames.check_protocol();
        assert!(check.ok(), "{:?}", check.issues);
        assert_eq!(check.corrupted_frames, 0, "the plant logs what it sent");
        assert_eq!(out.trace[10].i_request_a, 0.0);
        assert_eq!(out.controller.log.len(), out.trace.len() - 1);
    }

    #[test]
    fn corrupted_setpoint_frame_applies_zero() {
        let sc = scenario(300.0);
        let pv = cloudy(1800.0);
        let out = run_scenario(
            &sc,
            &pv,
            &RunOptions {
                faults: FaultPlan {
                    sensor_flips: vec![],
                    setpoint_flips: vec![(20, 170)],
                },
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.metrics.counters.plant_rejected_setpoints, 1);
        assert_eq!(out.trace[20].i_request_a, 0.0);
    }

    #[test]
    fn soc_limits_hold_under_a_small_battery() {
        let mut cfg = ScenarioConfig {
            window_s: 1800.0,
            ..ScenarioConfig::default()
        };
        cfg.battery = BatteryParams {
            capacity_wh: 50.0,
            ..BatteryParams::default()
        };
        let sc = crate::domain::validate_scenario(cfg).unwrap();
        let out = run_scenario(&sc, &cloudy(7200.0), &RunOptions::default()).unwrap();
        let b = &sc.config.battery;
        assert!(out.trace.iter().all(|r| r.soc >= b.soc_min && r.soc <= b.soc_max));
        assert!(out.metrics.soc.clamp_events > 0);
    }

    #[test]
    fn free_running_with_latency_delays_setpoints() {
        let mut cfg = ScenarioConfig {
            window_s: 300.0,
            ..ScenarioConfig::default()
        };
        cfg.transport.mode = SessionMode::FreeRunning;
        cfg.transport.latency_ms = 6000;
        cfg.battery.voltage_model = VoltageModel::Constant;
        let sc = crate::domain::validate_scenario(cfg).unwrap();
        let out = run_scenario(&sc, &cloudy(1800.0), &RunOptions::default()).unwrap();
        // Two 6 s hops push each setpoint past the next two 5 s samples.
        assert_eq!(out.trace[0].i_request_a, 0.0);
        assert_eq!(out.trace[1].i_request_a, 0.0);
        assert_eq!(out.trace[2].i_request_a, out.controller.log[0].i_set_a);
    }

    #[test]
    fn artifacts_are_written() {
        let sc = scenario(300.0);
        let pv = cloudy(1800.0);
        let out = run_scenario(&sc, &pv, &RunOptions::default()).unwrap();
        let meta = RunMetadata::new(&sc, &pv, &out, "fixed".into());
        let dir = tempfile::tempdir().unwrap();
        write_artifacts(&out, &meta, dir.path()).unwrap();
        for f in ARTIFACT_FILES {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let m: RunMetrics = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m, out.metrics);
    }
}
