use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pvsmooth::bus::{FrameLog, SessionMode};
use pvsmooth::domain::{PowerSeries, Scenario, ScenarioError};
use pvsmooth::ingest::{ingest_csv, write_series_csv, IngestSpec, RatedPolicy, Resample, TimestampFormat};
use pvsmooth::ramp::{ramp_report, RampAlignment, RampSettings};
use pvsmooth::runner::{
    controller_process, run_scenario, write_artifacts, write_atomic, FaultPlan, RunError, RunMetadata, RunOptions,
    TransportKind,
};
use pvsmooth::synth::{synth_pv, ClearSky, SynthProfile, SynthSpec};

const EXIT_INPUT: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;

#[derive(Parser)]
#[command(name = "pvsmooth", version, about = "PV ramp-rate smoothing co-simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario against a PV series and write all artifacts.
    Run(RunArgs),
    /// Check a scenario file and list every problem in it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Normalize a PV CSV into `time_s,power_w` on a uniform grid.
    Ingest {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic PV profile.
    Synth(SynthArgs),
    /// Ramp-rate report for a single series.
    Metrics(MetricsArgs),
    /// Check pairing, sequencing and delivery order in a frames.hex log.
    ProtocolCheck {
        #[arg(long)]
        frames: PathBuf,
    },
    /// Serve the controller side of a session (spawned by `run --transport socket-process`).
    #[command(hide = true)]
    Controller {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        window_samples: usize,
        #[arg(long)]
        sample_period: f64,
        #[arg(long, value_enum, default_value = "lockstep")]
        mode: ModeArg,
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Delimited text file with a time column and a power column.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "time_s")]
    time_column: String,
    #[arg(long, default_value = "power_w")]
    power_column: String,
    #[arg(long, value_enum, default_value = "epoch-s")]
    timestamp_format: TimestampArg,
    /// Resample onto this grid (seconds) with zero-order hold.
    #[arg(long)]
    resample: Option<f64>,
    /// Expected sample period (seconds) when not resampling.
    #[arg(long, conflicts_with = "resample")]
    period: Option<f64>,
    #[arg(long)]
    clamp_negative: bool,
    #[arg(long)]
    clamp_over_rated: bool,
    /// Nameplate in watts; defaults to the series maximum.
    #[arg(long)]
    rated: Option<f64>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

impl InputArgs {
    fn spec(&self) -> IngestSpec {
        IngestSpec {
            path: self.input.clone(),
            time_column: self.time_column.clone(),
            power_column: self.power_column.clone(),
            timestamp_format: match self.timestamp_format {
                TimestampArg::EpochS => TimestampFormat::EpochS,
                TimestampArg::Iso8601 => TimestampFormat::Iso8601,
                TimestampArg::SampleIndex => TimestampFormat::SampleIndex,
            },
            resample: if self.resample.is_some() {
                Resample::ZeroOrderHold
            } else {
                Resample::None
            },
            sample_period_s: self.resample.or(self.period),
            clamp_negative: self.clamp_negative,
            clamp_over_rated: self.clamp_over_rated,
            rated: self.rated.map_or(RatedPolicy::SeriesMax, RatedPolicy::Configured),
            delimiter: self.delimiter as u8,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TimestampArg {
    EpochS,
    Iso8601,
    SampleIndex,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lockstep,
    FreeRunning,
}

impl From<ModeArg> for SessionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lockstep => SessionMode::Lockstep,
            ModeArg::FreeRunning => SessionMode::FreeRunning,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
    SocketProcess,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: TransportArg,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt a sensor frame in flight, as FRAME:BIT (zero-based).
    #[arg(long, value_parser = parse_flip)]
    flip_sensor: Vec<(usize, usize)>,
    /// Corrupt a setpoint frame in flight, as FRAME:BIT (zero-based).
    #[arg(long, value_parser = parse_flip)]
    flip_setpoint: Vec<(usize, usize)>,
}

fn parse_flip(s: &str) -> Result<(usize, usize), String> {
    let (f, b) = s.split_once(':').ok_or("expected FRAME:BIT")?;
    Ok((
        f.parse().map_err(|e| format!("frame: {e}"))?,
        b.parse().map_err(|e| format!("bit: {e}"))?,
    ))
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Clear,
    CloudSquare,
    CloudRandom,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 7200.0)]
    duration: f64,
    #[arg(long, default_value_t = 5.0)]
    period: f64,
    #[arg(long, default_value_t = 1000.0)]
    rated: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    peak_fraction: f64,
    /// Length of the daylight bell in seconds; defaults to the duration.
    #[arg(long)]
    day_length: Option<f64>,
    /// Where the window starts inside the daylight bell, in seconds.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    /// Cloud depth for the square profile.
    #[arg(long, default_value_t = 0.8)]
    depth: f64,
    /// Square-wave period in seconds.
    #[arg(long, default_value_t = 600.0)]
    square_period: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 60.0)]
    interval: f64,
    #[arg(long, default_value_t = 5.0)]
    limit: f64,
    #[arg(long)]
    sliding: bool,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Leading samples excluded from the warm-up compliance verdict.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Write report.json, rates.tsv and histogram.csv here instead of printing JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.to_string(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::load(path).map_err(|e| match &e {
        ScenarioError::Invalid(issues) => Failure::input(format!(
            "{} is invalid:\n{}",
            path.display(),
            issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
        )),
        _ => Failure::input(e),
    })
}

fn load_series(input: &InputArgs) -> Result<PowerSeries, Failure> {
    let report = ingest_csv(&input.spec()).map_err(Failure::input)?;
    if report.clamped_negative + report.clamped_over_rated + report.held > 0 {
        eprintln!(
            "ingest: {} rows, {} negative clamped, {} over-rated clamped, {} grid points held",
            report.rows, report.clamped_negative, report.clamped_over_rated, report.held
        );
    }
    Ok(report.series)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.config.seed = seed;
    }
    let mut input = args.input;
    if input.resample.is_none() && input.period.is_none() {
        input.period = Some(scenario.config.sample_period_s);
    }
    let series = load_series(&input)?;
    let transport = match args.transport {
        TransportArg::Inproc => TransportKind::InProcess,
        TransportArg::Socket => TransportKind::Socket,
        TransportArg::SocketProcess => TransportKind::SocketProcess {
            exe: std::env::current_exe()?,
        },
    };
    let options = RunOptions {
        transport,
        faults: FaultPlan {
            sensor_flips: args.flip_sensor,
            setpoint_flips: args.flip_setpoint,
        },
    };
    let outcome = run_scenario(&scenario, &series, &options)?;
    let meta = RunMetadata::new(&scenario, &series, &outcome, chrono::Utc::now().to_rfc3339());
    write_artifacts(&outcome, &meta, &args.out)?;
    let m = &outcome.metrics;
    println!(
        "raw max |RR| {:.3} %/min, smoothed {:.3}, grid {:.3}; limit {} %/min after warm-up: {}",
        m.raw.max_abs_rr,
        m.smoothed.max_abs_rr,
        m.grid.max_abs_rr,
        scenario.config.ramp_limit_pct_per_min,
        if m.grid.compliance_after_warmup.pass { "pass" } else { "fail" }
    );
    println!(
        "SOC {:.4} -> {:.4} (range {:.4}..{:.4}), {} clamped steps; artifacts in {}",
        m.soc.initial,
        m.soc.final_soc,
        m.soc.min,
        m.soc.max,
        m.soc.clamp_events,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let profile = match a.profile {
        ProfileArg::Clear => SynthProfile::Clear,
        ProfileArg::CloudSquare => SynthProfile::CloudSquare {
            depth: a.depth,
            period_s: a.square_period,
        },
        ProfileArg::CloudRandom => SynthProfile::cloud_random(a.seed),
    };
    let series = synth_pv(&SynthSpec {
        profile,
        duration_s: a.duration,
        sample_period_s: a.period,
        rated_w: a.rated,
        clear: ClearSky {
            peak_fraction: a.peak_fraction,
            day_length_s: a.day_length,
            offset_s: a.offset,
        },
    })
    .map_err(Failure::input)?;
    write_atomic(&a.out, |w| write_series_csv(&series, w))?;
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), Failure> {
    let series = load_series(&a.input)?;
    let settings = RampSettings {
        interval_s: a.interval,
        alignment: if a.sliding {
            RampAlignment::Sliding
        } else {
            RampAlignment::NonOverlapping
        },
        limit_pct_per_min: a.limit,
        bin_width: a.bin_width,
        warmup_samples: a.warmup,
    };
    let report = ramp_report(
        series.samples(),
        series.sample_period_s(),
        series.rated_power_w(),
        series.start_time_s(),
        &settings,
    )
    .map_err(Failure::input)?;
    match a.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("report.json"), |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                writeln!(w)
            })?;
            write_atomic(&dir.join("rates.tsv"), |w| report.rates.write_tsv(w))?;
            write_atomic(&dir.join("histogram.csv"), |w| report.histogram.write_csv(w))?;
        }
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report).map_err(io::Error::from)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn cmd_protocol_check(path: &Path) -> Result<(), Failure> {
    let file = File::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let log = FrameLog::read_hex(BufReader::new(file)).map_err(Failure::input)?;
    let report = log.check_protocol();
    println!(
        "{} exchanges, {} corrupted frames, END {}",
        report.exchanges,
        report.corrupted_frames,
        if report.ended { "present" } else { "missing" }
    );
    for issue in &report.issues {
        println!("  {issue}");
    }
    if report.ok() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_PROTOCOL,
            message: format!("{} protocol issue(s)", report.issues.len().max(1)),
        })
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            println!(
                "ok: window {} samples, ramp stride {} samples",
                s.window_samples, s.rr_stride_samples
            );
            Ok(())
        }
        Cmd::Ingest { input, out } => {
            let series = load_series(&input)?;
            write_atomic(&out, |w| write_series_csv(&series, w))?;
            Ok(())
        }
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::ProtocolCheck { frames } => cmd_protocol_check(&frames),
        Cmd::Controller {
            connect,
            window_samples,
            sample_period,
            mode,
            log,
        } => {
            let summary = controller_process(connect.as_str(), window_samples, sample_period, mode.into(), &log);
            println!("{}", serde_json::to_string(&summary).map_err(io::Error::from)?);
            match summary.error {
                None => Ok(()),
                Some(code) => Err(Failure {
                    code: code as u8,
                    message: "controller session failed".into(),
                }),
            }
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pvsmooth: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
