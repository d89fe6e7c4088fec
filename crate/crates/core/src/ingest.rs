//! Delimited-text PV power ingestion with optional zero-order-hold resampling.

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::PathBuf;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PowerSeries, SeriesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// Seconds (fractional allowed) since the Unix epoch or any fixed origin.
    #[default]
    EpochS,
    /// RFC 3339 / ISO-8601; naive timestamps are taken as UTC.
    Iso8601,
    /// Integer sample index; time = index * sample period.
    SampleIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    None,
    ZeroOrderHold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatedPolicy {
    Configured(f64),
    SeriesMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSpec {
    pub path: PathBuf,
    pub time_column: String,
    pub power_column: String,
    pub timestamp_format: TimestampFormat,
    pub resample: Resample,
    /// Target grid for resampling; for unresampled input it must match the data.
    pub sample_period_s: Option<f64>,
    pub clamp_negative: bool,
    pub clamp_over_rated: bool,
    pub rated: RatedPolicy,
    pub delimiter: u8,
}

impl IngestSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            time_column: "time_s".into(),
            power_column: "power_w".into(),
            timestamp_format: TimestampFormat::EpochS,
            resample: Resample::None,
            sample_period_s: None,
            clamp_negative: false,
            clamp_over_rated: false,
            rated: RatedPolicy::SeriesMax,
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("{} unparseable row(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    BadRows(Vec<RowError>),
    #[error("no data rows")]
    Empty,
    #[error("line {line}: timestamp does not increase")]
    NonMonotone { line: u64 },
    #[error("line {line}: spacing {got} s differs from sample period {expected} s")]
    NonUniform { line: u64, got: f64, expected: f64 },
    #[error("sample period is required for {0}")]
    PeriodRequired(&'static str),
    #[error("line {line}: power {value} W is negative (enable clamp_negative to zero it)")]
    Negative { line: u64, value: f64 },
    #[error("line {line}: power {value} W exceeds rating {rated} W")]
    OverRated { line: u64, value: f64, rated: f64 },
    #[error(transparent)]
    Series(#[from] SeriesError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub series: PowerSeries,
    pub rows: usize,
    pub clamped_negative: usize,
    pub clamped_over_rated: usize,
    /// Grid points filled by holding an earlier observation.
    pub held: usize,
}

fn parse_time(raw: &str, format: TimestampFormat, period: Option<f64>) -> Result<f64, String> {
    let raw = raw.trim();
    match format {
        TimestampFormat::EpochS => raw.parse::<f64>().map_err(|e| format!("time {raw:?}: {e}")),
        TimestampFormat::SampleIndex => {
            let idx: u64 = raw.parse().map_err(|e| format!("index {raw:?}: {e}"))?;
            Ok(idx as f64 * period.unwrap_or(1.0))
        }
        TimestampFormat::Iso8601 => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                return Ok(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9);
            }
            for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
                if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
                    let utc = dt.and_utc();
                    return Ok(utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9);
                }
            }
            Err(format!("timestamp {raw:?} is not ISO-8601"))
        }
    }
}

pub fn ingest_csv(spec: &IngestSpec) -> Result<IngestReport, IngestError> {
    let file = File::open(&spec.path).map_err(|source| IngestError::Io {
        path: spec.path.display().to_string(),
        source,
    })?;
    ingest_reader(file, spec)
}

pub fn ingest_reader<R: Read>(reader: R, spec: &IngestSpec) -> Result<IngestReport, IngestError> {
    if spec.timestamp_format == TimestampFormat::SampleIndex && spec.sample_period_s.is_none() {
        return Err(IngestError::PeriodRequired("sample-index timestamps"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let t_col = col(&spec.time_column)?;
    let p_col = col(&spec.power_column)?;

    let mut bad = Vec::new();
    let mut obs: Vec<(u64, f64, f64)> = Vec::new();
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                bad.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let t = record
            .get(t_col)
            .ok_or_else(|| "missing time field".to_string())
            .and_then(|s| parse_time(s, spec.timestamp_format, spec.sample_period_s));
        let p = record
            .get(p_col)
            .ok_or_else(|| "missing power field".to_string())
            .and_then(|s| s.parse::<f64>().map_err(|e| format!("power {s:?}: {e}")))
            .and_then(|p| if p.is_finite() { Ok(p) } else { Err(format!("power {p} is not finite")) });
        match (t, p) {
            (Ok(t), Ok(p)) if t.is_finite() => obs.push((line, t, p)),
            (Ok(t), Ok(_)) => bad.push(RowError {
                line,
                message: format!("time {t} is not finite"),
            }),
            (Err(message), _) | (_, Err(message)) => bad.push(RowError { line, message }),
        }
    }
    if !bad.is_empty() {
        return Err(IngestError::BadRows(bad));
    }
    if obs.is_empty() {
        return Err(IngestError::Empty);
    }
    let rows = obs.len();

    let mut clamped_negative = 0;
    for (line, _, p) in obs.iter_mut() {
        if *p < 0.0 {
            if !spec.clamp_negative {
                return Err(IngestError::Negative { line: *line, value: *p });
            }
            *p = 0.0;
            clamped_negative += 1;
        }
    }

    let (samples, period, held) = match spec.resample {
        Resample::None => {
            for w in obs.windows(2) {
                if w[1].1 <= w[0].1 {
                    return Err(IngestError::NonMonotone { line: w[1].0 });
                }
            }
            let period = match (spec.sample_period_s, obs.len()) {
                (Some(p), _) => p,
                (None, 1) => return Err(IngestError::PeriodRequired("a single-row series")),
                (None, _) => obs[1].1 - obs[0].1,
            };
            for w in obs.windows(2) {
                let gap = w[1].1 - w[0].1;
                if (gap - period).abs() > 1e-6 * period {
                    return Err(IngestError::NonUniform {
                        line: w[1].0,
                        got: gap,
                        expected: period,
                    });
                }
            }
            (obs.iter().map(|o| o.2).collect::<Vec<_>>(), period, 0)
        }
        Resample::ZeroOrderHold => {
            let period = spec
                .sample_period_s
                .ok_or(IngestError::PeriodRequired("zero-order-hold resampling"))?;
            // Stable sort keeps file order among equal timestamps; the last one wins.
            obs.sort_by(|a, b| a.1.total_cmp(&b.1));
            zero_order_hold(&obs, period)
        }
    };

    let t0 = obs[0].1;
    let max = samples.iter().copied().fold(0.0_f64, f64::max);
    let rated = match spec.rated {
        RatedPolicy::Configured(w) => w,
        RatedPolicy::SeriesMax => max,
    };
    let mut samples = samples;
    let mut clamped_over_rated = 0;
    for (i, p) in samples.iter_mut().enumerate() {
        if *p > rated {
            if !spec.clamp_over_rated {
                return Err(IngestError::OverRated {
                    line: i as u64 + 2,
                    value: *p,
                    rated,
                });
            }
            *p = rated;
            clamped_over_rated += 1;
        }
    }
    let series = PowerSeries::new(samples, period, rated, t0)?;
    Ok(IngestReport {
        series,
        rows,
        clamped_negative,
        clamped_over_rated,
        held,
    })
}

fn zero_order_hold(obs: &[(u64, f64, f64)], period: f64) -> (Vec<f64>, f64, usize) {
    let t0 = obs[0].1;
    let t_end = obs[obs.len() - 1].1;
    let n = ((t_end - t0) / period + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut held = 0;
    let mut j = 0;
    for k in 0..n {
        let t = t0 + k as f64 * period;
        let mut fresh = false;
        while j + 1 < obs.len() && obs[j + 1].1 <= t + 1e-9 * period {
            j += 1;
            fresh = true;
        }
        if k > 0 && !fresh && (obs[j].1 - t).abs() > 1e-9 * period {
            held += 1;
        }
        out.push(obs[j].2);
    }
    (out, period, held)
}

/// Write a series as `time_s,power_w`.
pub fn write_series_csv<W: Write>(series: &PowerSeries, mut out: W) -> io::Result<()> {
    writeln!(out, "time_s,power_w")?;
    for (k, p) in series.samples().iter().enumerate() {
        writeln!(out, "{},{}", series.time_at(k), p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> IngestSpec {
        IngestSpec::new("<mem>")
    }

    fn ingest(text: &str, spec: &IngestSpec) -> Result<IngestReport, IngestError> {
        ingest_reader(text.as_bytes(), spec)
    }

    #[test]
    fn three_uniform_rows() {
        let r = ingest("time_s,power_w\n0,1000\n5,2000\n10,3000\n", &spec()).unwrap();
        assert_eq!(r.series.samples(), &[1000.0, 2000.0, 3000.0]);
        assert_eq!(r.series.sample_period_s(), 5.0);
        assert_eq!(r.series.rated_power_w(), 3000.0);
    }

    #[test]
    fn zero_order_hold_fills_gap() {
        let s = IngestSpec {
            resample: Resample::ZeroOrderHold,
            sample_period_s: Some(5.0),
            ..spec()
        };
        let r = ingest("time_s,power_w\n0,10\n10,20\n", &s).unwrap();
        assert_eq!(r.series.samples(), &[10.0, 10.0, 20.0]);
        assert_eq!(r.held, 1);
    }

    #[test]
    fn negative_power_is_clamped_and_counted() {
        let s = IngestSpec {
            clamp_negative: true,
            ..spec()
        };
        let r = ingest("time_s,power_w\n0,-3\n5,4\n10,-0.5\n", &s).unwrap();
        assert_eq!(r.series.samples(), &[0.0, 4.0, 0.0]);
        assert_eq!(r.clamped_negative, 2);
    }

    #[test]
    fn negative_power_without_clamp_is_an_error() {
        assert!(matches!(
            ingest("time_s,power_w\n0,-3\n5,4\n", &spec()),
            Err(IngestError::Negative { line: 2, .. })
        ));
    }

    #[test]
    fn non_monotone_without_resampling() {
        assert!(matches!(
            ingest("time_s,power_w\n0,1\n10,2\n5,3\n", &spec()),
            Err(IngestError::NonMonotone { line: 4 })
        ));
    }

    #[test]
    fn unparseable_rows_carry_line_numbers() {
        let err = ingest("time_s,power_w\n0,1\nfive,2\n10,x\n15,4\n", &spec()).unwrap_err();
        match err {
            IngestError::BadRows(rows) => {
                assert_eq!(rows.iter().map(|r| r.line).collect::<Vec<_>>(), vec![3, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn iso_timestamps_and_named_columns() {
        let s = IngestSpec {
            time_column: "timestamp".into(),
            power_column: "pv_kw".into(),
            timestamp_format: TimestampFormat::Iso8601,
            rated: RatedPolicy::Configured(10.0),
            ..spec()
        };
        let text = "timestamp,irradiance,pv_kw\n2024-06-01T12:00:00Z,800,4.0\n2024-06-01T12:00:05Z,810,4.5\n2024-06-01 12:00:10,790,4.25\n";
        let r = ingest(text, &s).unwrap();
        assert_eq!(r.series.samples(), &[4.0, 4.5, 4.25]);
        assert_eq!(r.series.sample_period_s(), 5.0);
        assert_eq!(r.series.start_time_s(), 1_717_243_200.0);
    }

    #[test]
    fn over_rated_needs_explicit_clamp() {
        let s = IngestSpec {
            rated: RatedPolicy::Configured(5.0),
            ..spec()
        };
        assert!(matches!(
            ingest("time_s,power_w\n0,1\n5,6\n", &s),
            Err(IngestError::OverRated { .. })
        ));
        let s = IngestSpec {
            clamp_over_rated: true,
            ..s
        };
        let r = ingest("time_s,power_w\n0,1\n5,6\n", &s).unwrap();
        assert_eq!(r.series.samples(), &[1.0, 5.0]);
        assert_eq!(r.clamped_over_rated, 1);
    }

    #[test]
    fn missing_column() {
        assert!(matches!(
            ingest("t,p\n0,1\n", &spec()),
            Err(IngestError::MissingColumn(c)) if c == "time_s"
        ));
    }

    #[test]
    fn written_series_reads_back() {
        let series = PowerSeries::new(vec![0.0, 0.1, 999.999], 5.0, 1000.0, 60.0).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&series, &mut buf).unwrap();
        let s = IngestSpec {
            rated: RatedPolicy::Configured(1000.0),
            ..spec()
        };
        assert_eq!(ingest(std::str::from_utf8(&buf).unwrap(), &s).unwrap().series, series);
    }
}
