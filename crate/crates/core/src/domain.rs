//! Shared value types: power series, battery and supply parameters, and the
//! scenario configuration that ties a run together.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{SessionMode, TransportConfig};
use crate::ramp::RampAlignment;

/// Relative tolerance used when checking that a duration lies on the sample grid.
const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("series is empty")]
    Empty,
    #[error("sample period must be finite and > 0, got {0}")]
    BadPeriod(f64),
    #[error("rated power must be finite and > 0, got {0}")]
    BadRating(f64),
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample {index} = {value} W lies outside [0, {rated}] W")]
    OutOfRange { index: usize, value: f64, rated: f64 },
    #[error("scaling produced a non-finite sample at index {index}")]
    NonFiniteScale { index: usize },
}

/// A uniformly sampled PV power trace.
///
/// Timestamps are never stored; sample `k` sits at
/// `start_time_s + k * sample_period_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    samples: Vec<f64>,
    sample_period_s: f64,
    rated_power_w: f64,
    start_time_s: f64,
}

impl PowerSeries {
    pub fn new(
        samples: Vec<f64>,
        sample_period_s: f64,
        rated_power_w: f64,
        start_time_s: f64,
    ) -> Result<Self, SeriesError> {
        if samples.is_empty() {
            return Err(SeriesError::Empty);
        }
        if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
            return Err(SeriesError::BadPeriod(sample_period_s));
        }
        if !(rated_power_w.is_finite() && rated_power_w > 0.0) {
            return Err(SeriesError::BadRating(rated_power_w));
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() {
                return Err(SeriesError::NonFinite { index });
            }
            if !(0.0..=rated_power_w).contains(&value) {
                return Err(SeriesError::OutOfRange {
                    index,
                    value,
                    rated: rated_power_w,
                });
            }
        }
        Ok(Self {
            samples,
            sample_period_s,
            rated_power_w,
            start_time_s,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_period_s(&self) -> f64 {
        self.sample_period_s
    }

    pub fn rated_power_w(&self) -> f64 {
        self.rated_power_w
    }

    pub fn start_time_s(&self) -> f64 {
        self.start_time_s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.start_time_s + k as f64 * self.sample_period_s
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 * self.sample_period_s
    }
}

/// Rescale a series to a new nameplate rating.
///
/// Ramp rates are normalized by the rating, so they are unaffected.
pub fn scale_series(src: &PowerSeries, target_rated_w: f64) -> Result<PowerSeries, SeriesError> {
    if !(target_rated_w.is_finite() && target_rated_w > 0.0) {
        return Err(SeriesError::BadRating(target_rated_w));
    }
    if target_rated_w == src.rated_power_w {
        return Ok(src.clone());
    }
    let factor = target_rated_w / src.rated_power_w;
    let mut samples = Vec::with_capacity(src.samples.len());
    for (index, &p) in src.samples.iter().enumerate() {
        let scaled = p * factor;
        if !scaled.is_finite() {
            return Err(SeriesError::NonFiniteScale { index });
        }
        // Rounding in `factor` can push the top sample a hair over the new rating.
        samples.push(scaled.min(target_rated_w));
    }
    Ok(PowerSeries {
        samples,
        sample_period_s: src.sample_period_s,
        rated_power_w: target_rated_w,
        start_time_s: src.start_time_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoltageModel {
    /// Open-circuit voltage fixed at the nominal voltage.
    Constant,
    /// Open-circuit voltage linear in SOC between `v_min_v` and `v_max_v`.
    #[default]
    LinearOcv,
}

/// Equivalent parameters of the battery stack seen by the supply.
///
/// Defaults describe two 1.2 kWh, 26.5 V LFP batteries wired in series,
/// collapsed into one 2.4 kWh / 53 V equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity_wh: f64,
    pub nominal_voltage_v: f64,
    pub v_min_v: f64,
    pub v_max_v: f64,
    pub internal_resistance_ohm: f64,
    pub current_limit_a: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub coulombic_efficiency: f64,
    pub voltage_model: VoltageModel,
    /// Block current at `soc_min`/`soc_max`. When off, SOC is still held in [0, 1].
    pub enforce_soc_limits: bool,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity_wh: 2400.0,
            nominal_voltage_v: 53.0,
            v_min_v: 48.0,
            v_max_v: 58.0,
            internal_resistance_ohm: 0.05,
            current_limit_a: 50.0,
            soc_min: 0.10,
            soc_max: 0.90,
            soc_init: 0.50,
            coulombic_efficiency: 1.0,
            voltage_model: VoltageModel::LinearOcv,
            enforce_soc_limits: true,
        }
    }
}

impl BatteryParams {
    pub fn capacity_ah(&self) -> f64 {
        self.capacity_wh / self.nominal_voltage_v
    }

    pub fn open_circuit_voltage(&self, soc: f64) -> f64 {
        match self.voltage_model {
            VoltageModel::Constant => self.nominal_voltage_v,
            VoltageModel::LinearOcv => self.v_min_v + (self.v_max_v - self.v_min_v) * soc,
        }
    }
}

/// Bidirectional DC supply in series with the battery (12 kW, 0-1200 V, +/-55 A).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupplyParams {
    pub current_limit_a: f64,
}

impl Default for SupplyParams {
    fn default() -> Self {
        Self {
            current_limit_a: crate::plant::SUPPLY_HARD_LIMIT_A,
        }
    }
}

/// Where the PV nameplate comes from and whether to rescale the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PvScaling {
    /// Nameplate of the source data. `None` keeps the rating the series
    /// already carries (the ingest step defaults it to the series maximum).
    pub source_rated_w: Option<f64>,
    /// Rescale the series to this nameplate before the run.
    pub target_rated_w: Option<f64>,
}

/// Scenario as written in a scenario file. SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sample_period_s: f64,
    pub window_s: f64,
    pub ramp_limit_pct_per_min: f64,
    pub rr_interval_s: f64,
    pub rr_alignment: RampAlignment,
    pub histogram_bin_width: f64,
    pub seed: u64,
    pub scaling: PvScaling,
    pub battery: BatteryParams,
    pub supply: SupplyParams,
    pub transport: TransportConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sample_period_s: 5.0,
            window_s: 1800.0,
            ramp_limit_pct_per_min: 5.0,
            rr_interval_s: 60.0,
            rr_alignment: RampAlignment::NonOverlapping,
            histogram_bin_width: 1.0,
            seed: 0,
            scaling: PvScaling::default(),
            battery: BatteryParams::default(),
            supply: SupplyParams::default(),
            transport: TransportConfig::default(),
        }
    }
}

/// One violated constraint, addressed by its field path in the scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n{}", .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
}

impl ScenarioError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ScenarioError::Invalid(issues) => issues,
            _ => &[],
        }
    }
}

/// A checked scenario with its derived integer constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Moving-average window length N in samples.
    pub window_samples: usize,
    /// Ramp evaluation interval in samples.
    pub rr_stride_samples: usize,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|source| ScenarioError::Parse {
            path: "<string>".into(),
            source,
        })?;
        validate_scenario(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ScenarioConfig = toml::from_str(&text).map_err(|source| ScenarioError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        validate_scenario(cfg)
    }

    pub fn sample_period_s(&self) -> f64 {
        self.config.sample_period_s
    }
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn positive(&mut self, path: &str, value: f64) {
        if value.is_nan() || value <= 0.0 {
            self.push(path, format!("must be > 0, got {value}"));
        }
    }

    fn finite_positive(&mut self, path: &str, value: f64) {
        if !(value.is_finite() && value > 0.0) {
            self.push(path, format!("must be finite and > 0, got {value}"));
        }
    }

    fn fraction(&mut self, path: &str, value: f64) {
        if !(0.0..=1.0).contains(&value) {
            self.push(path, format!("must lie in [0, 1], got {value}"));
        }
    }
}

/// Integer ratio `num / den` when `num` lies on the grid of `den`.
fn grid_ratio(num: f64, den: f64) -> Option<usize> {
    if !(num.is_finite() && den.is_finite() && num > 0.0 && den > 0.0) {
        return None;
    }
    let ratio = num / den;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= GRID_TOLERANCE * rounded {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Check every scenario invariant and compute the derived constants.
///
/// All violations are collected; nothing is accepted partially.
pub fn validate_scenario(cfg: ScenarioConfig) -> Result<Scenario, ScenarioError> {
    let mut issues = Issues(Vec::new());

    issues.finite_positive("sample_period_s", cfg.sample_period_s);
    issues.finite_positive("window_s", cfg.window_s);
    issues.finite_positive("rr_interval_s", cfg.rr_interval_s);
    issues.finite_positive("histogram_bin_width", cfg.histogram_bin_width);
    if !(cfg.ramp_limit_pct_per_min.is_finite() && cfg.ramp_limit_pct_per_min >= 0.0) {
        issues.push(
            "ramp_limit_pct_per_min",
            format!("must be finite and >= 0, got {}", cfg.ramp_limit_pct_per_min),
        );
    }

    let window_samples = grid_ratio(cfg.window_s, cfg.sample_period_s);
    if window_samples.is_none() && cfg.window_s > 0.0 && cfg.sample_period_s > 0.0 {
        issues.push(
            "window_s",
            format!(
                "window not multiple of period ({} s / {} s)",
                cfg.window_s, cfg.sample_period_s
            ),
        );
    }
    let rr_stride = grid_ratio(cfg.rr_interval_s, cfg.sample_period_s);
    if rr_stride.is_none() && cfg.rr_interval_s > 0.0 && cfg.sample_period_s > 0.0 {
        issues.push(
            "rr_interval_s",
            format!(
                "ramp interval not multiple of period ({} s / {} s)",
                cfg.rr_interval_s, cfg.sample_period_s
            ),
        );
    }

    if let Some(w) = cfg.scaling.source_rated_w {
        issues.finite_positive("scaling.source_rated_w", w);
    }
    if let Some(w) = cfg.scaling.target_rated_w {
        issues.finite_positive("scaling.target_rated_w", w);
    }

    let b = &cfg.battery;
    issues.finite_positive("battery.capacity_wh", b.capacity_wh);
    issues.finite_positive("battery.nominal_voltage_v", b.nominal_voltage_v);
    issues.finite_positive("battery.v_min_v", b.v_min_v);
    issues.finite_positive("battery.v_max_v", b.v_max_v);
    if b.v_min_v.partial_cmp(&b.v_max_v) != Some(Ordering::Less) {
        issues.push("battery.v_max_v", format!("v_min_v ({}) must be < v_max_v ({})", b.v_min_v, b.v_max_v));
    } else if !(b.v_min_v..=b.v_max_v).contains(&b.nominal_voltage_v) {
        issues.push(
            "battery.nominal_voltage_v",
            format!("must lie in [v_min_v, v_max_v], got {}", b.nominal_voltage_v),
        );
    }
    if !(b.internal_resistance_ohm.is_finite() && b.internal_resistance_ohm >= 0.0) {
        issues.push(
            "battery.internal_resistance_ohm",
            format!("must be finite and >= 0, got {}", b.internal_resistance_ohm),
        );
    }
    issues.positive("battery.current_limit_a", b.current_limit_a);
    issues.fraction("battery.soc_min", b.soc_min);
    issues.fraction("battery.soc_max", b.soc_max);
    if b.soc_min.partial_cmp(&b.soc_max) != Some(Ordering::Less) {
        issues.push("battery.soc_max", format!("soc_min ({}) must be < soc_max ({})", b.soc_min, b.soc_max));
    }
    if !(b.soc_min..=b.soc_max).contains(&b.soc_init) {
        issues.push(
            "battery.soc_init",
            format!("must lie in [soc_min, soc_max], got {}", b.soc_init),
        );
    }
    if !(b.coulombic_efficiency > 0.0 && b.coulombic_efficiency <= 1.0) {
        issues.push(
            "battery.coulombic_efficiency",
            format!("must lie in (0, 1], got {}", b.coulombic_efficiency),
        );
    }

    issues.positive("supply.current_limit_a", cfg.supply.current_limit_a);

    let t = &cfg.transport;
    if !(t.jitter_ms <= t.latency_ms) {
        issues.push(
            "transport.jitter_ms",
            format!("jitter ({} ms) must not exceed latency ({} ms)", t.jitter_ms, t.latency_ms),
        );
    }
    if let Some(q) = &t.quantization {
        if !(8..=16).contains(&q.bits) {
            issues.push("transport.quantization.bits", format!("must lie in [8, 16], got {}", q.bits));
        }
        for (path, range) in [
            ("transport.quantization.power_range_w", q.power_range_w),
            ("transport.quantization.voltage_range_v", q.voltage_range_v),
            ("transport.quantization.current_range_a", q.current_range_a),
        ] {
            if let Some((lo, hi)) = range {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    issues.push(path, format!("need finite lo < hi, got [{lo}, {hi}]"));
                }
            }
        }
        if q.current_range_a.is_none() && !b.current_limit_a.is_finite() {
            issues.push(
                "transport.quantization.current_range_a",
                "required when battery.current_limit_a is unbounded",
            );
        }
    }
    if t.mode == SessionMode::FreeRunning && cfg.sample_period_s > 0.0 {
        let period_ms = cfg.sample_period_s * 1000.0;
        if (period_ms - period_ms.round()).abs() > GRID_TOLERANCE * period_ms {
            issues.push("sample_period_s", "free-running mode needs a whole-millisecond period");
        }
    }

    if !issues.0.is_empty() {
        return Err(ScenarioError::Invalid(issues.0));
    }
    Ok(Scenario {
        window_samples: window_samples.expect("checked above"),
        rr_stride_samples: rr_stride.expect("checked above"),
        config: cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_window_is_360_samples() {
        let s = validate_scenario(ScenarioConfig::default()).unwrap();
        assert_eq!(s.window_samples, 360);
        assert_eq!(s.rr_stride_samples, 12);
        assert_eq!(s.config.sample_period_s, 5.0);
        assert_eq!(s.config.ramp_limit_pct_per_min, 5.0);
    }

    #[test]
    fn window_off_grid_is_rejected() {
        let cfg = ScenarioConfig {
            window_s: 1799.0,
            ..Default::default()
        };
        let err = validate_scenario(cfg).unwrap_err();
        let issues = err.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "window_s");
        assert!(issues[0].message.contains("window not multiple of period"));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut cfg = ScenarioConfig {
            rr_interval_s: 61.0,
            ..Default::default()
        };
        cfg.battery.soc_min = 0.9;
        cfg.battery.soc_max = 0.1;
        cfg.battery.coulombic_efficiency = 0.0;
        cfg.transport.jitter_ms = 5;
        let err = validate_scenario(cfg).unwrap_err();
        let paths: Vec<_> = err.issues().iter().map(|i| i.path.as_str()).collect();
        for p in [
            "rr_interval_s",
            "battery.soc_max",
            "battery.soc_init",
            "battery.coulombic_efficiency",
            "transport.jitter_ms",
        ] {
            assert!(paths.contains(&p), "missing {p} in {paths:?}");
        }
    }

    #[test]
    fn validation_is_idempotent() {
        let s = validate_scenario(ScenarioConfig::default()).unwrap();
        let again = validate_scenario(s.config.clone()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn scenario_file_round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let s = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s.config, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Scenario::from_toml_str("window_minutes = 30\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { .. }));
    }

    #[test]
    fn scaling_is_linear() {
        let s = PowerSeries::new(vec![0.0, 2500.0, 10_000.0], 5.0, 10_000.0, 0.0).unwrap();
        let scaled = scale_series(&s, 1000.0).unwrap();
        assert_eq!(scaled.rated_power_w(), 1000.0);
        for (a, b) in s.samples().iter().zip(scaled.samples()) {
            assert!((a * 0.1 - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn scaling_to_same_rating_is_identity() {
        let s = PowerSeries::new(vec![1.0, 2.0, 3.0], 5.0, 3.0, 100.0).unwrap();
        assert_eq!(scale_series(&s, 3.0).unwrap(), s);
    }

    #[test]
    fn series_rejects_out_of_range() {
        assert_eq!(PowerSeries::new(vec![], 5.0, 1.0, 0.0), Err(SeriesError::Empty));
        assert!(matches!(
            PowerSeries::new(vec![-1.0], 5.0, 1.0, 0.0),
            Err(SeriesError::OutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            PowerSeries::new(vec![0.5, f64::NAN], 5.0, 1.0, 0.0),
            Err(SeriesError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn default_battery_matches_series_stack() {
        let b = BatteryParams::default();
        assert_eq!(b.capacity_wh, 2.0 * 1200.0);
        assert_eq!(b.nominal_voltage_v, 2.0 * 26.5);
        assert!((b.capacity_ah() - 45.283_018_867_924_53).abs() < 1e-12);
        assert_eq!(b.open_circuit_voltage(0.5), 53.0);
    }
}
