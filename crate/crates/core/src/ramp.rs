//! Ramp-rate evaluation, limit compliance and ramp-rate histograms.
//!
//! A ramp rate is the power change across an evaluation interval, normalized
//! by nameplate and expressed in percent of rating per minute:
//!
//! ```text
//! RR(t) = 100 * (P(t) - P(t - dt)) / (dt_min * P_rated)
//! ```

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::PowerSeries;

#[derive(Debug, Error, PartialEq)]
pub enum RampError {
    #[error("ramp interval {interval_s} s is not a positive multiple of the {period_s} s sample period")]
    IntervalOffGrid { interval_s: f64, period_s: f64 },
    #[error("series of {len} samples does not cover one {stride}-sample interval")]
    TooShort { len: usize, stride: usize },
    #[error("rated power must be finite and > 0, got {0}")]
    BadRating(f64),
    #[error("histogram bin width must be finite and > 0, got {0}")]
    BadBinWidth(f64),
    #[error("histogram input is empty")]
    EmptyHistogram,
    #[error("ramp rate at position {0} is not finite")]
    NonFinite(usize),
}

/// How evaluation points are laid out along the series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RampAlignment {
    /// Back-to-back intervals: points at stride, 2*stride, ...
    #[default]
    NonOverlapping,
    /// One point per sample once a full interval is available.
    Sliding,
}

/// Per-point ramp rates of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampRates {
    pub interval_s: f64,
    pub alignment: RampAlignment,
    pub sample_period_s: f64,
    pub start_time_s: f64,
    /// Stride of one interval in samples.
    pub stride: usize,
    /// Sample index closing each interval.
    pub end_index: Vec<usize>,
    pub rr_pct_per_min: Vec<f64>,
}

impl RampRates {
    pub fn len(&self) -> usize {
        self.rr_pct_per_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rr_pct_per_min.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.rr_pct_per_min)
    }

    pub fn time_at(&self, point: usize) -> f64 {
        self.start_time_s + self.end_index[point] as f64 * self.sample_period_s
    }

    /// Write `time_s<TAB>rr_pct_per_min` rows for plotting.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "time_s\trr_pct_per_min")?;
        for (i, rr) in self.rr_pct_per_min.iter().enumerate() {
            writeln!(out, "{}\t{}", self.time_at(i), rr)?;
        }
        Ok(())
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
}

fn interval_stride(interval_s: f64, period_s: f64) -> Result<usize, RampError> {
    let off_grid = RampError::IntervalOffGrid {
        interval_s,
        period_s,
    };
    if !(interval_s.is_finite() && period_s.is_finite() && interval_s > 0.0 && period_s > 0.0) {
        return Err(off_grid);
    }
    let ratio = interval_s / period_s;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * stride {
        return Err(off_grid);
    }
    Ok(stride as usize)
}

/// Ramp rates of a validated series.
pub fn ramp_rate_series(
    series: &PowerSeries,
    rr_interval_s: f64,
    alignment: RampAlignment,
) -> Result<RampRates, RampError> {
    ramp_rates(
        series.samples(),
        series.sample_period_s(),
        series.rated_power_w(),
        series.start_time_s(),
        rr_interval_s,
        alignment,
    )
}

/// Ramp rates of an arbitrary uniformly sampled trace.
///
/// Unlike [`ramp_rate_series`] the samples are not required to lie in
/// `[0, rated]`, which lets grid-side traces with clamping artefacts through.
pub fn ramp_rates(
    samples: &[f64],
    sample_period_s: f64,
    rated_power_w: f64,
    start_time_s: f64,
    rr_interval_s: f64,
    alignment: RampAlignment,
) -> Result<RampRates, RampError> {
    if !(rated_power_w.is_finite() && rated_power_w > 0.0) {
        return Err(RampError::BadRating(rated_power_w));
    }
    let stride = interval_stride(rr_interval_s, sample_period_s)?;
    if samples.len() <= stride {
        return Err(RampError::TooShort {
            len: samples.len(),
            stride,
        });
    }
    let interval_min = rr_interval_s / 60.0;
    let denom = interval_min * rated_power_w;
    let step = match alignment {
        RampAlignment::NonOverlapping => stride,
        RampAlignment::Sliding => 1,
    };
    let end_index: Vec<usize> = (stride..samples.len()).step_by(step).collect();
    let rr_pct_per_min = end_index
        .iter()
        .map(|&end| 100.0 * (samples[end] - samples[end - stride]) / denom)
        .collect();
    Ok(RampRates {
        interval_s: rr_interval_s,
        alignment,
        sample_period_s,
        start_time_s,
        stride,
        end_index,
        rr_pct_per_min,
    })
}

/// Outcome of checking ramp rates against a symmetric limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub limit_pct_per_min: f64,
    /// Points considered (after any warm-up exclusion).
    pub evaluated: usize,
    pub excluded: usize,
    pub max_abs_rr: f64,
    pub violation_count: usize,
    pub violation_fraction: f64,
    pub pass: bool,
}

/// Count points with `|RR| > limit`.
///
/// Points whose interval starts before `warmup_samples` are skipped; pass `0`
/// to evaluate everything.
pub fn compliance(rates: &RampRates, limit_pct_per_min: f64, warmup_samples: usize) -> Compliance {
    let mut evaluated = 0;
    let mut violation_count = 0;
    let mut max_abs_rr = 0.0_f64;
    for (&end, &rr) in rates.end_index.iter().zip(&rates.rr_pct_per_min) {
        if end - rates.stride < warmup_samples {
            continue;
        }
        evaluated += 1;
        max_abs_rr = max_abs_rr.max(rr.abs());
        if rr.abs() > limit_pct_per_min {
            violation_count += 1;
        }
    }
    let violation_fraction = if evaluated == 0 {
        0.0
    } else {
        violation_count as f64 / evaluated as f64
    };
    Compliance {
        limit_pct_per_min,
        evaluated,
        excluded: rates.len() - evaluated,
        max_abs_rr,
        violation_count,
        violation_fraction,
        pass: violation_count == 0,
    }
}

/// Ramp-rate distribution on bins of equal width centred on zero.
///
/// Bin `j` is centred on `j * width`. A value sitting exactly on an edge is
/// counted in the bin nearer zero, so the layout is mirror-symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (w, c) in self.edges.windows(2).zip(&self.counts) {
            writeln!(out, "{},{},{}", w[0], w[1], c)?;
        }
        Ok(())
    }
}

fn bin_index(rate: f64, width: f64) -> i64 {
    let magnitude = (rate.abs() / width - 0.5).ceil().max(0.0) as i64;
    if rate < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

pub fn histogram(rates: &[f64], bin_width: f64) -> Result<Histogram, RampError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(RampError::BadBinWidth(bin_width));
    }
    if rates.is_empty() {
        return Err(RampError::EmptyHistogram);
    }
    if let Some(pos) = rates.iter().position(|r| !r.is_finite()) {
        return Err(RampError::NonFinite(pos));
    }
    let indices: Vec<i64> = rates.iter().map(|&r| bin_index(r, bin_width)).collect();
    let half = indices.iter().map(|i| i.abs()).max().unwrap_or(0);
    let bins = (2 * half + 1) as usize;
    let edges = (0..=bins)
        .map(|e| (e as i64 - half) as f64 * bin_width - 0.5 * bin_width)
        .collect();
    let mut counts = vec![0u64; bins];
    for i in indices {
        counts[(i + half) as usize] += 1;
    }
    Ok(Histogram {
        bin_width,
        edges,
        counts,
    })
}

/// Settings for a full ramp report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSettings {
    pub interval_s: f64,
    pub alignment: RampAlignment,
    pub limit_pct_per_min: f64,
    pub bin_width: f64,
    pub warmup_samples: usize,
}

/// Rates plus statistics, verdicts with and without warm-up, and histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampReport {
    pub rated_power_w: f64,
    pub rates: RampRates,
    pub max_abs_rr: f64,
    pub violation_count: usize,
    pub violation_fraction: f64,
    pub histogram: Histogram,
    /// Leading samples flagged as warm-up.
    pub warmup_skipped: usize,
    pub compliance: Compliance,
    pub compliance_after_warmup: Compliance,
}

impl RampReport {
    pub fn from_rates(rates: RampRates, rated_power_w: f64, settings: &RampSettings) -> Result<Self, RampError> {
        let histogram = histogram(&rates.rr_pct_per_min, settings.bin_width)?;
        let all = compliance(&rates, settings.limit_pct_per_min, 0);
        let after = compliance(&rates, settings.limit_pct_per_min, settings.warmup_samples);
        Ok(Self {
            rated_power_w,
            max_abs_rr: all.max_abs_rr,
            violation_count: all.violation_count,
            violation_fraction: all.violation_fraction,
            histogram,
            warmup_skipped: settings.warmup_samples,
            compliance: all,
            compliance_after_warmup: after,
            rates,
        })
    }
}

pub fn ramp_report(
    samples: &[f64],
    sample_period_s: f64,
    rated_power_w: f64,
    start_time_s: f64,
    settings: &RampSettings,
) -> Result<RampReport, RampError> {
    let rates = ramp_rates(
        samples,
        sample_period_s,
        rated_power_w,
        start_time_s,
        settings.interval_s,
        settings.alignment,
    )?;
    RampReport::from_rates(rates, rated_power_w, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(samples: Vec<f64>, period: f64, rated: f64) -> PowerSeries {
        PowerSeries::new(samples, period, rated, 0.0).unwrap()
    }

    #[test]
    fn constant_series_has_zero_ramp() {
        let s = series(vec![700.0; 100], 5.0, 1000.0);
        let r = ramp_rate_series(&s, 60.0, RampAlignment::NonOverlapping).unwrap();
        assert!(r.rr_pct_per_min.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_range_step_in_one_minute_is_100_pct() {
        let mut v = vec![0.0; 13];
        v[12] = 1000.0;
        let s = series(v, 5.0, 1000.0);
        let r = ramp_rate_series(&s, 60.0, RampAlignment::NonOverlapping).unwrap();
        assert_eq!(r.rr_pct_per_min, vec![100.0]);
    }

    #[test]
    fn five_second_step_hand_value() {
        // 100 * 150 / ((5/60) * 3000) = 60 %/min
        let s = series(vec![1000.0, 1150.0], 5.0, 3000.0);
        let r = ramp_rate_series(&s, 5.0, RampAlignment::NonOverlapping).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.rr_pct_per_min[0] - 60.0).abs() < 1e-12);
    }

    #[test]
    fn point_count_matches_floor_formula() {
        for len in 13..200 {
            let s = series(vec![1.0; len], 5.0, 2.0);
            let r = ramp_rate_series(&s, 60.0, RampAlignment::NonOverlapping).unwrap();
            assert_eq!(r.len(), ((len - 1) as f64 * 5.0 / 60.0).floor() as usize);
        }
    }

    #[test]
    fn sliding_has_one_point_per_sample() {
        let s = series((0..30).map(|i| i as f64).collect(), 5.0, 100.0);
        let r = ramp_rate_series(&s, 60.0, RampAlignment::Sliding).unwrap();
        assert_eq!(r.len(), 30 - 12);
        assert!(r.rr_pct_per_min.iter().all(|&x| (x - 12.0).abs() < 1e-12));
    }

    #[test]
    fn interval_errors() {
        let s = series(vec![1.0; 20], 5.0, 2.0);
        assert!(matches!(
            ramp_rate_series(&s, 62.0, RampAlignment::NonOverlapping),
            Err(RampError::IntervalOffGrid { .. })
        ));
        let short = series(vec![1.0; 12], 5.0, 2.0);
        assert_eq!(
            ramp_rate_series(&short, 60.0, RampAlignment::NonOverlapping),
            Err(RampError::TooShort { len: 12, stride: 12 })
        );
    }

    fn rates_of(values: Vec<f64>) -> RampRates {
        RampRates {
            interval_s: 60.0,
            alignment: RampAlignment::NonOverlapping,
            sample_period_s: 5.0,
            start_time_s: 0.0,
            stride: 12,
            end_index: (1..=values.len()).map(|i| 12 * i).collect(),
            rr_pct_per_min: values,
        }
    }

    #[test]
    fn compliance_all_under_limit() {
        let c = compliance(&rates_of(vec![-3.3, 0.0, 3.3, 1.0]), 5.0, 0);
        assert!(c.pass);
        assert_eq!(c.violation_count, 0);
    }

    #[test]
    fn compliance_single_spike_fails() {
        let c = compliance(&rates_of(vec![1.0, 56.0, -2.0]), 5.0, 0);
        assert!(!c.pass);
        assert_eq!(c.violation_count, 1);
        assert!((c.violation_fraction - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.max_abs_rr, 56.0);
    }

    #[test]
    fn compliance_zero_limit_on_constant_series() {
        let c = compliance(&rates_of(vec![0.0; 5]), 0.0, 0);
        assert!(c.pass);
    }

    #[test]
    fn compliance_skips_warmup_intervals() {
        // Intervals start at 0, 12, 24; warm-up of 13 samples drops the first two.
        let c = compliance(&rates_of(vec![50.0, 40.0, 1.0]), 5.0, 13);
        assert_eq!(c.evaluated, 1);
        assert_eq!(c.excluded, 2);
        assert!(c.pass);
    }

    #[test]
    fn histogram_single_center_bin() {
        let h = histogram(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.edges, vec![-0.5, 0.5]);
    }

    // Brute force: walk every candidate bin and apply the membership rule directly.
    fn brute_counts(rates: &[f64], width: f64, half: i64) -> Vec<u64> {
        (-half..=half)
            .map(|j| {
                let lo = (j as f64 - 0.5) * width;
                let hi = (j as f64 + 0.5) * width;
                rates
                    .iter()
                    .filter(|&&r| match j.signum() {
                        0 => r >= lo && r <= hi,
                        1 => r > lo && r <= hi,
                        _ => r >= lo && r < hi,
                    })
                    .count() as u64
            })
            .collect()
    }

    #[test]
    fn histogram_matches_brute_force_binning() {
        let rates = [-1.2, 0.4, 3.7];
        let h = histogram(&rates, 1.0).unwrap();
        assert_eq!(h.counts.len(), 9);
        assert_eq!(h.counts, brute_counts(&rates, 1.0, 4));
        assert_eq!(h.counts, vec![0, 0, 0, 1, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn histogram_wide_bin_holds_everything() {
        let rates: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let h = histogram(&rates, 10.0).unwrap();
        assert_eq!(h.counts, vec![rates.len() as u64]);
    }

    #[test]
    fn histogram_errors() {
        assert_eq!(histogram(&[], 1.0), Err(RampError::EmptyHistogram));
        assert_eq!(histogram(&[1.0], 0.0), Err(RampError::BadBinWidth(0.0)));
        assert_eq!(histogram(&[1.0, f64::NAN], 1.0), Err(RampError::NonFinite(1)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn histogram_counts_sum_to_input(rates in prop::collection::vec(-80.0f64..80.0, 1..200), width in 0.1f64..20.0) {
                let h = histogram(&rates, width).unwrap();
                prop_assert_eq!(h.total(), rates.len() as u64);
                let half = (h.counts.len() as i64 - 1) / 2;
                prop_assert_eq!(h.counts, brute_counts(&rates, width, half));
            }

            #[test]
            fn reversal_negates_mirrored_points(samples in prop::collection::vec(0.0f64..1000.0, 13..120)) {
                let n = samples.len();
                // Trim so the reversed grid lines up with the forward one.
                let keep = ((n - 1) / 12) * 12 + 1;
                let fwd: Vec<f64> = samples[..keep].to_vec();
                let rev: Vec<f64> = fwd.iter().rev().copied().collect();
                let a = ramp_rates(&fwd, 5.0, 1000.0, 0.0, 60.0, RampAlignment::NonOverlapping).unwrap();
                let b = ramp_rates(&rev, 5.0, 1000.0, 0.0, 60.0, RampAlignment::NonOverlapping).unwrap();
                prop_assert_eq!(a.len(), b.len());
                let m = a.len();
                for i in 0..m {
                    prop_assert_eq!(a.rr_pct_per_min[i], -b.rr_pct_per_min[m - 1 - i]);
                }
            }

            #[test]
            fn linear_ramp_is_interval_independent(slope in 0.0f64..2.0, offset in 0.0f64..100.0) {
                let v: Vec<f64> = (0..200).map(|i| offset + slope * i as f64).collect();
                let rated = 1000.0;
                let one = ramp_rates(&v, 5.0, rated, 0.0, 60.0, RampAlignment::NonOverlapping).unwrap();
                let two = ramp_rates(&v, 5.0, rated, 0.0, 120.0, RampAlignment::NonOverlapping).unwrap();
                let expected = 100.0 * slope * 12.0 / rated;
                for r in one.rr_pct_per_min.iter().chain(&two.rr_pct_per_min) {
                    prop_assert!((r - expected).abs() <= 1e-9 * expected.max(1e-3));
                }
            }
        }
    }
}
