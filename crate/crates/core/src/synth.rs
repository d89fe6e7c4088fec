//! Synthetic PV profiles for tests and fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PowerSeries, SeriesError};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("duration {duration_s} s is not a positive multiple of the {period_s} s period")]
    OffGrid { duration_s: f64, period_s: f64 },
    #[error("invalid profile parameter: {0}")]
    BadParameter(&'static str),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Half-sine clear-sky envelope.
///
/// The window `[offset_s, offset_s + duration)` is cut out of a day of
/// `day_length_s` seconds; without a day length the bell spans the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearSky {
    pub peak_fraction: f64,
    pub day_length_s: Option<f64>,
    pub offset_s: f64,
}

impl Default for ClearSky {
    fn default() -> Self {
        Self {
            peak_fraction: 0.9,
            day_length_s: None,
            offset_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthProfile {
    Clear,
    /// Clear sky times a square wave dropping output by `depth` for the
    /// second half of every `period_s`.
    CloudSquare { depth: f64, period_s: f64 },
    /// Clear sky with seeded two-state (telegraph) cloud cover. Each cloud
    /// has its own depth drawn uniformly from `[depth_min, depth_max]`.
    CloudRandom {
        seed: u64,
        depth_min: f64,
        depth_max: f64,
        mean_clear_s: f64,
        mean_cloudy_s: f64,
    },
}

impl SynthProfile {
    pub fn cloud_random(seed: u64) -> Self {
        Self::CloudRandom {
            seed,
            depth_min: 0.5,
            depth_max: 0.9,
            mean_clear_s: 240.0,
            mean_cloudy_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub profile: SynthProfile,
    pub duration_s: f64,
    pub sample_period_s: f64,
    pub rated_w: f64,
    pub clear: ClearSky,
}

impl SynthSpec {
    pub fn sample_count(&self) -> Result<usize, SynthError> {
        let off = SynthError::OffGrid {
            duration_s: self.duration_s,
            period_s: self.sample_period_s,
        };
        if !(self.duration_s > 0.0 && self.sample_period_s > 0.0) {
            return Err(off);
        }
        let ratio = self.duration_s / self.sample_period_s;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
            return Err(off);
        }
        Ok(n as usize)
    }

    /// Clear-sky power at `t_s` seconds into the window.
    pub fn clear_sky_w(&self, t_s: f64) -> f64 {
        let day = self.clear.day_length_s.unwrap_or(self.duration_s);
        let phase = std::f64::consts::PI * (self.clear.offset_s + t_s) / day;
        (self.rated_w * self.clear.peak_fraction * phase.sin()).clamp(0.0, self.rated_w)
    }
}

pub fn synth_pv(spec: &SynthSpec) -> Result<PowerSeries, SynthError> {
    let n = spec.sample_count()?;
    if !(0.0..=1.0).contains(&spec.clear.peak_fraction) {
        return Err(SynthError::BadParameter("peak_fraction must lie in [0, 1]"));
    }
    let dt = spec.sample_period_s;
    let clear = (0..n).map(|k| spec.clear_sky_w(k as f64 * dt));
    let samples: Vec<f64> = match spec.profile {
        SynthProfile::Clear => clear.collect(),
        SynthProfile::CloudSquare { depth, period_s } => {
            if !(0.0..=1.0).contains(&depth) || period_s.is_nan() || period_s <= 0.0 {
                return Err(SynthError::BadParameter("cloud_square needs depth in [0, 1] and period > 0"));
            }
            let half = period_s / 2.0;
            clear
                .enumerate()
                .map(|(k, c)| {
                    let shaded = ((k as f64 * dt) / half).floor() as u64 % 2 == 1;
                    if shaded {
                        c * (1.0 - depth)
                    } else {
                        c
                    }
                })
                .collect()
        }
        SynthProfile::CloudRandom {
            seed,
            depth_min,
            depth_max,
            mean_clear_s,
            mean_cloudy_s,
        } => {
            if !(0.0 <= depth_min && depth_min <= depth_max && depth_max <= 1.0) {
                return Err(SynthError::BadParameter("cloud_random needs 0 <= depth_min <= depth_max <= 1"));
            }
            if !(mean_clear_s > 0.0 && mean_cloudy_s > 0.0) {
                return Err(SynthError::BadParameter("cloud_random dwell times must be > 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p_enter = (dt / mean_clear_s).min(1.0);
            let p_leave = (dt / mean_cloudy_s).min(1.0);
            let mut depth: Option<f64> = None;
            clear
                .map(|c| {
                    let u: f64 = rng.random();
                    depth = match depth {
                        None if u < p_enter => Some(rng.random_range(depth_min..=depth_max)),
                        Some(_) if u < p_leave => None,
                        d => d,
                    };
                    c * (1.0 - depth.unwrap_or(0.0))
                })
                .collect()
        }
    };
    Ok(PowerSeries::new(samples, dt, spec.rated_w, 0.0)?)
}
