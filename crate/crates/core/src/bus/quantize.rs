//! ADC/DAC emulation on the analog signal paths.

use serde::{Deserialize, Serialize};

/// Map `value` onto the nearest of `2^bits` uniform codes spanning `[lo, hi)`.
///
/// Code `c` represents `lo + c * (hi - lo) / 2^bits`; values outside the range
/// saturate at the end codes. Ties round away from zero.
pub fn quantize(value: f64, bits: u32, full_scale: (f64, f64)) -> f64 {
    let (lo, hi) = full_scale;
    debug_assert!(lo < hi);
    let levels = (1u64 << bits) as f64;
    let step = (hi - lo) / levels;
    let clamped = if value.is_nan() { lo } else { value.clamp(lo, hi) };
    let code = ((clamped - lo) / step).round().clamp(0.0, levels - 1.0);
    lo + code * step
}

/// Optional ADC emulation on the bus. Missing ranges take defaults derived
/// from the PV rating and battery limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationConfig {
    pub bits: u32,
    pub power_range_w: Option<(f64, f64)>,
    pub voltage_range_v: Option<(f64, f64)>,
    pub current_range_a: Option<(f64, f64)>,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            power_range_w: None,
            voltage_range_v: None,
            current_range_a: None,
        }
    }
}

/// Quantizer with every range resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub bits: u32,
    pub power_w: (f64, f64),
    pub voltage_v: (f64, f64),
    pub current_a: (f64, f64),
}

impl Quantizer {
    pub fn resolve(cfg: &QuantizationConfig, rated_power_w: f64, v_max_v: f64, current_limit_a: f64) -> Self {
        Self {
            bits: cfg.bits,
            power_w: cfg.power_range_w.unwrap_or((0.0, 2.0 * rated_power_w)),
            voltage_v: cfg.voltage_range_v.unwrap_or((0.0, 1.5 * v_max_v)),
            current_a: cfg
                .current_range_a
                .unwrap_or((-2.0 * current_limit_a, 2.0 * current_limit_a)),
        }
    }

    pub fn power(&self, w: f64) -> f64 {
        quantize(w, self.bits, self.power_w)
    }

    pub fn voltage(&self, v: f64) -> f64 {
        quantize(v, self.bits, self.voltage_v)
    }

    pub fn current(&self, a: f64) -> f64 {
        quantize(a, self.bits, self.current_a)
    }
}
