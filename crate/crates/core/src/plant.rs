//! Discrete-time plant: PV playback, the DC supply and a coulomb-counting
//! battery. The plant owns every safety limit; the controller has none.

use std::io::{self, Write};

use thiserror::Error;

use crate::domain::{BatteryParams, PowerSeries, ScenarioConfig};

/// Current rating of the bidirectional DC supply.
pub const SUPPLY_HARD_LIMIT_A: f64 = 55.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("current request {0} A is not finite")]
    NonFiniteRequest(f64),
    #[error("step length must be > 0 s, got {0}")]
    BadStep(f64),
    #[error("series exhausted at sample {0}")]
    SeriesExhausted(usize),
    #[error("SOC {soc} left [{lo}, {hi}] at sample {k}")]
    SocOutOfBounds { k: usize, soc: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub soc: f64,
    pub v_terminal_v: f64,
    /// Charging positive.
    pub i_applied_a: f64,
    pub clamp_events: u64,
    pub capacity_ah: f64,
}

impl BatteryState {
    pub fn initial(params: &BatteryParams) -> Self {
        Self {
            soc: params.soc_init,
            v_terminal_v: params.open_circuit_voltage(params.soc_init),
            i_applied_a: 0.0,
            clamp_events: 0,
            capacity_ah: params.capacity_ah(),
        }
    }
}

fn soc_bounds(params: &BatteryParams) -> (f64, f64) {
    if params.enforce_soc_limits {
        (params.soc_min, params.soc_max)
    } else {
        (0.0, 1.0)
    }
}

/// Advance the battery by `dt_s` under a requested current.
///
/// The request is clamped to the current limit, then trimmed so SOC lands on
/// the bound instead of crossing it. Only the direction pushing SOC out of
/// bounds is blocked.
pub fn battery_step(
    state: &BatteryState,
    params: &BatteryParams,
    i_request_a: f64,
    dt_s: f64,
) -> Result<BatteryState, PlantError> {
    if !i_request_a.is_finite() {
        return Err(PlantError::NonFiniteRequest(i_request_a));
    }
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(PlantError::BadStep(dt_s));
    }
    let eta = params.coulombic_efficiency;
    let charge_ah = 3600.0 * state.capacity_ah;
    let (lo, hi) = soc_bounds(params);

    let mut i = i_request_a.clamp(-params.current_limit_a, params.current_limit_a);
    let mut clamped = i != i_request_a;
    let eta_dir = if i > 0.0 { eta } else { 1.0 / eta };
    let mut soc = state.soc + eta_dir * i * dt_s / charge_ah;

    if i > 0.0 && soc > hi {
        clamped = true;
        if state.soc >= hi {
            i = 0.0;
            soc = state.soc;
        } else {
            i = ((hi - state.soc) * charge_ah / (eta * dt_s)).min(i);
            soc = hi;
        }
    } else if i < 0.0 && soc < lo {
        clamped = true;
        if state.soc <= lo {
            i = 0.0;
            soc = state.soc;
        } else {
            i = ((lo - state.soc) * charge_ah * eta / dt_s).max(i);
            soc = lo;
        }
    }

    Ok(BatteryState {
        soc,
        v_terminal_v: params.open_circuit_voltage(soc) + i * params.internal_resistance_ohm,
        i_applied_a: i,
        clamp_events: state.clamp_events + clamped as u64,
        capacity_ah: state.capacity_ah,
    })
}

/// Current the supply actually drives: clamped to its configured limit and
/// never beyond its +/-55 A rating.
pub fn supply_apply(i_request_a: f64, supply_limit_a: f64) -> f64 {
    let limit = supply_limit_a.min(SUPPLY_HARD_LIMIT_A);
    i_request_a.clamp(-limit, limit)
}

/// Sensor pair the plant hands to the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub p_pv_w: f64,
    pub v_batt_v: f64,
}

/// One plant step as written to the plant trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantTraceRow {
    pub k: usize,
    pub p_pv_w: f64,
    pub i_request_a: f64,
    pub i_applied_a: f64,
    pub v_terminal_v: f64,
    pub soc: f64,
    pub realized_p_batt_w: f64,
    pub p_grid_w: f64,
}

pub const PLANT_TRACE_HEADER: &str = "k,p_pv_w,i_request_a,i_applied_a,v_terminal_v,soc,realized_p_batt_w,p_grid_w";

pub fn write_plant_trace<W: Write>(rows: &[PlantTraceRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{PLANT_TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.k, r.p_pv_w, r.i_request_a, r.i_applied_a, r.v_terminal_v, r.soc, r.realized_p_batt_w, r.p_grid_w
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub k: usize,
    pub battery: BatteryState,
    pub last_setpoint_a: f64,
    pub pv_now_w: f64,
}

impl PlantState {
    pub fn new(series: &PowerSeries, params: &BatteryParams) -> Self {
        Self {
            k: 0,
            battery: BatteryState::initial(params),
            last_setpoint_a: 0.0,
            pv_now_w: series.samples()[0],
        }
    }

    pub fn sensor(&self) -> SensorReading {
        SensorReading {
            p_pv_w: self.pv_now_w,
            v_batt_v: self.battery.v_terminal_v,
        }
    }

    /// Apply `setpoint_a` over the current sample interval and move to the
    /// next sample. Returns the trace row and the next sensor reading, or
    /// `None` once the series is complete.
    pub fn step(
        &mut self,
        series: &PowerSeries,
        setpoint_a: f64,
        cfg: &ScenarioConfig,
    ) -> Result<(PlantTraceRow, Option<SensorReading>), PlantError> {
        let samples = series.samples();
        if self.k >= samples.len() {
            return Err(PlantError::SeriesExhausted(self.k));
        }
        let params = &cfg.battery;
        let i_supply = supply_apply(setpoint_a, cfg.supply.current_limit_a);
        let battery = battery_step(&self.battery, params, i_supply, series.sample_period_s())?;
        let (lo, hi) = soc_bounds(params);
        if !(lo..=hi).contains(&battery.soc) {
            return Err(PlantError::SocOutOfBounds {
                k: self.k,
                soc: battery.soc,
                lo,
                hi,
            });
        }
        let realized = battery.i_applied_a * battery.v_terminal_v;
        let row = PlantTraceRow {
            k: self.k,
            p_pv_w: self.pv_now_w,
            i_request_a: setpoint_a,
            i_applied_a: battery.i_applied_a,
            v_terminal_v: battery.v_terminal_v,
            soc: battery.soc,
            realized_p_batt_w: realized,
            p_grid_w: self.pv_now_w - realized,
        };
        self.battery = battery;
        self.last_setpoint_a = setpoint_a;
        self.k += 1;
        let next = samples.get(self.k).map(|&p| {
            self.pv_now_w = p;
            self.sensor()
        });
        Ok((row, next))
    }
}
