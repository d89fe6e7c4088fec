//! C ABI over the smoothing controller, battery plant, frame codec and ramp
//! metrics. Handles are opaque; every fallible call returns a [`PvsStatus`].
//!
//! Ownership: `*_new` hands out a handle the caller releases with the
//! matching `*_free`. Output pointers must be valid for writes. Panics never
//! cross the boundary; they surface as [`PvsStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use pvsmooth::bus::{decode_frame, encode_frame, quantize, BusFrame, FrameError, MsgType};
use pvsmooth::controller::{ControllerError, ControllerState};
use pvsmooth::domain::{BatteryParams, VoltageModel};
use pvsmooth::plant::{battery_step, supply_apply, BatteryState, PlantError};
use pvsmooth::ramp::{ramp_rates, RampAlignment, RampError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonFinite = 3,
    BufferTooSmall = 4,
    BadMagic = 5,
    BadVersion = 6,
    BadLength = 7,
    BadCrc = 8,
    UnknownMsgType = 9,
    Panic = 10,
}

impl From<FrameError> for PvsStatus {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::BadMagic(_) => PvsStatus::BadMagic,
            FrameError::BadVersion(_) => PvsStatus::BadVersion,
            FrameError::Truncated { .. }
            | FrameError::LengthMismatch { .. }
            | FrameError::RaggedPayload(_)
            | FrameError::PayloadMismatch { .. } => PvsStatus::BadLength,
            FrameError::BadCrc { .. } => PvsStatus::BadCrc,
            FrameError::UnknownMsgType(_) => PvsStatus::UnknownMsgType,
        }
    }
}

fn guard(f: impl FnOnce() -> PvsStatus) -> PvsStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(PvsStatus::Panic)
}

macro_rules! out_ref {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(r) => r,
            None => return PvsStatus::NullPointer,
        }
    };
}

macro_rules! in_ref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(r) => r,
            None => return PvsStatus::NullPointer,
        }
    };
}

/// Static, NUL-terminated description of a status code.
#[no_mangle]
pub extern "C" fn pvs_status_message(status: PvsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PvsStatus::Ok => c"ok",
        PvsStatus::NullPointer => c"null pointer argument",
        PvsStatus::InvalidArgument => c"invalid argument",
        PvsStatus::NonFinite => c"non-finite input",
        PvsStatus::BufferTooSmall => c"output buffer too small",
        PvsStatus::BadMagic => c"frame magic mismatch",
        PvsStatus::BadVersion => c"unsupported frame version",
        PvsStatus::BadLength => c"frame length inconsistent",
        PvsStatus::BadCrc => c"frame CRC mismatch",
        PvsStatus::UnknownMsgType => c"unknown frame message type",
        PvsStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Library version, NUL-terminated.
#[no_mangle]
pub extern "C" fn pvs_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

// ---- controller -----------------------------------------------------------

/// Moving-average smoothing controller.
pub struct PvsController {
    inner: ControllerState,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvsControllerOutput {
    pub p_hat_w: f64,
    pub p_batt_w: f64,
    pub i_set_a: f64,
    /// 1 when the voltage reading was unusable and a zero setpoint was issued.
    pub voltage_fault: u8,
}

#[no_mangle]
pub unsafe extern "C" fn pvs_controller_new(
    window_samples: usize,
    sample_period_s: f64,
    out: *mut *mut PvsController,
) -> PvsStatus {
    guard(|| {
        let out = out_ref!(out);
        *out = ptr::null_mut();
        if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
            return PvsStatus::InvalidArgument;
        }
        match ControllerState::new(window_samples, sample_period_s) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PvsController { inner }));
                PvsStatus::Ok
            }
            Err(_) => PvsStatus::InvalidArgument,
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pvs_controller_step(
    ctrl: *mut PvsController,
    p_pv_w: f64,
    v_batt_v: f64,
    out: *mut PvsControllerOutput,
) -> PvsStatus {
    guard(|| {
        let ctrl = out_ref!(ctrl);
        let out = out_ref!(out);
        match ctrl.inner.step(p_pv_w, v_batt_v) {
            Ok(o) => {
                *out = PvsControllerOutput {
                    p_hat_w: o.p_hat_w,
                    p_batt_w: o.p_batt_w,
                    i_set_a: o.i_set_a,
                    voltage_fault: o.fault.is_some() as u8,
                };
                PvsStatus::Ok
            }
            Err(ControllerError::NonFinitePv) => PvsStatus::NonFinite,
            Err(_) => PvsStatus::InvalidArgument,
        }
    })
}

/// Releases a controller. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pvs_controller_free(ctrl: *mut PvsController) {
    if !ctrl.is_null() {
        drop(unsafe { Box::from_raw(ctrl) });
    }
}

// ---- battery --------------------------------------------------------------

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvsBatteryParams {
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
    /// 0 = constant nominal voltage, 1 = open-circuit voltage linear in SOC.
    pub voltage_model: u8,
    pub enforce_soc_limits: u8,
}

impl From<&BatteryParams> for PvsBatteryParams {
    fn from(b: &BatteryParams) -> Self {
        Self {
            capacity_wh: b.capacity_wh,
            nominal_voltage_v: b.nominal_voltage_v,
            v_min_v: b.v_min_v,
            v_max_v: b.v_max_v,
            internal_resistance_ohm: b.internal_resistance_ohm,
            current_limit_a: b.current_limit_a,
            soc_min: b.soc_min,
            soc_max: b.soc_max,
            soc_init: b.soc_init,
            coulombic_efficiency: b.coulombic_efficiency,
            voltage_model: match b.voltage_model {
                VoltageModel::Constant => 0,
                VoltageModel::LinearOcv => 1,
            },
            enforce_soc_limits: b.enforce_soc_limits as u8,
        }
    }
}

impl PvsBatteryParams {
    fn to_params(self) -> Option<BatteryParams> {
        let p = BatteryParams {
            capacity_wh: self.capacity_wh,
            nominal_voltage_v: self.nominal_voltage_v,
            v_min_v: self.v_min_v,
            v_max_v: self.v_max_v,
            internal_resistance_ohm: self.internal_resistance_ohm,
            current_limit_a: self.current_limit_a,
            soc_min: self.soc_min,
            soc_max: self.soc_max,
            soc_init: self.soc_init,
            coulombic_efficiency: self.coulombic_efficiency,
            voltage_model: match self.voltage_model {
                0 => VoltageModel::Constant,
                1 => VoltageModel::LinearOcv,
                _ => return None,
            },
            enforce_soc_limits: self.enforce_soc_limits != 0,
        };
        let ok = p.capacity_wh > 0.0
            && p.nominal_voltage_v > 0.0
            && p.current_limit_a > 0.0
            && p.coulombic_efficiency > 0.0
            && p.coulombic_efficiency <= 1.0
            && 0.0 <= p.soc_min
            && p.soc_min < p.soc_max
            && p.soc_max <= 1.0
            && (p.soc_min..=p.soc_max).contains(&p.soc_init);
        ok.then_some(p)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvsBatteryState {
    pub soc: f64,
    pub v_terminal_v: f64,
    pub i_applied_a: f64,
    pub clamp_events: u64,
}

impl From<&BatteryState> for PvsBatteryState {
    fn from(s: &BatteryState) -> Self {
        Self {
            soc: s.soc,
            v_terminal_v: s.v_terminal_v,
            i_applied_a: s.i_applied_a,
            clamp_events: s.clamp_events,
        }
    }
}

/// Coulomb-counting battery with SOC and current clamping.
pub struct PvsBattery {
    params: BatteryParams,
    state: BatteryState,
}

#[no_mangle]
pub unsafe extern "C" fn pvs_battery_params_default(out: *mut PvsBatteryParams) -> PvsStatus {
    guard(|| {
        *out_ref!(out) = PvsBatteryParams::from(&BatteryParams::default());
        PvsStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn pvs_battery_new(params: *const PvsBatteryParams, out: *mut *mut PvsBattery) -> PvsStatus {
    guard(|| {
        let out = out_ref!(out);
        *out = ptr::null_mut();
        let Some(params) = in_ref!(params).to_params() else {
            return PvsStatus::InvalidArgument;
        };
        let state = BatteryState::initial(&params);
        *out = Box::into_raw(Box::new(PvsBattery { params, state }));
        PvsStatus::Ok
    })
}

/// Apply `i_request_a` (positive charges) for `dt_s` seconds.
#[no_mangle]
pub unsafe extern "C" fn pvs_battery_step(
    battery: *mut PvsBattery,
    i_request_a: f64,
    dt_s: f64,
    out: *mut PvsBatteryState,
) -> PvsStatus {
    guard(|| {
        let battery = out_ref!(battery);
        let out = out_ref!(out);
        match battery_step(&battery.state, &battery.params, i_request_a, dt_s) {
            Ok(next) => {
                battery.state = next;
                *out = PvsBatteryState::from(&battery.state);
                PvsStatus::Ok
            }
            Err(PlantError::NonFiniteRequest(_)) => PvsStatus::NonFinite,
            Err(_) => PvsStatus::InvalidArgument,
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pvs_battery_state(battery: *const PvsBattery, out: *mut PvsBatteryState) -> PvsStatus {
    guard(|| {
        let battery = in_ref!(battery);
        *out_ref!(out) = PvsBatteryState::from(&battery.state);
        PvsStatus::Ok
    })
}

/// Releases a battery. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pvs_battery_free(battery: *mut PvsBattery) {
    if !battery.is_null() {
        drop(unsafe { Box::from_raw(battery) });
    }
}

/// Current the supply drives for a request, capped at its +/-55 A rating.
#[no_mangle]
pub extern "C" fn pvs_supply_apply(i_request_a: f64, supply_limit_a: f64) -> f64 {
    supply_apply(i_request_a, supply_limit_a)
}

/// ADC emulation: round to the nearest of `2^bits` codes over `[lo, hi]`.
#[no_mangle]
pub extern "C" fn pvs_quantize(value: f64, bits: u32, lo: f64, hi: f64) -> f64 {
    quantize(value, bits, (lo, hi))
}

// ---- frames ---------------------------------------------------------------

pub const PVS_MSG_SENSOR: u8 = 1;
pub const PVS_MSG_SETPOINT: u8 = 2;
pub const PVS_MSG_END: u8 = 3;
pub const PVS_MSG_FAULT: u8 = 4;
/// Largest encoded frame: SENSOR, 20-byte header + 2 values + CRC.
pub const PVS_FRAME_MAX: usize = 40;

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvsFrame {
    pub msg_type: u8,
    pub seq: u32,
    pub sim_time_ms: u64,
    /// Number of meaningful entries in `payload`.
    pub payload_len: u32,
    pub payload: [f64; 2],
}

fn msg_type(b: u8) -> Option<MsgType> {
    MsgType::from_byte(b)
}

fn msg_byte(t: MsgType) -> u8 {
    match t {
        MsgType::Sensor => PVS_MSG_SENSOR,
        MsgType::Setpoint => PVS_MSG_SETPOINT,
        MsgType::End => PVS_MSG_END,
        MsgType::Fault => PVS_MSG_FAULT,
    }
}

/// Encode a frame into `buf`. `out_len` receives the byte count, or the
/// needed size when the status is `BufferTooSmall`.
#[no_mangle]
pub unsafe extern "C" fn pvs_frame_encode(
    frame: *const PvsFrame,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> PvsStatus {
    guard(|| {
        let f = in_ref!(frame);
        let out_len = out_ref!(out_len);
        let Some(t) = msg_type(f.msg_type) else {
            return PvsStatus::UnknownMsgType;
        };
        let n = f.payload_len as usize;
        if n != t.payload_values() {
            return PvsStatus::BadLength;
        }
        let bus = BusFrame {
            msg_type: t,
            seq: f.seq,
            sim_time_ms: f.sim_time_ms,
            payload: f.payload[..n].to_vec(),
        };
        let bytes = match encode_frame(&bus) {
            Ok(b) => b,
            Err(e) => return e.into(),
        };
        *out_len = bytes.len();
        if cap < bytes.len() {
            return PvsStatus::BufferTooSmall;
        }
        if buf.is_null() {
            return PvsStatus::NullPointer;
        }
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len()) };
        PvsStatus::Ok
    })
}

/// Decode and verify one frame.
#[no_mangle]
pub unsafe extern "C" fn pvs_frame_decode(buf: *const u8, len: usize, out: *mut PvsFrame) -> PvsStatus {
    guard(|| {
        let out = out_ref!(out);
        if buf.is_null() {
            return PvsStatus::NullPointer;
        }
        let bytes = unsafe { slice::from_raw_parts(buf, len) };
        match decode_frame(bytes) {
            Ok(f) => {
                let mut payload = [0.0; 2];
                payload[..f.payload.len()].copy_from_slice(&f.payload);
                *out = PvsFrame {
                    msg_type: msg_byte(f.msg_type),
                    seq: f.seq,
                    sim_time_ms: f.sim_time_ms,
                    payload_len: f.payload.len() as u32,
                    payload,
                };
                PvsStatus::Ok
            }
            Err(e) => e.into(),
        }
    })
}

// ---- ramp rates -----------------------------------------------------------

/// Ramp rates in %/min over `rr_interval_s`. `sliding` selects one point per
/// sample instead of back-to-back intervals. `out_len` receives the point
/// count, or the needed capacity when the status is `BufferTooSmall`.
#[no_mangle]
pub unsafe extern "C" fn pvs_ramp_rates(
    samples: *const f64,
    n: usize,
    sample_period_s: f64,
    rated_power_w: f64,
    rr_interval_s: f64,
    sliding: u8,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> PvsStatus {
    guard(|| {
        let out_len = out_ref!(out_len);
        if samples.is_null() {
            return PvsStatus::NullPointer;
        }
        let samples = unsafe { slice::from_raw_parts(samples, n) };
        if samples.iter().any(|p| !p.is_finite()) {
            return PvsStatus::NonFinite;
        }
        let alignment = if sliding != 0 {
            RampAlignment::Sliding
        } else {
            RampAlignment::NonOverlapping
        };
        let rates = match ramp_rates(samples, sample_period_s, rated_power_w, 0.0, rr_interval_s, alignment) {
            Ok(r) => r,
            Err(RampError::NonFinite(_)) => return PvsStatus::NonFinite,
            Err(_) => return PvsStatus::InvalidArgument,
        };
        *out_len = rates.len();
        if cap < rates.len() {
            return PvsStatus::BufferTooSmall;
        }
        if out.is_null() {
            return PvsStatus::NullPointer;
        }
        unsafe { ptr::copy_nonoverlapping(rates.rr_pct_per_min.as_ptr(), out, rates.len()) };
        PvsStatus::Ok
    })
}
