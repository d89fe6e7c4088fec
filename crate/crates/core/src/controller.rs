//! Moving-average PV smoothing controller.
//!
//! Each step inserts the newest PV sample into a zero-initialized ring buffer
//! of `N` slots, takes the buffer mean as the smoothed power, hands the
//! difference to the battery, and converts it into a current setpoint using
//! the measured battery voltage. Positive battery power and current mean the
//! battery is charging.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::bus::{ControllerEndpoint, FrameLink, Incoming, SessionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ControllerError {
    #[error("window length must be at least one sample")]
    EmptyWindow,
    #[error("PV sample is not finite")]
    NonFinitePv,
}

/// Why a step produced the safe zero-current setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetpointFault {
    /// Battery voltage was not a finite positive number.
    InvalidVoltage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerOutput {
    pub p_hat_w: f64,
    pub p_batt_w: f64,
    pub i_set_a: f64,
    pub fault: Option<SetpointFault>,
}

/// Ring buffer, window length and 1-based sample index.
#[derive(Debug, Clone)]
pub struct ControllerState {
    buf: Vec<f64>,
    /// Next sample index k (1-based).
    k: u64,
    sum: f64,
    nonzero: usize,
    sample_period_s: f64,
}

impl ControllerState {
    pub fn new(window_samples: usize, sample_period_s: f64) -> Result<Self, ControllerError> {
        if window_samples == 0 {
            return Err(ControllerError::EmptyWindow);
        }
        Ok(Self {
            buf: vec![0.0; window_samples],
            k: 1,
            sum: 0.0,
            nonzero: 0,
            sample_period_s,
        })
    }

    pub fn window(&self) -> usize {
        self.buf.len()
    }

    /// Index of the sample the next step will consume.
    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn sample_period_s(&self) -> f64 {
        self.sample_period_s
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buf
    }

    /// Zero-based slot written at step `k`, i.e. `((k - 1) mod N) + 1` minus one.
    pub fn write_slot(&self) -> usize {
        ((self.k - 1) % self.buf.len() as u64) as usize
    }

    pub fn step(&mut self, p_pv_w: f64, v_batt_v: f64) -> Result<ControllerOutput, ControllerError> {
        if !p_pv_w.is_finite() {
            return Err(ControllerError::NonFinitePv);
        }
        let n = self.buf.len();
        let slot = self.write_slot();
        let old = std::mem::replace(&mut self.buf[slot], p_pv_w);
        self.nonzero = self.nonzero + (p_pv_w != 0.0) as usize - (old != 0.0) as usize;

        if self.k.is_multiple_of(n as u64) {
            // Full recomputation once per window bounds running-sum drift.
            self.sum = self.buf.iter().sum();
        } else if self.nonzero == 0 {
            self.sum = 0.0;
        } else {
            self.sum = self.sum - old + p_pv_w;
        }
        self.k += 1;

        let p_hat_w = self.sum / n as f64;
        let p_batt_w = p_pv_w - p_hat_w;
        let (i_set_a, fault) = if v_batt_v.is_finite() && v_batt_v > 0.0 {
            (p_batt_w / v_batt_v, None)
        } else {
            (0.0, Some(SetpointFault::InvalidVoltage))
        };
        Ok(ControllerOutput {
            p_hat_w,
            p_batt_w,
            i_set_a,
            fault,
        })
    }
}

/// One row of the controller step log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerLogRow {
    pub k: u64,
    pub p_pv_w: f64,
    pub v_batt_v: f64,
    pub p_hat_w: f64,
    pub p_batt_w: f64,
    pub i_set_a: f64,
}

pub const CONTROLLER_LOG_HEADER: &str = "k,p_pv_w,v_batt_v,p_hat_w,p_batt_w,i_set_a";

pub fn write_controller_log<W: Write>(rows: &[ControllerLogRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{CONTROLLER_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.k, r.p_pv_w, r.v_batt_v, r.p_hat_w, r.p_batt_w, r.i_set_a
        )?;
    }
    Ok(())
}

pub fn read_controller_log<R: BufRead>(input: R) -> io::Result<Vec<ControllerLogRow>> {
    let bad = |line: usize, what: &str| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {what}"));
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != CONTROLLER_LOG_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        rows.push(ControllerLogRow {
            k: f[0].parse().map_err(|_| bad(i + 1, "bad k"))?,
            p_pv_w: num(f[1])?,
            v_batt_v: num(f[2])?,
            p_hat_w: num(f[3])?,
            p_batt_w: num(f[4])?,
            i_set_a: num(f[5])?,
        });
    }
    Ok(rows)
}

/// What a controller session produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerRun {
    pub log: Vec<ControllerLogRow>,
    /// Frames rejected by the decoder or carrying non-finite PV.
    pub rejected_frames: u64,
    /// Steps answered with a zero setpoint because of a bad voltage reading.
    pub setpoint_faults: u64,
    /// Session ended with END rather than a dropped link.
    pub clean_end: bool,
}

#[derive(Debug, Error)]
#[error("controller session failed after {} steps: {source}", partial.log.len())]
pub struct ControllerSessionError {
    #[source]
    pub source: SessionError,
    pub partial: ControllerRun,
}

/// Serve one session: answer every sensor frame with exactly one setpoint
/// carrying the same sequence number, until END or the link closes.
pub fn run_controller<L: FrameLink>(
    endpoint: &mut ControllerEndpoint<L>,
    mut state: ControllerState,
) -> Result<ControllerRun, ControllerSessionError> {
    let mut run = ControllerRun::default();
    macro_rules! tryq {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(source) => return Err(ControllerSessionError { source, partial: run }),
            }
        };
    }
    loop {
        match tryq!(endpoint.recv()) {
            Incoming::Sensor {
                seq,
                sim_time_ms,
                p_pv_w,
                v_batt_v,
            } => {
                let k = state.k();
                match state.step(p_pv_w, v_batt_v) {
                    Ok(out) => {
                        if out.fault.is_some() {
                            run.setpoint_faults += 1;
                        }
                        run.log.push(ControllerLogRow {
                            k,
                            p_pv_w,
                            v_batt_v,
                            p_hat_w: out.p_hat_w,
                            p_batt_w: out.p_batt_w,
                            i_set_a: out.i_set_a,
                        });
                        tryq!(endpoint.reply(seq, sim_time_ms, out.i_set_a));
                    }
                    Err(_) => {
                        run.rejected_frames += 1;
                        tryq!(endpoint.reply(seq, sim_time_ms, 0.0));
                    }
                }
            }
            Incoming::Malformed { seq, .. } => {
                run.rejected_frames += 1;
                tryq!(endpoint.reply(seq, 0, 0.0));
            }
            Incoming::End => {
                run.clean_end = true;
                return Ok(run);
            }
            Incoming::Closed => return Ok(run),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{encode_frame, inproc_pair, BusFrame, SessionMode};
    use proptest::prelude::*;

    #[test]
    fn first_sample_is_averaged_with_zeros() {
        let mut c = ControllerState::new(4, 5.0).unwrap();
        let out = c.step(8.0, 2.0).unwrap();
        assert_eq!(out.p_hat_w, 2.0);
        assert_eq!(out.p_batt_w, 6.0);
        assert_eq!(out.i_set_a, 3.0);
        assert_eq!(out.fault, None);
    }

    #[test]
    fn steady_state_needs_no_battery() {
        let mut c = ControllerState::new(10, 5.0).unwrap();
        let mut last = None;
        for _ in 0..35 {
            last = Some(c.step(612.5, 53.0).unwrap());
        }
        let out = last.unwrap();
        assert_eq!(out.p_hat_w, 612.5);
        assert_eq!(out.p_batt_w, 0.0);
        assert_eq!(out.i_set_a, 0.0);
    }

    #[test]
    fn fourth_step_hand_sum() {
        let mut c = ControllerState::new(4, 5.0).unwrap();
        let mut out = None;
        for p in [0.0, 4.0, 8.0, 4.0] {
            out = Some(c.step(p, 53.0).unwrap());
        }
        let out = out.unwrap();
        assert_eq!(out.p_hat_w, 4.0);
        assert_eq!(out.p_batt_w, 0.0);
    }

    #[test]
    fn write_slot_follows_modular_index() {
        let mut c = ControllerState::new(3, 5.0).unwrap();
        let mut slots = Vec::new();
        for i in 0..7 {
            slots.push(c.write_slot());
            c.step(i as f64, 1.0).unwrap();
        }
        assert_eq!(slots, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(c.buffer(), &[6.0, 4.0, 5.0]);
        assert_eq!(c.k(), 8);
    }

    #[test]
    fn bad_voltage_gives_safe_setpoint() {
        let mut c = ControllerState::new(4, 5.0).unwrap();
        for v in [0.0, -53.0, f64::NAN, f64::INFINITY] {
            let out = c.step(8.0, v).unwrap();
            assert_eq!(out.i_set_a, 0.0);
            assert_eq!(out.fault, Some(SetpointFault::InvalidVoltage));
        }
    }

    #[test]
    fn non_finite_pv_leaves_state_untouched() {
        let mut c = ControllerState::new(4, 5.0).unwrap();
        c.step(1.0, 53.0).unwrap();
        let before = c.clone();
        assert_eq!(c.step(f64::NAN, 53.0), Err(ControllerError::NonFinitePv));
        assert_eq!(c.buffer(), before.buffer());
        assert_eq!(c.k(), before.k());
    }

    #[test]
    fn night_window_returns_exact_zero() {
        let mut c = ControllerState::new(5, 5.0).unwrap();
        for p in [0.1, 0.7, 1e-3, 3.3] {
            c.step(p, 53.0).unwrap();
        }
        let mut out = None;
        for _ in 0..5 {
            out = Some(c.step(0.0, 53.0).unwrap());
        }
        assert_eq!(out.unwrap().p_hat_w, 0.0);
    }

    #[test]
    fn zero_window_is_rejected() {
        assert_eq!(ControllerState::new(0, 5.0).unwrap_err(), ControllerError::EmptyWindow);
    }

    fn naive_mean(history: &[f64], n: usize) -> f64 {
        let start = history.len().saturating_sub(n);
        let mut s = 0.0;
        for &x in &history[start..] {
            s += x;
        }
        s / n as f64
    }

    proptest! {
        #[test]
        fn matches_zero_padded_mean(values in prop::collection::vec(0.0f64..1000.0, 1..600), n in 1usize..50) {
            let mut c = ControllerState::new(n, 5.0).unwrap();
            for (i, &p) in values.iter().enumerate() {
                let out = c.step(p, 53.0).unwrap();
                let want = naive_mean(&values[..=i], n);
                prop_assert!((out.p_hat_w - want).abs() <= 1e-12 * want.abs(), "k={} {} vs {}", i + 1, out.p_hat_w, want);
                prop_assert_eq!(out.p_batt_w, p - out.p_hat_w);
                prop_assert_eq!(out.i_set_a, out.p_batt_w / 53.0);
            }
        }

        #[test]
        fn warmup_is_prefix_sum_over_n(values in prop::collection::vec(0.0f64..1000.0, 1..64)) {
            let n = 64;
            let mut c = ControllerState::new(n, 5.0).unwrap();
            let mut prefix = 0.0;
            for &p in &values {
                prefix += p;
                prop_assert_eq!(c.step(p, 53.0).unwrap().p_hat_w, prefix / n as f64);
            }
        }
    }

    #[test]
    fn controller_log_round_trips() {
        let rows = vec![
            ControllerLogRow { k: 1, p_pv_w: 0.1, v_batt_v: 53.0, p_hat_w: 0.1 / 3.0, p_batt_w: 0.1 - 0.1 / 3.0, i_set_a: -1e-17 },
            ControllerLogRow { k: 2, p_pv_w: 1e300, v_batt_v: 52.999999999, p_hat_w: 5e-324, p_batt_w: -0.0, i_set_a: 3.0 },
        ];
        let mut buf = Vec::new();
        write_controller_log(&rows, &mut buf).unwrap();
        let back = read_controller_log(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.p_hat_w.to_bits(), b.p_hat_w.to_bits());
            assert_eq!(a.p_batt_w.to_bits(), b.p_batt_w.to_bits());
            assert_eq!(a.i_set_a.to_bits(), b.i_set_a.to_bits());
        }
    }

    fn serve(frames: Vec<Vec<u8>>) -> (ControllerRun, Vec<BusFrame>) {
        let (mut plant, ctrl) = inproc_pair();
        let mut ep = ControllerEndpoint::new(ctrl, SessionMode::Lockstep);
        let handle = std::thread::spawn(move || run_controller(&mut ep, ControllerState::new(4, 5.0).unwrap()).unwrap());
        let mut replies = Vec::new();
        for f in frames {
            plant.send(&f).unwrap();
            if let Ok(frame) = crate::bus::decode_frame(&f) {
                if frame.msg_type == crate::bus::MsgType::End {
                    break;
                }
            }
            replies.push(crate::bus::decode_frame(&plant.recv().unwrap().unwrap()).unwrap());
        }
        drop(plant);
        (handle.join().unwrap(), replies)
    }

    #[test]
    fn one_setpoint_per_sensor_frame() {
        let mut frames: Vec<Vec<u8>> = (1..=20)
            .map(|s| encode_frame(&BusFrame::sensor(s, 5000 * s as u64, 100.0 * s as f64, 53.0)).unwrap())
            .collect();
        frames.push(encode_frame(&BusFrame::end(21, 0)).unwrap());
        let (run, replies) = serve(frames);
        assert!(run.clean_end);
        assert_eq!(run.log.len(), 20);
        assert_eq!(replies.len(), 20);
        for (i, r) in replies.iter().enumerate() {
            assert_eq!(r.seq, i as u32 + 1);
            assert_eq!(r.payload[0], run.log[i].i_set_a);
        }
    }

    #[test]
    fn empty_session_exits_cleanly() {
        let (run, replies) = serve(Vec::new());
        assert!(run.log.is_empty());
        assert!(replies.is_empty());
        assert!(!run.clean_end);
    }

    #[test]
    fn corrupted_frame_gets_zero_setpoint() {
        let mut frames: Vec<Vec<u8>> = (1..=3)
            .map(|s| encode_frame(&BusFrame::sensor(s, 0, 40.0, 53.0)).unwrap())
            .collect();
        frames[1][25] ^= 0x10;
        let (run, replies) = serve(frames);
        assert_eq!(run.rejected_frames, 1);
        assert_eq!(run.log.len(), 2);
        assert_eq!(replies[1].seq, 2);
        assert_eq!(replies[1].payload[0], 0.0);
        assert_eq!(replies[2].seq, 3);
    }
}
