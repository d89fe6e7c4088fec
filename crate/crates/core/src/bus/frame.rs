//! Fixed little-endian frame layout exchanged between plant and controller.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HESB" (48 45 53 42)
//!      4     1  version (0x01)
//!      5     1  msg_type (01 SENSOR, 02 SETPOINT, 03 END, 04 FAULT)
//!      6     4  seq, u32 LE
//!     10     8  sim_time_ms, u64 LE
//!     18     2  payload_len, u16 LE
//!     20     n  payload, f64 LE values
//!   20+n     4  crc32 (IEEE, reflected) over bytes [0, 20+n), u32 LE
//! ```

use std::fmt;

use thiserror::Error;

pub const MAGIC: [u8; 4] = [0x48, 0x45, 0x53, 0x42];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Sensor = 0x01,
    Setpoint = 0x02,
    End = 0x03,
    Fault = 0x04,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Self::Sensor),
            0x02 => Some(Self::Setpoint),
            0x03 => Some(Self::End),
            0x04 => Some(Self::Fault),
            _ => None,
        }
    }

    /// Number of f64 payload values this message carries.
    pub fn payload_values(self) -> usize {
        match self {
            Self::Sensor => 2,
            Self::Setpoint => 1,
            Self::End | Self::Fault => 0,
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sensor => "SENSOR",
            Self::Setpoint => "SETPOINT",
            Self::End => "END",
            Self::Fault => "FAULT",
        })
    }
}

/// Decode failures, checked in the order magic, version, length, crc, type, payload.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame truncated: {len} bytes, need {needed}")]
    Truncated { len: usize, needed: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("frame is {len} bytes but header declares {declared}")]
    LengthMismatch { len: usize, declared: usize },
    #[error("crc mismatch: computed {computed:#010x}, frame carries {carried:#010x}")]
    BadCrc { computed: u32, carried: u32 },
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("{msg_type} carries {values} values, expected {expected}")]
    PayloadMismatch {
        msg_type: MsgType,
        values: usize,
        expected: usize,
    },
    #[error("payload length {0} is not a whole number of f64 values")]
    RaggedPayload(usize),
}

#[derive(Debug, Clone)]
pub struct BusFrame {
    pub msg_type: MsgType,
    pub seq: u32,
    pub sim_time_ms: u64,
    pub payload: Vec<f64>,
}

// Payload equality is bitwise so NaN payloads still round-trip as equal.
impl PartialEq for BusFrame {
    fn eq(&self, other: &Self) -> bool {
        self.msg_type == other.msg_type
            && self.seq == other.seq
            && self.sim_time_ms == other.sim_time_ms
            && self.payload.len() == other.payload.len()
            && self
                .payload
                .iter()
                .zip(&other.payload)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl BusFrame {
    pub fn sensor(seq: u32, sim_time_ms: u64, p_pv_w: f64, v_batt_v: f64) -> Self {
        Self {
            msg_type: MsgType::Sensor,
            seq,
            sim_time_ms,
            payload: vec![p_pv_w, v_batt_v],
        }
    }

    pub fn setpoint(seq: u32, sim_time_ms: u64, i_set_a: f64) -> Self {
        Self {
            msg_type: MsgType::Setpoint,
            seq,
            sim_time_ms,
            payload: vec![i_set_a],
        }
    }

    pub fn end(seq: u32, sim_time_ms: u64) -> Self {
        Self {
            msg_type: MsgType::End,
            seq,
            sim_time_ms,
            payload: Vec::new(),
        }
    }

    pub fn fault(seq: u32, sim_time_ms: u64) -> Self {
        Self {
            msg_type: MsgType::Fault,
            seq,
            sim_time_ms,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len() + CRC_LEN
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn encode_frame(frame: &BusFrame) -> Result<Vec<u8>, FrameError> {
    let expected = frame.msg_type.payload_values();
    if frame.payload.len() != expected {
        return Err(FrameError::PayloadMismatch {
            msg_type: frame.msg_type,
            values: frame.payload.len(),
            expected,
        });
    }
    let payload_len = 8 * frame.payload.len();
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.sim_time_ms.to_le_bytes());
    out.extend_from_slice(&(payload_len as u16).to_le_bytes());
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<BusFrame, FrameError> {
    let truncated = |needed| FrameError::Truncated {
        len: bytes.len(),
        needed,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN + CRC_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes.len() < 5 {
        return Err(truncated(HEADER_LEN + CRC_LEN));
    }
    if bytes[4] != VERSION {
        return Err(FrameError::BadVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN + CRC_LEN));
    }
    let payload_len = u16::from_le_bytes([bytes[18], bytes[19]]) as usize;
    let declared = HEADER_LEN + payload_len + CRC_LEN;
    if bytes.len() < declared {
        return Err(truncated(declared));
    }
    if bytes.len() > declared {
        return Err(FrameError::LengthMismatch {
            len: bytes.len(),
            declared,
        });
    }
    let body = &bytes[..HEADER_LEN + payload_len];
    let carried = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if computed != carried {
        return Err(FrameError::BadCrc { computed, carried });
    }
    let msg_type = MsgType::from_byte(bytes[5]).ok_or(FrameError::UnknownMsgType(bytes[5]))?;
    if !payload_len.is_multiple_of(8) {
        return Err(FrameError::RaggedPayload(payload_len));
    }
    let values = payload_len / 8;
    if values != msg_type.payload_values() {
        return Err(FrameError::PayloadMismatch {
            msg_type,
            values,
            expected: msg_type.payload_values(),
        });
    }
    let seq = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let sim_time_ms = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let payload = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(BusFrame {
        msg_type,
        seq,
        sim_time_ms,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_matches_ieee_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn sensor_frame_is_40_bytes() {
        let f = BusFrame::sensor(1, 0, 0.0, 53.0);
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..6], &[0x48, 0x45, 0x53, 0x42, 0x01, 0x01]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[18..20], &[16, 0]);
        assert_eq!(&bytes[28..36], &53.0f64.to_le_bytes());
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn end_frame_is_24_bytes() {
        let bytes = encode_frame(&BusFrame::end(7, 1000)).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode_frame(&bytes).unwrap(), BusFrame::end(7, 1000));
    }

    #[test]
    fn encode_rejects_wrong_payload_arity() {
        let mut f = BusFrame::setpoint(1, 0, 1.0);
        f.payload.push(2.0);
        assert!(matches!(encode_frame(&f), Err(FrameError::PayloadMismatch { .. })));
    }

    #[test]
    fn empty_input_is_truncation() {
        assert!(matches!(decode_frame(&[]), Err(FrameError::Truncated { len: 0, .. })));
    }

    #[test]
    fn magic_is_checked_before_crc() {
        let mut bytes = encode_frame(&BusFrame::setpoint(3, 15_000, -4.25)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_frame(&bytes), Err(FrameError::BadMagic(_))));
    }

    #[test]
    fn version_is_checked_before_crc() {
        let mut bytes = encode_frame(&BusFrame::setpoint(3, 15_000, -4.25)).unwrap();
        bytes[4] = 2;
        assert_eq!(decode_frame(&bytes), Err(FrameError::BadVersion(2)));
    }

    #[test]
    fn trailing_bytes_are_a_length_error() {
        let mut bytes = encode_frame(&BusFrame::end(1, 0)).unwrap();
        bytes.push(0);
        assert!(matches!(decode_frame(&bytes), Err(FrameError::LengthMismatch { .. })));
        bytes.truncate(23);
        assert!(matches!(decode_frame(&bytes), Err(FrameError::Truncated { .. })));
    }

    #[test]
    fn unknown_type_with_valid_crc() {
        let mut bytes = encode_frame(&BusFrame::end(1, 0)).unwrap();
        bytes[5] = 0x09;
        let crc = crc32(&bytes[..20]);
        bytes[20..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode_frame(&bytes), Err(FrameError::UnknownMsgType(0x09)));
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let bytes = encode_frame(&BusFrame::sensor(42, 210_000, 812.5, 53.7)).unwrap();
        for bit in 0..bytes.len() * 8 {
            let mut corrupt = bytes.clone();
            corrupt[bit / 8] ^= 1 << (bit % 8);
            assert!(decode_frame(&corrupt).is_err(), "bit {bit} flip accepted");
        }
    }
}
