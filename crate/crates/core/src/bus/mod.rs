//! The plant/controller boundary: frame codec, ADC emulation, links and sessions.

mod frame;
mod link;
mod quantize;
mod session;

pub use frame::{
    crc32, decode_frame, encode_frame, BusFrame, FrameError, MsgType, CRC_LEN, HEADER_LEN, MAGIC, VERSION,
};
pub use link::{inproc_pair, tcp_pair, FaultyLink, FrameLink, InProcLink, LinkError, TcpLink, MAX_FRAME};
pub use quantize::{quantize, QuantizationConfig, Quantizer};
pub use session::{
    ControllerEndpoint, DelayModel, Direction, Exchange, FrameLog, FrameLogError, Incoming, LogEntry,
    PlantEndpoint, ProtocolReport, SessionError, SessionMode, SetpointSchedule, TransportConfig,
};
