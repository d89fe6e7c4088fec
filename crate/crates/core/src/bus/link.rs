//! Byte transports carrying one encoded frame per message.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("link i/o: {0}")]
    Io(#[from] io::Error),
    #[error("peer hung up")]
    Disconnected,
    #[error("frame of {0} bytes exceeds the link limit")]
    Oversize(usize),
}

/// Largest frame a link will carry: header + u16::MAX payload + crc.
pub const MAX_FRAME: usize = 20 + u16::MAX as usize + 4;

/// One endpoint of a bidirectional, order-preserving frame channel.
pub trait FrameLink: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError>;
    /// `Ok(None)` once the peer has closed its side.
    fn recv(&mut self) -> Result<Option<Vec<u8>>, LinkError>;
}

impl<L: FrameLink + ?Sized> FrameLink for Box<L> {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, LinkError> {
        (**self).recv()
    }
}

/// In-process link over a pair of channels.
pub struct InProcLink {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

pub fn inproc_pair() -> (InProcLink, InProcLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (InProcLink { tx: a_tx, rx: a_rx }, InProcLink { tx: b_tx, rx: b_rx })
}

impl FrameLink for InProcLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        self.tx.send(frame.to_vec()).map_err(|_| LinkError::Disconnected)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, LinkError> {
        Ok(self.rx.recv().ok())
    }
}

/// TCP link: each frame is written as a u32 LE length followed by the frame,
/// in a single write.
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn accept(listener: &TcpListener) -> io::Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::new(stream)
    }
}

/// Connected loopback pair, mostly for tests.
pub fn tcp_pair() -> io::Result<(TcpLink, TcpLink)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let client = TcpLink::connect(listener.local_addr()?)?;
    let server = TcpLink::accept(&listener)?;
    Ok((server, client))
}

impl FrameLink for TcpLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        if frame.len() > MAX_FRAME {
            return Err(LinkError::Oversize(frame.len()));
        }
        let mut buf = Vec::with_capacity(4 + frame.len());
        buf.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        buf.extend_from_slice(frame);
        self.stream.write_all(&buf).map_err(|e| match e.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset => LinkError::Disconnected,
            _ => LinkError::Io(e),
        })
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, LinkError> {
        let mut len = [0u8; 4];
        match self.stream.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset) => {
                return Ok(None)
            }
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(LinkError::Oversize(len));
        }
        let mut frame = vec![0u8; len];
        self.stream.read_exact(&mut frame)?;
        Ok(Some(frame))
    }
}

/// Fault injector: flips chosen bits in chosen outgoing frames.
pub struct FaultyLink<L> {
    inner: L,
    sent: usize,
    flips: Vec<(usize, usize)>,
}

impl<L: FrameLink> FaultyLink<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            sent: 0,
            flips: Vec::new(),
        }
    }

    /// Flip bit `bit` of the `frame_index`-th frame sent (both zero-based).
    pub fn flip_bit(mut self, frame_index: usize, bit: usize) -> Self {
        self.flips.push((frame_index, bit));
        self
    }
}

impl<L: FrameLink> FrameLink for FaultyLink<L> {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        let index = self.sent;
        self.sent += 1;
        let mut out = None::<Vec<u8>>;
        for &(i, bit) in &self.flips {
            if i == index && bit / 8 < frame.len() {
                let buf = out.get_or_insert_with(|| frame.to_vec());
                buf[bit / 8] ^= 1 << (bit % 8);
            }
        }
        self.inner.send(out.as_deref().unwrap_or(frame))
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, LinkError> {
        self.inner.recv()
    }
}
