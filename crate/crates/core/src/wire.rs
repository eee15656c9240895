//! Length-prefixed frame protocol.
//!
//! Frame layout (integers little-endian):
//!
//! ```text
//! "BFRM" | frame_type u8 | worker_id u32 | sequence_number u64
//!        | payload_length u32 | payload | crc32 u32
//! ```
//!
//! The checksum covers everything before the crc32 field. The same framing
//! carries both the production master/worker traffic and the catalog
//! request/response protocol; only the `frame_type` space differs.

use std::io::Read;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

/// Magic prefix of every frame.
pub const FRAME_MAGIC: [u8; 4] = *b"BFRM";

/// Bytes of framing around the payload.
pub const FRAME_OVERHEAD: usize = 4 + 1 + 4 + 8 + 4 + 4;

/// Upper bound on a frame payload; anything larger is a protocol error.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated frame while reading {0}")]
    Truncated(&'static str),
    #[error("frame checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("frame payload of {0} bytes exceeds the {MAX_PAYLOAD} byte limit")]
    PayloadTooLarge(usize),
    #[error("unknown frame type {0}")]
    UnknownFrameType(u8),
    #[error("peer disconnected")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Production frame types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Hello,
    Event,
    Result,
    Eof,
    Heartbeat,
    Retire,
    Abort,
}

impl FrameType {
    pub fn to_wire(self) -> u8 {
        match self {
            FrameType::Hello => 1,
            FrameType::Event => 2,
            FrameType::Result => 3,
            FrameType::Eof => 4,
            FrameType::Heartbeat => 5,
            FrameType::Retire => 6,
            FrameType::Abort => 7,
        }
    }

    pub fn from_wire(v: u8) -> Option<Self> {
        match v {
            1 => Some(FrameType::Hello),
            2 => Some(FrameType::Event),
            3 => Some(FrameType::Result),
            4 => Some(FrameType::Eof),
            5 => Some(FrameType::Heartbeat),
            6 => Some(FrameType::Retire),
            7 => Some(FrameType::Abort),
            _ => None,
        }
    }
}

/// One frame. The `frame_type` byte is kept raw so different protocols can
/// share the framing; [`Frame::production_type`] gives the typed view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: u8,
    pub worker_id: u32,
    pub sequence: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, worker_id: u32, sequence: u64, payload: Vec<u8>) -> Self {
        Self {
            frame_type: frame_type.to_wire(),
            worker_id,
            sequence,
            payload,
        }
    }

    pub fn control(frame_type: FrameType, worker_id: u32, sequence: u64) -> Self {
        Self::new(frame_type, worker_id, sequence, Vec::new())
    }

    pub fn production_type(&self) -> Result<FrameType, WireError> {
        FrameType::from_wire(self.frame_type).ok_or(WireError::UnknownFrameType(self.frame_type))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_OVERHEAD + self.payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(self.frame_type);
        out.extend_from_slice(&self.worker_id.to_le_bytes());
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes one frame from a buffer that holds exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut reader = bytes;
        let frame = Self::read_from(&mut reader)?;
        if !reader.is_empty() {
            return Err(WireError::Truncated("frame boundary"));
        }
        Ok(frame)
    }

    /// Reads one frame from a byte stream.
    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self, WireError> {
        let mut head = [0u8; 21];
        read_full(reader, &mut head, "frame header")?;
        let magic: [u8; 4] = head[0..4].try_into().unwrap();
        if magic != FRAME_MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let frame_type = head[4];
        let worker_id = u32::from_le_bytes(head[5..9].try_into().unwrap());
        let sequence = u64::from_le_bytes(head[9..17].try_into().unwrap());
        let payload_len = u32::from_le_bytes(head[17..21].try_into().unwrap()) as usize;
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(payload_len));
        }
        let mut payload = Vec::with_capacity(payload_len.min(1 << 20));
        reader
            .take(payload_len as u64)
            .read_to_end(&mut payload)
            .map_err(WireError::Io)?;
        if payload.len() != payload_len {
            return Err(WireError::Truncated("frame payload"));
        }
        let mut crc_bytes = [0u8; 4];
        read_full(reader, &mut crc_bytes, "frame checksum")?;
        let stored = u32::from_le_bytes(crc_bytes);

        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&head);
        hasher.update(&payload);
        let computed = hasher.finalize();
        if stored != computed {
            return Err(WireError::ChecksumMismatch { stored, computed });
        }
        Ok(Self {
            frame_type,
            worker_id,
            sequence,
            payload,
        })
    }
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..]).map_err(WireError::Io)?;
        if n == 0 {
            return Err(WireError::Truncated(what));
        }
        filled += n;
    }
    Ok(())
}

/// One side of an in-process byte-channel connection.
///
/// Frames cross as encoded byte buffers, so the wire format is exercised on
/// every message even though nothing leaves the process.
pub struct WireEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Detached sending handle onto a connection; lets a side thread speak on
/// the same link (heartbeats while the owner is busy).
#[derive(Clone)]
pub struct WireSender {
    tx: Sender<Vec<u8>>,
}

impl WireSender {
    pub fn send(&self, frame: &Frame) -> Result<(), WireError> {
        self.tx
            .send(frame.encode())
            .map_err(|_| WireError::Disconnected)
    }
}

impl WireEndpoint {
    pub fn from_parts(tx: Sender<Vec<u8>>, rx: Receiver<Vec<u8>>) -> Self {
        Self { tx, rx }
    }

    pub fn sender(&self) -> WireSender {
        WireSender {
            tx: self.tx.clone(),
        }
    }

    pub fn send(&self, frame: &Frame) -> Result<(), WireError> {
        if frame.payload.len() > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(frame.payload.len()));
        }
        self.tx
            .send(frame.encode())
            .map_err(|_| WireError::Disconnected)
    }

    pub fn recv(&self) -> Result<Frame, WireError> {
        let bytes = self.rx.recv().map_err(|_| WireError::Disconnected)?;
        Frame::decode(&bytes)
    }

    /// `Ok(None)` on timeout, `Err(Disconnected)` when the peer is gone.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Frame>, WireError> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => Frame::decode(&bytes).map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(WireError::Disconnected),
        }
    }
}

/// Connected pair of in-process endpoints.
pub fn wire_pair() -> (WireEndpoint, WireEndpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        WireEndpoint::from_parts(a_tx, a_rx),
        WireEndpoint::from_parts(b_tx, b_rx),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trips() {
        let frame = Frame::new(FrameType::Result, 3, 99, vec![1, 2, 3, 4, 5]);
        let bytes = frame.encode();
        assert_eq!(bytes.len(), FRAME_OVERHEAD + 5);
        assert_eq!(Frame::decode(&bytes).unwrap(), frame);
    }

    #[test]
    fn empty_payload_frame_round_trips() {
        let frame = Frame::control(FrameType::Eof, 1, 0);
        assert_eq!(Frame::decode(&frame.encode()).unwrap(), frame);
    }

    #[test]
    fn every_byte_flip_detected() {
        let bytes = Frame::new(FrameType::Event, 7, 21, vec![9; 33]).encode();
        for pos in 0..bytes.len() {
            let mut corrupt = bytes.clone();
            corrupt[pos] ^= 0x40;
            assert!(Frame::decode(&corrupt).is_err(), "flip at {pos} undetected");
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = Frame::new(FrameType::Event, 7, 21, vec![9; 33]).encode();
        for cut in 0..bytes.len() {
            assert!(Frame::decode(&bytes[..cut]).is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn production_type_validation() {
        let mut frame = Frame::control(FrameType::Hello, 0, 0);
        assert_eq!(frame.production_type().unwrap(), FrameType::Hello);
        frame.frame_type = 200;
        assert!(matches!(
            frame.production_type(),
            Err(WireError::UnknownFrameType(200))
        ));
    }

    #[test]
    fn endpoints_carry_frames_across_threads() {
        let (master, worker) = wire_pair();
        let handle = std::thread::spawn(move || {
            let frame = worker.recv().unwrap();
            assert_eq!(frame.production_type().unwrap(), FrameType::Event);
            worker
                .send(&Frame::new(FrameType::Result, frame.worker_id, frame.sequence, vec![1]))
                .unwrap();
        });
        master
            .send(&Frame::new(FrameType::Event, 4, 11, vec![0; 16]))
            .unwrap();
        let reply = master.recv().unwrap();
        assert_eq!(reply.sequence, 11);
        assert_eq!(reply.worker_id, 4);
        handle.join().unwrap();
    }

    #[test]
    fn dropped_peer_reports_disconnect() {
        let (master, worker) = wire_pair();
        drop(worker);
        assert!(matches!(master.recv(), Err(WireError::Disconnected)));
        assert!(matches!(
            master.send(&Frame::control(FrameType::Eof, 0, 0)),
            Err(WireError::Disconnected)
        ));
    }

    #[test]
    fn recv_timeout_distinguishes_silence_from_disconnect() {
        let (master, worker) = wire_pair();
        assert!(master
            .recv_timeout(Duration::from_millis(10))
            .unwrap()
            .is_none());
        drop(worker);
        assert!(matches!(
            master.recv_timeout(Duration::from_millis(10)),
            Err(WireError::Disconnected)
        ));
    }
}
