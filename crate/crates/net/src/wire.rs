//! Length-prefixed binary frames.
//!
//! ```text
//! u32 LE  length of everything after this field (5 + 8 * payload_len)
//! u8      kind: 0 HELLO, 1 UPDATE, 2 PARAM, 3 STOP
//! u32 LE  sender id (the server uses SERVER_ID)
//! f64 LE  payload entries (UPDATE and PARAM only)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const HEADER_LEN: usize = 5;
pub const SERVER_ID: u32 = u32::MAX;
/// Largest accepted frame body, in bytes.
pub const MAX_FRAME: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Hello = 0,
    Update = 1,
    Param = 2,
    Stop = 3,
}

impl Kind {
    pub fn from_byte(b: u8) -> Option<Kind> {
        match b {
            0 => Some(Kind::Hello),
            1 => Some(Kind::Update),
            2 => Some(Kind::Param),
            3 => Some(Kind::Stop),
            _ => None,
        }
    }

    pub fn carries_payload(self) -> bool {
        matches!(self, Kind::Update | Kind::Param)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: Kind,
    pub sender: u32,
    pub payload: Vec<f64>,
}

impl WireMessage {
    pub fn hello(sender: u32) -> Self {
        WireMessage { kind: Kind::Hello, sender, payload: Vec::new() }
    }

    pub fn update(sender: u32, h: Vec<f64>) -> Self {
        WireMessage { kind: Kind::Update, sender, payload: h }
    }

    pub fn param(x: Vec<f64>) -> Self {
        WireMessage { kind: Kind::Param, sender: SERVER_ID, payload: x }
    }

    pub fn stop() -> Self {
        WireMessage { kind: Kind::Stop, sender: SERVER_ID, payload: Vec::new() }
    }

    /// Bit-level equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.sender == other.sender
            && self.payload.len() == other.payload.len()
            && self.payload.iter().zip(&other.payload).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame length {0} is shorter than the {HEADER_LEN}-byte header")]
    ShortLength(u32),
    #[error("frame length {0} exceeds the {MAX_FRAME}-byte limit")]
    Oversized(u32),
    #[error("payload of {0} bytes is not a whole number of f64 values")]
    RaggedPayload(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("{kind:?} frames carry no payload, got {values} values")]
    UnexpectedPayload { kind: Kind, values: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let body = HEADER_LEN + 8 * msg.payload.len();
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&(body as u32).to_le_bytes());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.sender.to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_body(body: &[u8]) -> Result<WireMessage, WireError> {
    let kind = Kind::from_byte(body[0]).ok_or(WireError::UnknownKind(body[0]))?;
    let sender = u32::from_le_bytes(body[1..5].try_into().expect("4 bytes"));
    let rest = &body[HEADER_LEN..];
    if !rest.len().is_multiple_of(8) {
        return Err(WireError::RaggedPayload(rest.len()));
    }
    if !kind.carries_payload() && !rest.is_empty() {
        return Err(WireError::UnexpectedPayload { kind, values: rest.len() / 8 });
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(WireMessage { kind, sender, payload })
}

fn check_length(len: u32) -> Result<usize, WireError> {
    let body = len as usize;
    if body < HEADER_LEN {
        return Err(WireError::ShortLength(len));
    }
    if body > MAX_FRAME {
        return Err(WireError::Oversized(len));
    }
    Ok(body)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes the first frame in `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(WireMessage, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated { needed: 4, available: bytes.len() });
    }
    let body = check_length(u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")))?;
    if bytes.len() < 4 + body {
        return Err(WireError::Truncated { needed: 4 + body, available: bytes.len() });
    }
    Ok((parse_body(&bytes[4..4 + body])?, 4 + body))
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the first byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated { needed: 4, available: got }),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let body = check_length(u32::from_le_bytes(len))?;
    let mut buf = vec![0u8; body];
    let mut filled = 0;
    while filled < body {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(WireError::Truncated { needed: 4 + body, available: 4 + filled }),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    parse_body(&buf).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_frame_layout() {
        let bytes = encode(&WireMessage { kind: Kind::Stop, sender: 3, payload: vec![] });
        assert_eq!(bytes, [5, 0, 0, 0, 3, 3, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap().sender, 3);
    }

    #[test]
    fn update_frame_layout() {
        let msg = WireMessage::update(1, vec![1.0, -1.0]);
        let bytes = encode(&msg);
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..4], &21u32.to_le_bytes());
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[9..17], &1.0f64.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn stream_reading() {
        let mut data = encode(&WireMessage::hello(2));
        data.extend(encode(&WireMessage::param(vec![0.5; 3])));
        let mut cursor = io::Cursor::new(data);
        assert_eq!(read_message(&mut cursor).unwrap().unwrap().kind, Kind::Hello);
        assert_eq!(read_message(&mut cursor).unwrap().unwrap().payload, vec![0.5; 3]);
        assert!(read_message(&mut cursor).unwrap().is_none());
    }
}
