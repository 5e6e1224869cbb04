//! DNP3m application framing.
//!
//! A frame is a two byte header followed by the payload:
//!
//! ```text
//! +-----------+--------------+----------------------+
//! | direction | total length | payload (len - 2)    |
//! +-----------+--------------+----------------------+
//!   0x00 request / 0x01 response
//! ```
//!
//! The length byte counts the whole frame, header included, so a single frame
//! carries at most [`MAX_PAYLOAD`] bytes. Longer messages are split into a run
//! of full frames (length 255) closed by one short frame (length < 255). A
//! body whose length is a positive multiple of 253 therefore ends with an
//! empty terminal frame.

use thiserror::Error;

/// Header size in bytes.
pub const HEADER_LEN: usize = 2;
/// Largest value the length byte can hold.
pub const MAX_FRAME_LEN: usize = u8::MAX as usize;
/// Largest payload a single frame can carry.
pub const MAX_PAYLOAD: usize = MAX_FRAME_LEN - HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Request,
    Response,
}

impl Direction {
    pub fn as_byte(self) -> u8 {
        match self {
            Direction::Request => 0x00,
            Direction::Response => 0x01,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(Direction::Request),
            0x01 => Some(Direction::Response),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD} byte frame limit")]
    PayloadTooLarge(usize),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown direction byte {0:#04x}")]
    BadDirection(u8),
    #[error("length byte {0} is shorter than the header")]
    BadLength(u8),
    #[error("frames carry mixed directions")]
    MixedDirection,
    #[error("message ends on a full frame with no terminal frame")]
    IncompleteMessage,
    #[error("frame follows the terminal frame of a message")]
    TrailingFrame,
}

/// One DNP3m wire unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub direction: Direction,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(direction: Direction, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            direction,
            payload: payload.into(),
        }
    }

    /// Value of the length byte: payload plus header.
    pub fn total_length(&self) -> usize {
        self.payload.len() + HEADER_LEN
    }

    /// A full frame signals that the message continues in the next frame.
    pub fn is_full(&self) -> bool {
        self.total_length() == MAX_FRAME_LEN
    }
}

/// A complete application message, possibly spanning several frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub direction: Direction,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(direction: Direction, body: impl Into<Vec<u8>>) -> Self {
        Self {
            direction,
            body: body.into(),
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let len = frame.payload.len();
    if len > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(len));
    }
    let mut out = Vec::with_capacity(len + HEADER_LEN);
    out.push(frame.direction.as_byte());
    out.push((len + HEADER_LEN) as u8);
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning it with whatever
/// follows the declared length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, &[u8]), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let direction = Direction::from_byte(bytes[0]).ok_or(FrameError::BadDirection(bytes[0]))?;
    let total = bytes[1] as usize;
    if total < HEADER_LEN {
        return Err(FrameError::BadLength(bytes[1]));
    }
    if bytes.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let frame = Frame::new(direction, &bytes[HEADER_LEN..total]);
    Ok((frame, &bytes[total..]))
}

pub fn fragment(message: &Message) -> Vec<Frame> {
    let mut frames: Vec<Frame> = message
        .body
        .chunks(MAX_PAYLOAD)
        .map(|chunk| Frame::new(message.direction, chunk))
        .collect();
    if frames.last().is_none_or(Frame::is_full) {
        frames.push(Frame::new(message.direction, Vec::new()));
    }
    frames
}

pub fn reassemble(frames: &[Frame]) -> Result<Message, FrameError> {
    let (last, init) = frames.split_last().ok_or(FrameError::IncompleteMessage)?;
    let direction = last.direction;
    let mut body = Vec::with_capacity(frames.len() * MAX_PAYLOAD);
    for frame in init {
        if frame.direction != direction {
            return Err(FrameError::MixedDirection);
        }
        if !frame.is_full() {
            return Err(FrameError::TrailingFrame);
        }
        body.extend_from_slice(&frame.payload);
    }
    if last.is_full() {
        return Err(FrameError::IncompleteMessage);
    }
    body.extend_from_slice(&last.payload);
    Ok(Message { direction, body })
}

/// Fragments and encodes a message into its wire frames.
pub fn encode_message(message: &Message) -> Vec<Vec<u8>> {
    fragment(message)
        .iter()
        .map(|f| encode_frame(f).expect("fragment never exceeds the frame limit"))
        .collect()
}

/// Decodes a list of individually encoded frames back into one message.
pub fn decode_message<B: AsRef<[u8]>>(frames: &[B]) -> Result<Message, FrameError> {
    let decoded = frames
        .iter()
        .map(|raw| {
            let (frame, rest) = decode_frame(raw.as_ref())?;
            if !rest.is_empty() {
                return Err(FrameError::TrailingFrame);
            }
            Ok(frame)
        })
        .collect::<Result<Vec<_>, _>>()?;
    reassemble(&decoded)
}

/// Incremental decoder for a byte stream such as a TCP connection.
///
/// Bytes may arrive split at arbitrary points; complete messages are yielded
/// once their terminal frame has been read.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    pending: Vec<Frame>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete message, `Ok(None)` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, FrameError> {
        loop {
            let (frame, consumed) = match decode_frame(&self.buf) {
                Ok((frame, rest)) => {
                    let consumed = self.buf.len() - rest.len();
                    (frame, consumed)
                }
                Err(FrameError::Truncated { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            self.buf.drain(..consumed);
            if let Some(first) = self.pending.first() {
                if first.direction != frame.direction {
                    self.pending.clear();
                    return Err(FrameError::MixedDirection);
                }
            }
            let done = !frame.is_full();
            self.pending.push(frame);
            if done {
                let frames = std::mem::take(&mut self.pending);
                return reassemble(&frames).map(Some);
            }
        }
    }

    /// Bytes buffered but not yet part of a complete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_request() {
        let bytes = encode_frame(&Frame::new(Direction::Request, vec![])).unwrap();
        assert_eq!(bytes, vec![0x00, 0x02]);
    }

    #[test]
    fn response_with_payload() {
        let bytes = encode_frame(&Frame::new(Direction::Response, vec![0x41, 0x42])).unwrap();
        assert_eq!(bytes, vec![0x01, 0x04, 0x41, 0x42]);
    }

    #[test]
    fn oversized_payload_rejected() {
        let frame = Frame::new(Direction::Request, vec![0u8; 254]);
        assert_eq!(encode_frame(&frame), Err(FrameError::PayloadTooLarge(254)));
        let frame = Frame::new(Direction::Request, vec![0u8; 253]);
        assert_eq!(encode_frame(&frame).unwrap().len(), 255);
    }

    #[test]
    fn decode_errors() {
        assert_eq!(
            decode_frame(&[0x01]).unwrap_err(),
            FrameError::Truncated {
                needed: 2,
                available: 1
            }
        );
        assert_eq!(
            decode_frame(&[]).unwrap_err(),
            FrameError::Truncated {
                needed: 2,
                available: 0
            }
        );
        assert_eq!(
            decode_frame(&[0x07, 0x03, 0xFF]).unwrap_err(),
            FrameError::BadDirection(0x07)
        );
        assert_eq!(
            decode_frame(&[0x00, 0x01]).unwrap_err(),
            FrameError::BadLength(0x01)
        );
        assert_eq!(
            decode_frame(&[0x00, 0x05, 0xAA]).unwrap_err(),
            FrameError::Truncated {
                needed: 5,
                available: 3
            }
        );
    }

    #[test]
    fn decode_reports_remainder() {
        let (frame, rest) = decode_frame(&[0x00, 0x02, 0x01, 0x03, 0x99]).unwrap();
        assert_eq!(frame, Frame::new(Direction::Request, vec![]));
        assert_eq!(rest, &[0x01, 0x03, 0x99]);
    }

    #[test]
    fn fragment_counts() {
        let small = fragment(&Message::new(Direction::Request, vec![1u8; 10]));
        assert_eq!(small.len(), 1);
        assert_eq!(small[0].total_length(), 12);

        let exact = fragment(&Message::new(Direction::Request, vec![1u8; 253]));
        assert_eq!(
            exact.iter().map(Frame::total_length).collect::<Vec<_>>(),
            vec![255, 2]
        );

        let over = fragment(&Message::new(Direction::Response, vec![1u8; 300]));
        assert_eq!(
            over.iter().map(Frame::total_length).collect::<Vec<_>>(),
            vec![255, 49]
        );
        assert!(over.iter().all(|f| f.direction == Direction::Response));

        let empty = fragment(&Message::new(Direction::Request, vec![]));
        assert_eq!(empty, vec![Frame::new(Direction::Request, vec![])]);
    }

    #[test]
    fn reassemble_errors() {
        assert_eq!(reassemble(&[]), Err(FrameError::IncompleteMessage));
        let full = Frame::new(Direction::Request, vec![0u8; MAX_PAYLOAD]);
        assert_eq!(
            reassemble(std::slice::from_ref(&full)),
            Err(FrameError::IncompleteMessage)
        );
        let tail = Frame::new(Direction::Response, vec![1]);
        assert_eq!(
            reassemble(&[full.clone(), tail]),
            Err(FrameError::MixedDirection)
        );
        let short = Frame::new(Direction::Request, vec![1]);
        assert_eq!(
            reassemble(&[short.clone(), short]),
            Err(FrameError::TrailingFrame)
        );
    }

    #[test]
    fn stream_decoder_handles_split_reads() {
        let msg = Message::new(
            Direction::Response,
            (0..600u32).map(|i| i as u8).collect::<Vec<_>>(),
        );
        let wire: Vec<u8> = encode_message(&msg).concat();
        let mut dec = StreamDecoder::new();
        let mut out = Vec::new();
        for chunk in wire.chunks(7) {
            dec.extend(chunk);
            while let Some(m) = dec.next_message().unwrap() {
                out.push(m);
            }
        }
        assert_eq!(out, vec![msg]);
        assert_eq!(dec.buffered(), 0);
    }
}
