//! Wire messages: a 4-byte big-endian length followed by one UTF-8 JSON
//! object. Over WebSocket the same objects travel one per text message.

use std::io::{ErrorKind, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_FRAME: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Init {
        window: usize,
        steps: usize,
        cfg_scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effect_label: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Chunk {
        index: usize,
        frames_b64: String,
        shape: Vec<usize>,
    },
    Condition {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effect_label: Option<usize>,
    },
    Result {
        index: usize,
        frames_b64: String,
        chunk_ms: f64,
    },
    Stats {
        chunks: usize,
        mean_ms: f64,
        max_ms: f64,
        p95_ms: f64,
        fps: f64,
    },
    Error {
        code: String,
        message: String,
    },
    /// Acknowledges `init`, `condition` or `close`; `effective_chunk` is the
    /// first chunk index the acknowledged command applies to.
    Ack {
        of: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effective_chunk: Option<usize>,
    },
    Close {},
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Init { .. } => "init",
            Message::Chunk { .. } => "chunk",
            Message::Condition { .. } => "condition",
            Message::Result { .. } => "result",
            Message::Stats { .. } => "stats",
            Message::Error { .. } => "error",
            Message::Ack { .. } => "ack",
            Message::Close {} => "close",
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Message::Error { code: code.into(), message: message.into() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Protocol(format!("payload is not UTF-8: {e}")))?;
        serde_json::from_str(text).map_err(|e| Error::Protocol(format!("bad message: {e}")))
    }
}

/// Little-endian `f32` payload, base64 (standard alphabet, padded).
pub fn encode_tensor(t: &Tensor<f32>) -> String {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_tensor(b64: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = STANDARD.decode(b64).map_err(|e| Error::Protocol(format!("bad base64: {e}")))?;
    let n: usize = shape.iter().product();
    if shape.is_empty() || bytes.len() != n * 4 {
        return Err(Error::Protocol(format!("{} payload bytes for shape {shape:?}", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let json = msg.to_json()?;
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(json.as_bytes());
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Outcome of reading one length-prefixed frame.
#[derive(Debug, PartialEq)]
pub enum FrameRead {
    Payload(Vec<u8>),
    /// Clean end of stream at a frame boundary.
    Eof,
    /// Declared length exceeds the limit; the stream cannot be resynchronized.
    TooLarge(usize),
}

pub fn read_frame<R: Read>(r: &mut R, max_len: usize) -> Result<FrameRead> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(FrameRead::Eof),
            Ok(0) => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > max_len {
        return Ok(FrameRead::TooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Protocol("stream ended inside a frame".into()),
        _ => e.into(),
    })?;
    Ok(FrameRead::Payload(buf))
}

/// Read and parse one message; `Ok(None)` at end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    match read_frame(r, MAX_FRAME)? {
        FrameRead::Payload(p) => Message::from_json(&p).map(Some),
        FrameRead::Eof => Ok(None),
        FrameRead::TooLarge(n) => Err(Error::Protocol(format!("frame of {n} bytes exceeds limit"))),
    }
}
