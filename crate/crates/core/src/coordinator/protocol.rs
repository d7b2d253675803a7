//! Length-prefixed JSON frames and the worker message set.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::app_model::{ActionSpec, FunctionId, GuiState};
use crate::error::{Error, Result};
use crate::learner::{EpisodeSequence, ModelSnapshot};
use crate::qnet::MlpParams;

/// Frames larger than this are refused.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub mod codes {
    pub const UNKNOWN_SESSION: &str = "unknown_session";
    pub const MALFORMED: &str = "malformed";
    pub const INVALID_SEQUENCE: &str = "invalid_sequence";
    pub const BACKPRESSURE: &str = "backpressure";
    pub const FINGERPRINT_MISMATCH: &str = "fingerprint_mismatch";
    pub const UNAVAILABLE: &str = "unavailable";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        #[serde(default)]
        cid: u64,
        session_id: String,
        app_fingerprint: String,
    },
    GetQ {
        cid: u64,
        state: GuiState,
        candidates: Vec<ActionSpec>,
        goal: FunctionId,
    },
    GetQResp {
        cid: u64,
        q_values: Vec<f64>,
        chosen: usize,
    },
    AddTrainingData {
        cid: u64,
        sequence: EpisodeSequence,
    },
    Ack {
        cid: u64,
        accepted: usize,
    },
    GetModel {
        cid: u64,
        have_version: u64,
    },
    ModelBlob {
        cid: u64,
        version: u64,
        /// Base64 model bytes; empty when the client is already current.
        bytes: String,
    },
    Error {
        cid: u64,
        code: String,
        message: String,
    },
}

impl WireMessage {
    pub fn cid(&self) -> u64 {
        match self {
            WireMessage::Hello { cid, .. }
            | WireMessage::GetQ { cid, .. }
            | WireMessage::GetQResp { cid, .. }
            | WireMessage::AddTrainingData { cid, .. }
            | WireMessage::Ack { cid, .. }
            | WireMessage::GetModel { cid, .. }
            | WireMessage::ModelBlob { cid, .. }
            | WireMessage::Error { cid, .. } => *cid,
        }
    }

    pub fn error(cid: u64, code: &str, message: impl Into<String>) -> Self {
        WireMessage::Error {
            cid,
            code: code.to_string(),
            message: message.into(),
        }
    }

    /// Converts an error response into [`Error::Remote`].
    pub fn into_result(self) -> Result<WireMessage> {
        match self {
            WireMessage::Error { code, message, .. } => Err(Error::Remote { code, message }),
            other => Ok(other),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|n| (*n as usize) <= MAX_FRAME_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before the header.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn send_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    write_frame(w, &serde_json::to_vec(msg)?)?;
    Ok(())
}

pub fn recv_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>> {
    match read_frame(r)? {
        None => Ok(None),
        Some(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
    }
}

const BLOB_MAGIC: &[u8; 4] = b"DPQM";

/// Model bytes: magic, version, layer sizes, little-endian parameters, and
/// an 8-byte SHA-256 prefix over everything before it.
pub fn encode_model(snap: &ModelSnapshot) -> Vec<u8> {
    let sizes = snap.params.sizes();
    let mut out = Vec::with_capacity(24 + 4 * sizes.len() + 8 * snap.params.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&snap.version.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    for x in snap.params.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelSnapshot> {
    let bad = |m: &str| Error::Protocol(format!("model blob: {m}"));
    if bytes.len() < 24 || &bytes[..4] != BLOB_MAGIC {
        return Err(bad("bad header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 8);
    if &Sha256::digest(body)[..8] != digest {
        return Err(Error::Digest);
    }
    let version = u64::from_le_bytes(body[4..12].try_into().unwrap());
    let n = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut sizes = Vec::with_capacity(n);
    for _ in 0..n {
        let s = body.get(pos..pos + 4).ok_or_else(|| bad("truncated sizes"))?;
        sizes.push(u32::from_le_bytes(s.try_into().unwrap()) as usize);
        pos += 4;
    }
    let rest = &body[pos..];
    if rest.len() % 8 != 0 {
        return Err(bad("ragged parameter block"));
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ModelSnapshot {
        version,
        params: MlpParams::from_parts(sizes, data)?,
    })
}

pub fn model_to_base64(snap: &ModelSnapshot) -> String {
    B64.encode(encode_model(snap))
}

pub fn model_from_base64(s: &str) -> Result<ModelSnapshot> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Protocol(format!("base64: {e}")))?;
    decode_model(&bytes)
}
