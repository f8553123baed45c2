//! Frame codec for agent-to-agent traffic.
//!
//! `"DSIM" | version | type | context (u64 BE) | len (u32 BE) | payload`,
//! where the payload is JSON with object keys sorted.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CodecError;
use crate::ids::ContextId;

pub const MAGIC: [u8; 4] = *b"DSIM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    Event = 0x01,
    LvtRequest = 0x02,
    LvtResponse = 0x03,
    JobPlace = 0x04,
    PerfPublish = 0x05,
    Register = 0x06,
    Heartbeat = 0x07,
    Result = 0x08,
    ContextCreate = 0x09,
    ContextDestroy = 0x0A,
    Nack = 0x0B,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Event,
        MsgType::LvtRequest,
        MsgType::LvtResponse,
        MsgType::JobPlace,
        MsgType::PerfPublish,
        MsgType::Register,
        MsgType::Heartbeat,
        MsgType::Result,
        MsgType::ContextCreate,
        MsgType::ContextDestroy,
        MsgType::Nack,
    ];
}

impl TryFrom<u8> for MsgType {
    type Error = CodecError;

    fn try_from(b: u8) -> Result<Self, CodecError> {
        MsgType::ALL.iter().copied().find(|t| *t as u8 == b).ok_or(CodecError::BadType(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub context: ContextId,
    pub payload: Vec<u8>,
}

/// JSON with sorted object keys. Going through `Value` sorts them since its
/// map is ordered.
pub fn canonical_json<T: Serialize>(body: &T) -> Result<Vec<u8>, CodecError> {
    let v = serde_json::to_value(body)?;
    Ok(serde_json::to_vec(&v)?)
}

impl Frame {
    pub fn new<T: Serialize>(msg_type: MsgType, context: ContextId, body: &T) -> Result<Frame, CodecError> {
        let payload = canonical_json(body)?;
        if payload.len() > MAX_PAYLOAD as usize {
            return Err(CodecError::Oversize(payload.len().min(u32::MAX as usize) as u32));
        }
        Ok(Frame { msg_type, context, payload })
    }

    pub fn body<T: DeserializeOwned>(&self) -> Result<T, CodecError> {
        Ok(serde_json::from_slice(&self.payload)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.context.0.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decode one frame from the front of `bytes`, returning it and the
    /// number of bytes used.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize), CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::ShortRead);
        }
        let (msg_type, context, len) = parse_header(bytes[..HEADER_LEN].try_into().expect("header"))?;
        let end = HEADER_LEN + len as usize;
        if bytes.len() < end {
            return Err(CodecError::ShortRead);
        }
        Ok((Frame { msg_type, context, payload: bytes[HEADER_LEN..end].to_vec() }, end))
    }

    /// Read one frame. `Ok(None)` on a clean end of stream. A frame with an
    /// unknown version or type is consumed whole before the error comes
    /// back, so the stream stays aligned; see [`CodecError::is_skippable`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>, CodecError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match r.read(&mut header[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return Err(CodecError::ShortRead),
                n => got += n,
            }
        }
        let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        let len = u32::from_be_bytes(header[14..18].try_into().expect("4 bytes"));
        if len > MAX_PAYLOAD {
            return Err(CodecError::Oversize(len));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => CodecError::ShortRead,
            _ => CodecError::Io(e),
        })?;
        let (msg_type, context, _) = parse_header(&header)?;
        Ok(Some(Frame { msg_type, context, payload }))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CodecError> {
        w.write_all(&self.encode())?;
        Ok(())
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, ContextId, u32), CodecError> {
    let magic: [u8; 4] = h[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(CodecError::BadVersion(h[4]));
    }
    let msg_type = MsgType::try_from(h[5])?;
    let context = ContextId(u64::from_be_bytes(h[6..14].try_into().expect("8 bytes")));
    let len = u32::from_be_bytes(h[14..18].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(CodecError::Oversize(len));
    }
    Ok((msg_type, context, len))
}
