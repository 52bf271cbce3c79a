//! Binary client/server message catalog.
//!
//! Every frame is `len(4, big-endian) | kind(1) | body`, where `len` counts
//! the kind byte and the body. Body layouts (all integers big-endian, lists
//! are a `u32` count followed by the items, blobs a `u32` length followed by
//! the bytes):
//!
//! | kind | body |
//! |------|------|
//! | CODE_CHECK, CODE_NEED, CODE_OK | hash(16) |
//! | CODE_UPLOAD | hash(16), bundle (rest of frame) |
//! | EXECUTE | task_id(4), has_alt(1), [alt_id(4)], strategy(1), code_hash(16), target(16), params(list), statics(list), state(blob) |
//! | OBJECT_FETCH | guid(16) |
//! | OBJECT_PUSH | guid(16), graph stream (rest of frame) |
//! | RESULT | status(1), return(blob), modified_state(blob), bytes_received(8), exec_nanos(8), cached(list) |
//! | REMOTE_ERROR | code(1), UTF-8 message (rest of frame) |
//! | PING, PONG | empty |
//! | PROBE | zero bytes of any length |

use std::fmt;

use crate::codec::{put_blob, put_guid_list, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::object::{Digest, Guid, TransmissionStrategy};

/// Largest permitted body length.
pub const MAX_BODY_LEN: usize = (1 << 31) - 1;

pub const FRAME_HEADER_LEN: usize = 4;

/// Size of the throughput probe body.
pub const PROBE_BYTES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    CodeCheck = 1,
    CodeNeed = 2,
    CodeUpload = 3,
    CodeOk = 4,
    Execute = 5,
    ObjectFetch = 6,
    ObjectPush = 7,
    Result = 8,
    RemoteError = 9,
    Ping = 10,
    Pong = 11,
    Probe = 12,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match v {
            1 => CodeCheck,
            2 => CodeNeed,
            3 => CodeUpload,
            4 => CodeOk,
            5 => Execute,
            6 => ObjectFetch,
            7 => ObjectPush,
            8 => Result,
            9 => RemoteError,
            10 => Ping,
            11 => Pong,
            12 => Probe,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecuteBody {
    pub task_id: u32,
    /// Server-side substitute implementation to run instead of `task_id`.
    pub alternative_impl_id: Option<u32>,
    pub strategy: TransmissionStrategy,
    pub code_hash: Digest,
    pub target_root: Guid,
    pub param_roots: Vec<Guid>,
    pub static_roots: Vec<Guid>,
    /// Graph stream of the reachable state.
    pub state: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultBody {
    pub status: ResultStatus,
    pub return_payload: Vec<u8>,
    /// Graph stream of every node whose content changed or was created.
    pub modified_state: Vec<u8>,
    pub bytes_received: u64,
    pub exec_nanos: u64,
    /// Proxyable nodes the server holds in full and stored in its object
    /// cache at the end of the session. The client acknowledges exactly
    /// these in its cache view.
    pub cached: Vec<Guid>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RemoteErrorCode {
    CodeUnknown = 1,
    UnknownTask = 2,
    TaskFailed = 3,
    Protocol = 4,
    HashMismatch = 5,
    Busy = 6,
    FetchTimeout = 7,
}

impl RemoteErrorCode {
    fn from_u8(v: u8) -> Option<Self> {
        use RemoteErrorCode::*;
        Some(match v {
            1 => CodeUnknown,
            2 => UnknownTask,
            3 => TaskFailed,
            4 => Protocol,
            5 => HashMismatch,
            6 => Busy,
            7 => FetchTimeout,
            _ => return None,
        })
    }
}

impl fmt::Display for RemoteErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::CodeUnknown => "code-unknown",
            Self::UnknownTask => "unknown-task",
            Self::TaskFailed => "task-failed",
            Self::Protocol => "protocol",
            Self::HashMismatch => "hash-mismatch",
            Self::Busy => "busy",
            Self::FetchTimeout => "fetch-timeout",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireMessage {
    CodeCheck(Digest),
    CodeNeed(Digest),
    CodeUpload { hash: Digest, bundle: Vec<u8> },
    CodeOk(Digest),
    Execute(ExecuteBody),
    ObjectFetch(Guid),
    ObjectPush { guid: Guid, node_bytes: Vec<u8> },
    Result(ResultBody),
    RemoteError { code: RemoteErrorCode, message: String },
    Ping,
    Pong,
    Probe { len: usize },
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::CodeCheck(_) => MessageKind::CodeCheck,
            Self::CodeNeed(_) => MessageKind::CodeNeed,
            Self::CodeUpload { .. } => MessageKind::CodeUpload,
            Self::CodeOk(_) => MessageKind::CodeOk,
            Self::Execute(_) => MessageKind::Execute,
            Self::ObjectFetch(_) => MessageKind::ObjectFetch,
            Self::ObjectPush { .. } => MessageKind::ObjectPush,
            Self::Result(_) => MessageKind::Result,
            Self::RemoteError { .. } => MessageKind::RemoteError,
            Self::Ping => MessageKind::Ping,
            Self::Pong => MessageKind::Pong,
            Self::Probe { .. } => MessageKind::Probe,
        }
    }

    /// Encoded size of the whole frame, header included.
    pub fn frame_size(&self) -> usize {
        FRAME_HEADER_LEN + 1 + self.body_len()
    }

    fn body_len(&self) -> usize {
        match self {
            Self::CodeCheck(_) | Self::CodeNeed(_) | Self::CodeOk(_) | Self::ObjectFetch(_) => 16,
            Self::CodeUpload { bundle, .. } => 16 + bundle.len(),
            Self::Execute(b) => {
                4 + 1
                    + if b.alternative_impl_id.is_some() { 4 } else { 0 }
                    + 1
                    + 16
                    + 16
                    + 4
                    + 16 * b.param_roots.len()
                    + 4
                    + 16 * b.static_roots.len()
                    + 4
                    + b.state.len()
            }
            Self::ObjectPush { node_bytes, .. } => 16 + node_bytes.len(),
            Self::Result(r) => {
                1 + 4 + r.return_payload.len() + 4 + r.modified_state.len() + 8 + 8 + 4 + 16 * r.cached.len()
            }
            Self::RemoteError { message, .. } => 1 + message.len(),
            Self::Ping | Self::Pong => 0,
            Self::Probe { len } => *len,
        }
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        match self {
            Self::CodeCheck(h) | Self::CodeNeed(h) | Self::CodeOk(h) => out.extend_from_slice(&h.0),
            Self::CodeUpload { hash, bundle } => {
                out.extend_from_slice(&hash.0);
                out.extend_from_slice(bundle);
            }
            Self::Execute(b) => {
                put_u32(out, b.task_id);
                match b.alternative_impl_id {
                    Some(alt) => {
                        out.push(1);
                        put_u32(out, alt);
                    }
                    None => out.push(0),
                }
                out.push(b.strategy.code());
                out.extend_from_slice(&b.code_hash.0);
                out.extend_from_slice(&b.target_root.0);
                put_guid_list(out, &b.param_roots);
                put_guid_list(out, &b.static_roots);
                put_blob(out, &b.state);
            }
            Self::ObjectFetch(g) => out.extend_from_slice(&g.0),
            Self::ObjectPush { guid, node_bytes } => {
                out.extend_from_slice(&guid.0);
                out.extend_from_slice(node_bytes);
            }
            Self::Result(r) => {
                out.push(match r.status {
                    ResultStatus::Ok => 0,
                    ResultStatus::Error => 1,
                });
                put_blob(out, &r.return_payload);
                put_blob(out, &r.modified_state);
                put_u64(out, r.bytes_received);
                put_u64(out, r.exec_nanos);
                put_guid_list(out, &r.cached);
            }
            Self::RemoteError { code, message } => {
                out.push(*code as u8);
                out.extend_from_slice(message.as_bytes());
            }
            Self::Ping | Self::Pong => {}
            Self::Probe { len } => out.resize(out.len() + len, 0),
        }
    }
}

/// Encodes one frame.
pub fn encode(message: &WireMessage) -> Result<Vec<u8>> {
    let body_len = message.body_len();
    if body_len > MAX_BODY_LEN {
        return Err(Error::OversizeMessage(body_len));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 1 + body_len);
    out.extend_from_slice(&(body_len as u32 + 1).to_be_bytes());
    out.push(message.kind() as u8);
    message.encode_body(&mut out);
    debug_assert_eq!(out.len(), FRAME_HEADER_LEN + 1 + body_len);
    Ok(out)
}

/// Total frame length announced by a 4-byte header.
pub fn frame_len(header: [u8; 4]) -> Result<usize> {
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(Error::protocol(0, "zero-length frame"));
    }
    if len > MAX_BODY_LEN + 1 {
        return Err(Error::protocol(0, format!("frame length {len} over limit")));
    }
    Ok(FRAME_HEADER_LEN + len)
}

/// Decodes the frame at the start of `bytes`, returning the message and the
/// number of bytes consumed. Bytes after the frame are left untouched.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize)> {
    let mut r = Reader::new(bytes);
    let header = r.bytes(FRAME_HEADER_LEN, "frame header")?;
    let total = frame_len([header[0], header[1], header[2], header[3]])?;
    if bytes.len() < total {
        return Err(Error::protocol(
            bytes.len(),
            format!("truncated frame: announced {total} bytes, have {}", bytes.len()),
        ));
    }
    let kind_byte = bytes[FRAME_HEADER_LEN];
    let kind = MessageKind::from_u8(kind_byte).ok_or_else(|| {
        Error::protocol(FRAME_HEADER_LEN, format!("unknown message kind {kind_byte:#04x}"))
    })?;
    let body_start = FRAME_HEADER_LEN + 1;
    let mut body = Reader::with_base(&bytes[body_start..total], body_start);
    let msg = decode_body(kind, &mut body)?;
    if !body.is_empty() {
        return Err(Error::protocol(
            body.offset(),
            format!("{} trailing bytes in {kind:?} body", body.remaining()),
        ));
    }
    Ok((msg, total))
}

fn digest(r: &mut Reader<'_>, what: &str) -> Result<Digest> {
    Ok(Digest(r.guid(what)?.0))
}

fn decode_body(kind: MessageKind, r: &mut Reader<'_>) -> Result<WireMessage> {
    Ok(match kind {
        MessageKind::CodeCheck => WireMessage::CodeCheck(digest(r, "code hash")?),
        MessageKind::CodeNeed => WireMessage::CodeNeed(digest(r, "code hash")?),
        MessageKind::CodeOk => WireMessage::CodeOk(digest(r, "code hash")?),
        MessageKind::CodeUpload => WireMessage::CodeUpload {
            hash: digest(r, "code hash")?,
            bundle: r.rest().to_vec(),
        },
        MessageKind::Execute => {
            let task_id = r.u32("task id")?;
            let at = r.offset();
            let alternative_impl_id = match r.u8("alternative flag")? {
                0 => None,
                1 => Some(r.u32("alternative id")?),
                v => return Err(Error::protocol(at, format!("bad alternative flag {v}"))),
            };
            let at = r.offset();
            let code = r.u8("strategy")?;
            let strategy = TransmissionStrategy::from_code(code)
                .ok_or_else(|| Error::protocol(at, format!("unknown strategy {code}")))?;
            WireMessage::Execute(ExecuteBody {
                task_id,
                alternative_impl_id,
                strategy,
                code_hash: digest(r, "code hash")?,
                target_root: r.guid("target root")?,
                param_roots: r.guid_list("param roots")?,
                static_roots: r.guid_list("static roots")?,
                state: r.blob("state")?.to_vec(),
            })
        }
        MessageKind::ObjectFetch => WireMessage::ObjectFetch(r.guid("fetch guid")?),
        MessageKind::ObjectPush => WireMessage::ObjectPush {
            guid: r.guid("push guid")?,
            node_bytes: r.rest().to_vec(),
        },
        MessageKind::Result => {
            let at = r.offset();
            let status = match r.u8("status")? {
                0 => ResultStatus::Ok,
                1 => ResultStatus::Error,
                v => return Err(Error::protocol(at, format!("bad result status {v}"))),
            };
            WireMessage::Result(ResultBody {
                status,
                return_payload: r.blob("return payload")?.to_vec(),
                modified_state: r.blob("modified state")?.to_vec(),
                bytes_received: r.u64("bytes received")?,
                exec_nanos: r.u64("exec nanos")?,
                cached: r.guid_list("cached guids")?,
            })
        }
        MessageKind::RemoteError => {
            let at = r.offset();
            let c = r.u8("error code")?;
            let code = RemoteErrorCode::from_u8(c)
                .ok_or_else(|| Error::protocol(at, format!("unknown error code {c}")))?;
            let at = r.offset();
            let message = String::from_utf8(r.rest().to_vec())
                .map_err(|_| Error::protocol(at, "error message is not UTF-8"))?;
            WireMessage::RemoteError { code, message }
        }
        MessageKind::Ping => WireMessage::Ping,
        MessageKind::Pong => WireMessage::Pong,
        MessageKind::Probe => {
            let at = r.offset();
            let body = r.rest();
            if let Some(i) = body.iter().position(|b| *b != 0) {
                return Err(Error::protocol(at + i, "non-zero probe byte"));
            }
            WireMessage::Probe { len: body.len() }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ping_is_smallest_frame() {
        assert_eq!(encode(&WireMessage::Ping).unwrap(), [0, 0, 0, 1, 0x0a]);
    }

    #[test]
    fn fetch_layout() {
        let f = encode(&WireMessage::ObjectFetch(Guid::default())).unwrap();
        let mut want = vec![0, 0, 0, 0x11, 0x06];
        want.extend_from_slice(&[0; 16]);
        assert_eq!(f, want);
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = decode(&[0, 0, 0, 1, 0xff]).unwrap_err();
        assert!(matches!(err, Error::Protocol { offset: 4, .. }), "{err}");
    }

    #[test]
    fn zero_length_rejected() {
        assert!(decode(&[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn truncated_execute_rejected() {
        let body = ExecuteBody {
            task_id: 3,
            alternative_impl_id: Some(9),
            strategy: TransmissionStrategy::Lazy,
            code_hash: Digest([1; 16]),
            target_root: Guid::from_u128(5),
            param_roots: vec![Guid::from_u128(6)],
            static_roots: vec![],
            state: b"COG1\0\0\0\0".to_vec(),
        };
        let frame = encode(&WireMessage::Execute(body)).unwrap();
        for cut in 0..frame.len() {
            assert!(decode(&frame[..cut]).is_err(), "cut {cut}");
        }
        let (msg, used) = decode(&frame).unwrap();
        assert_eq!(used, frame.len());
        assert_eq!(msg.kind(), MessageKind::Execute);
    }

    #[test]
    fn length_mismatch_rejected() {
        // PING announcing a 2-byte body it does not have room for in its kind
        assert!(decode(&[0, 0, 0, 2, 0x0a, 0x00]).is_err());
        // CODE_CHECK with a short hash
        let mut f = encode(&WireMessage::CodeCheck(Digest([7; 16]))).unwrap();
        f.pop();
        f[3] -= 1;
        assert!(decode(&f).is_err());
    }

    #[test]
    fn decode_consumes_exactly_one_frame() {
        let mut two = encode(&WireMessage::Ping).unwrap();
        two.extend(encode(&WireMessage::Pong).unwrap());
        let (m, used) = decode(&two).unwrap();
        assert_eq!(m, WireMessage::Ping);
        assert_eq!(decode(&two[used..]).unwrap().0, WireMessage::Pong);
    }

    #[test]
    fn oversize_rejected_before_allocating() {
        let err = encode(&WireMessage::Probe { len: MAX_BODY_LEN + 1 }).unwrap_err();
        assert!(matches!(err, Error::OversizeMessage(n) if n == MAX_BODY_LEN + 1));
    }

    #[test]
    fn probe_must_be_zeros() {
        let f = encode(&WireMessage::Probe { len: 8 }).unwrap();
        assert_eq!(decode(&f).unwrap().0, WireMessage::Probe { len: 8 });
        let mut bad = f.clone();
        bad[9] = 1;
        assert!(decode(&bad).is_err());
    }
}
