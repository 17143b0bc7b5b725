//! Binary framing for tensors, control and tool messages.
//!
//! Tensor encoding (all integers little-endian):
//!
//! ```text
//! dtype: u8 | ndims: u8 | dims: ndims x u32 | values: row-major, densely packed
//! ```
//!
//! Every message travels in an envelope `kind: u8 | len: u64 | payload`.
//! Payload layouts per kind are documented on [`Message`].

use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::tensor::{numel, DType, Storage, Tensor};

pub const PROTOCOL_MAJOR: u16 = 1;
pub const PROTOCOL_MINOR: u16 = 0;
/// Default cap on a single frame payload (1 GiB).
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 30;
/// `TOOL_RETRIEVE` timeout meaning "wait forever".
pub const WAIT_FOREVER_MS: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated tensor header: needed {needed} more bytes")]
    TruncatedHeader { needed: usize },
    #[error("truncated tensor payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("truncated {0} payload")]
    TruncatedMessage(&'static str),
    #[error("unknown dtype code 0x{0:02X}")]
    UnknownDType(u8),
    #[error("unknown frame kind 0x{0:02X}")]
    UnknownFrameKind(u8),
    #[error("tensor with {ndims} dims / extent {extent} does not fit the encoding")]
    DimensionOverflow { ndims: usize, extent: usize },
    #[error("frame payload of {len} bytes exceeds cap of {cap}")]
    Oversize { len: u64, cap: u64 },
    #[error("{kind:?} payload has {extra} trailing bytes")]
    TrailingBytes { kind: FrameKind, extra: usize },
    #[error("invalid utf-8 in {0}")]
    BadUtf8(&'static str),
    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
    #[error("protocol version mismatch: local {local}.x, peer {peer}.x")]
    VersionMismatch { local: u16, peer: u16 },
    #[error("role conflict: both ends are {0:?}")]
    RoleConflict(Role),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, WireError>;

pub fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0x01,
        DType::F64 => 0x02,
        DType::I32 => 0x03,
        DType::I64 => 0x04,
        DType::U8 => 0x05,
    }
}

pub fn dtype_from_code(code: u8) -> Result<DType> {
    Ok(match code {
        0x01 => DType::F32,
        0x02 => DType::F64,
        0x03 => DType::I32,
        0x04 => DType::I64,
        0x05 => DType::U8,
        other => return Err(WireError::UnknownDType(other)),
    })
}

/// Appends the tensor encoding to `out`.
pub fn encode_tensor_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(WireError::DimensionOverflow {
            ndims: t.ndim(),
            extent: 0,
        });
    }
    if let Some(&extent) = t.shape().iter().find(|&&d| d > u32::MAX as usize) {
        return Err(WireError::DimensionOverflow {
            ndims: t.ndim(),
            extent,
        });
    }
    out.reserve(2 + 4 * t.ndim() + t.size_bytes());
    out.push(dtype_code(t.dtype()));
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.storage() {
        Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::U8(v) => out.extend_from_slice(v),
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

/// Reads as many bytes as are available up to `buf.len()`; returns the count.
fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn read_header_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    let got = read_up_to(r, &mut buf)?;
    if got < n {
        return Err(WireError::TruncatedHeader { needed: n - got });
    }
    Ok(buf)
}

/// Decodes one tensor, consuming exactly its encoded bytes.
pub fn decode_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let head = read_header_bytes(r, 2)?;
    let dtype = dtype_from_code(head[0])?;
    let ndims = head[1] as usize;
    let dims_raw = read_header_bytes(r, 4 * ndims)?;
    let shape: Vec<usize> = dims_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = numel(&shape);
    let expected = count
        .checked_mul(dtype.byte_width())
        .ok_or(WireError::DimensionOverflow { ndims, extent: count })?;
    // Read in bounded chunks so a lying header cannot force a huge allocation
    // before the bytes actually arrive.
    let mut raw = Vec::with_capacity(expected.min(1 << 20));
    let mut chunk = [0u8; 64 * 1024];
    while raw.len() < expected {
        let want = (expected - raw.len()).min(chunk.len());
        let got = read_up_to(r, &mut chunk[..want])?;
        raw.extend_from_slice(&chunk[..got]);
        if got < want {
            return Err(WireError::TruncatedPayload {
                expected,
                got: raw.len(),
            });
        }
    }
    let storage = match dtype {
        DType::F32 => Storage::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => Storage::F64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I32 => Storage::I32(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I64 => Storage::I64(
            raw.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => Storage::U8(raw),
    };
    Ok(Tensor::new(shape, storage).expect("length derived from shape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Tensor = 0x01,
    Hello = 0x02,
    LoadPartition = 0x03,
    FwdReq = 0x04,
    FwdBwdReq = 0x05,
    GradResp = 0x06,
    Step = 0x07,
    FetchWeights = 0x08,
    WeightsResp = 0x09,
    ToolBegin = 0x0A,
    ToolRetrieve = 0x0B,
    ToolResult = 0x0C,
    ThermalReport = 0x0D,
    Shutdown = 0x0E,
    Error = 0x0F,
}

impl FrameKind {
    pub const ALL: [FrameKind; 15] = [
        FrameKind::Tensor,
        FrameKind::Hello,
        FrameKind::LoadPartition,
        FrameKind::FwdReq,
        FrameKind::FwdBwdReq,
        FrameKind::GradResp,
        FrameKind::Step,
        FrameKind::FetchWeights,
        FrameKind::WeightsResp,
        FrameKind::ToolBegin,
        FrameKind::ToolRetrieve,
        FrameKind::ToolResult,
        FrameKind::ThermalReport,
        FrameKind::Shutdown,
        FrameKind::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<FrameKind> {
        FrameKind::ALL
            .iter()
            .copied()
            .find(|k| k.code() == code)
            .ok_or(WireError::UnknownFrameKind(code))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&frame.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads one envelope. A clean EOF before the first byte surfaces as a
/// transport error of kind `UnexpectedEof`.
pub fn read_frame<R: Read>(r: &mut R, max_payload: u64) -> Result<Frame> {
    read_frame_timed(r, max_payload).map(|(f, _)| f)
}

/// Like [`read_frame`], also returning when the envelope header arrived.
pub fn read_frame_timed<R: Read>(r: &mut R, max_payload: u64) -> Result<(Frame, std::time::Instant)> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    let arrived = std::time::Instant::now();
    let kind = FrameKind::from_code(head[0])?;
    let len = u64::from_le_bytes(head[1..9].try_into().unwrap());
    if len > max_payload {
        return Err(WireError::Oversize { len, cap: max_payload });
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((Frame { kind, payload }, arrived))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Host,
    Worker,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Host => 0,
            Role::Worker => 1,
        }
    }

    fn from_code(c: u8) -> Result<Role> {
        match c {
            0 => Ok(Role::Host),
            1 => Ok(Role::Worker),
            other => Err(WireError::Protocol(format!("unknown role {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub layer: u32,
    pub slot: u8,
    pub tensor: Tensor,
}

/// Typed messages and their payload layouts.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Tensor encoding. Also the reply to `FwdReq`.
    Tensor(Tensor),
    /// `major: u16 | minor: u16 | role: u8` (0 host, 1 worker)
    Hello { major: u16, minor: u16, role: Role },
    /// `seed: u64 | partition` where the partition bytes (rest of payload)
    /// come from `graph::serialize_partition`. The seed keys dropout streams.
    LoadPartition { seed: u64, partition: Vec<u8> },
    /// `batch: u32 | microbatch: u32 | activations`
    FwdReq {
        batch: u32,
        microbatch: u32,
        activations: Tensor,
    },
    /// `batch: u32 | microbatch: u32 | activations | labels`
    FwdBwdReq {
        batch: u32,
        microbatch: u32,
        activations: Tensor,
        labels: Tensor,
    },
    /// `batch: u32 | microbatch: u32 | compute_us: u64 | loss | grad`
    GradResp {
        batch: u32,
        microbatch: u32,
        compute_us: u64,
        loss: Tensor,
        grad: Tensor,
    },
    /// `lr: f64`
    Step { lr: f64 },
    /// empty
    FetchWeights,
    /// `count: u32 | count x (layer: u32 | slot: u8 | tensor)`
    WeightsResp(Vec<WeightEntry>),
    /// `ticket: u64 | name: str | args: bytes`. Requests carry ticket 0; the
    /// worker acknowledges with the assigned ticket and empty args.
    ToolBegin { ticket: u64, name: String, args: Vec<u8> },
    /// `timeout_ms: u64` (`u64::MAX` waits forever)
    ToolRetrieve { timeout_ms: u64 },
    /// `ticket: u64 | start_us: u64 | end_us: u64 | status: u8 | payload: bytes`
    ToolResult {
        ticket: u64,
        start_us: u64,
        end_us: u64,
        status: u8,
        payload: Vec<u8>,
    },
    /// `heat: f64 | state: u8 | throttle: f64`. Also acknowledges `Step`.
    ThermalReport { heat: f64, state: u8, throttle: f64 },
    /// empty
    Shutdown,
    /// `code: u16 | message: utf-8 (rest of payload)`
    Error { code: u16, message: String },
}

/// Little-endian payload builder.
#[derive(Default)]
pub struct PayloadWriter {
    pub buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }
    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }
    pub fn tensor(&mut self, t: &Tensor) -> Result<&mut Self> {
        encode_tensor_into(t, &mut self.buf)?;
        Ok(self)
    }
}

/// Cursor over a payload; every read reports truncation against `what`.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        PayloadReader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::TruncatedMessage(self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| WireError::BadUtf8(self.what))
    }
    pub fn tensor(&mut self) -> Result<Tensor> {
        let mut rest = &self.buf[self.pos..];
        let before = rest.len();
        let t = decode_tensor(&mut rest)?;
        self.pos += before - rest.len();
        Ok(t)
    }
    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Message {
    pub fn kind(&self) -> FrameKind {
        match self {
            Message::Tensor(_) => FrameKind::Tensor,
            Message::Hello { .. } => FrameKind::Hello,
            Message::LoadPartition { .. } => FrameKind::LoadPartition,
            Message::FwdReq { .. } => FrameKind::FwdReq,
            Message::FwdBwdReq { .. } => FrameKind::FwdBwdReq,
            Message::GradResp { .. } => FrameKind::GradResp,
            Message::Step { .. } => FrameKind::Step,
            Message::FetchWeights => FrameKind::FetchWeights,
            Message::WeightsResp(_) => FrameKind::WeightsResp,
            Message::ToolBegin { .. } => FrameKind::ToolBegin,
            Message::ToolRetrieve { .. } => FrameKind::ToolRetrieve,
            Message::ToolResult { .. } => FrameKind::ToolResult,
            Message::ThermalReport { .. } => FrameKind::ThermalReport,
            Message::Shutdown => FrameKind::Shutdown,
            Message::Error { .. } => FrameKind::Error,
        }
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let mut w = PayloadWriter::default();
        match self {
            Message::Tensor(t) => {
                w.tensor(t)?;
            }
            Message::Hello { major, minor, role } => {
                w.u16(*major).u16(*minor).u8(role.code());
            }
            Message::LoadPartition { seed, partition } => {
                w.u64(*seed);
                w.buf.extend_from_slice(partition);
            }
            Message::FwdReq {
                batch,
                microbatch,
                activations,
            } => {
                w.u32(*batch).u32(*microbatch).tensor(activations)?;
            }
            Message::FwdBwdReq {
                batch,
                microbatch,
                activations,
                labels,
            } => {
                w.u32(*batch).u32(*microbatch).tensor(activations)?.tensor(labels)?;
            }
            Message::GradResp {
                batch,
                microbatch,
                compute_us,
                loss,
                grad,
            } => {
                w.u32(*batch)
                    .u32(*microbatch)
                    .u64(*compute_us)
                    .tensor(loss)?
                    .tensor(grad)?;
            }
            Message::Step { lr } => {
                w.f64(*lr);
            }
            Message::FetchWeights | Message::Shutdown => {}
            Message::WeightsResp(entries) => {
                w.u32(entries.len() as u32);
                for e in entries {
                    w.u32(e.layer).u8(e.slot).tensor(&e.tensor)?;
                }
            }
            Message::ToolBegin { ticket, name, args } => {
                w.u64(*ticket).str(name).bytes(args);
            }
            Message::ToolRetrieve { timeout_ms } => {
                w.u64(*timeout_ms);
            }
            Message::ToolResult {
                ticket,
                start_us,
                end_us,
                status,
                payload,
            } => {
                w.u64(*ticket).u64(*start_us).u64(*end_us).u8(*status).bytes(payload);
            }
            Message::ThermalReport { heat, state, throttle } => {
                w.f64(*heat).u8(*state).f64(*throttle);
            }
            Message::Error { code, message } => {
                w.u16(*code);
                w.buf.extend_from_slice(message.as_bytes());
            }
        }
        Ok(Frame {
            kind: self.kind(),
            payload: w.buf,
        })
    }

    pub fn from_frame(frame: &Frame) -> Result<Message> {
        let what = match frame.kind {
            FrameKind::Tensor => "TENSOR",
            FrameKind::Hello => "HELLO",
            FrameKind::LoadPartition => "LOAD_PARTITION",
            FrameKind::FwdReq => "FWD_REQ",
            FrameKind::FwdBwdReq => "FWDBWD_REQ",
            FrameKind::GradResp => "GRAD_RESP",
            FrameKind::Step => "STEP",
            FrameKind::FetchWeights => "FETCH_WEIGHTS",
            FrameKind::WeightsResp => "WEIGHTS_RESP",
            FrameKind::ToolBegin => "TOOL_BEGIN",
            FrameKind::ToolRetrieve => "TOOL_RETRIEVE",
            FrameKind::ToolResult => "TOOL_RESULT",
            FrameKind::ThermalReport => "THERMAL_REPORT",
            FrameKind::Shutdown => "SHUTDOWN",
            FrameKind::Error => "ERROR",
        };
        let mut r = PayloadReader::new(&frame.payload, what);
        let msg = match frame.kind {
            FrameKind::Tensor => Message::Tensor(r.tensor()?),
            FrameKind::Hello => Message::Hello {
                major: r.u16()?,
                minor: r.u16()?,
                role: Role::from_code(r.u8()?)?,
            },
            FrameKind::LoadPartition => Message::LoadPartition {
                seed: r.u64()?,
                partition: r.rest().to_vec(),
            },
            FrameKind::FwdReq => Message::FwdReq {
                batch: r.u32()?,
                microbatch: r.u32()?,
                activations: r.tensor()?,
            },
            FrameKind::FwdBwdReq => Message::FwdBwdReq {
                batch: r.u32()?,
                microbatch: r.u32()?,
                activations: r.tensor()?,
                labels: r.tensor()?,
            },
            FrameKind::GradResp => Message::GradResp {
                batch: r.u32()?,
                microbatch: r.u32()?,
                compute_us: r.u64()?,
                loss: r.tensor()?,
                grad: r.tensor()?,
            },
            FrameKind::Step => Message::Step { lr: r.f64()? },
            FrameKind::FetchWeights => Message::FetchWeights,
            FrameKind::WeightsResp => {
                let n = r.u32()?;
                let mut entries = Vec::new();
                for _ in 0..n {
                    entries.push(WeightEntry {
                        layer: r.u32()?,
                        slot: r.u8()?,
                        tensor: r.tensor()?,
                    });
                }
                Message::WeightsResp(entries)
            }
            FrameKind::ToolBegin => Message::ToolBegin {
                ticket: r.u64()?,
                name: r.str()?,
                args: r.bytes()?,
            },
            FrameKind::ToolRetrieve => Message::ToolRetrieve { timeout_ms: r.u64()? },
            FrameKind::ToolResult => Message::ToolResult {
                ticket: r.u64()?,
                start_us: r.u64()?,
                end_us: r.u64()?,
                status: r.u8()?,
                payload: r.bytes()?,
            },
            FrameKind::ThermalReport => Message::ThermalReport {
                heat: r.f64()?,
                state: r.u8()?,
                throttle: r.f64()?,
            },
            FrameKind::Shutdown => Message::Shutdown,
            FrameKind::Error => {
                let code = r.u16()?;
                let message = std::str::from_utf8(r.rest())
                    .map_err(|_| WireError::BadUtf8(what))?
                    .to_string();
                Message::Error { code, message }
            }
        };
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes {
                kind: frame.kind,
                extra: r.remaining(),
            });
        }
        Ok(msg)
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    write_frame(w, &msg.to_frame()?)
}

pub fn read_message<R: Read>(r: &mut R, max_payload: u64) -> Result<Message> {
    Message::from_frame(&read_frame(r, max_payload)?)
}

/// Write half of a connection shared between threads. Each message is encoded
/// fully before the lock is taken and written with one `write_all`, so frames
/// from different threads never interleave.
pub struct FrameWriter<W: Write> {
    inner: Arc<Mutex<W>>,
}

impl<W: Write> Clone for FrameWriter<W> {
    fn clone(&self) -> Self {
        FrameWriter {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<W: Write> FrameWriter<W> {
    pub fn new(w: W) -> Self {
        FrameWriter {
            inner: Arc::new(Mutex::new(w)),
        }
    }

    pub fn send_frame(&self, frame: &Frame) -> Result<()> {
        let bytes = frame.to_bytes();
        let mut w = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn send(&self, msg: &Message) -> Result<()> {
        self.send_frame(&msg.to_frame()?)
    }
}

/// ERROR frame codes. Codes from 100 up belong to the tool lane.
pub mod error_code {
    pub const PROTOCOL: u16 = 1;
    pub const NO_PARTITION: u16 = 2;
    pub const SHAPE_MISMATCH: u16 = 3;
    pub const NON_FINITE: u16 = 4;
    pub const NO_GRADS: u16 = 5;
    pub const OVER_MEMORY: u16 = 6;
    pub const BAD_PARTITION: u16 = 7;
    pub const TRAINING_PENDING: u16 = 8;
    pub const UNKNOWN_TOOL: u16 = 100;
    pub const QUEUE_FULL: u16 = 101;
    pub const NOTHING_PENDING: u16 = 102;
    pub const NOT_READY: u16 = 103;
    pub const TOOL_FAILED: u16 = 104;

    pub fn is_tool(code: u16) -> bool {
        code >= 100
    }

    pub fn name(code: u16) -> &'static str {
        match code {
            PROTOCOL => "protocol",
            NO_PARTITION => "no-partition",
            SHAPE_MISMATCH => "shape-mismatch",
            NON_FINITE => "non-finite",
            NO_GRADS => "no-grads",
            OVER_MEMORY => "over-memory",
            BAD_PARTITION => "bad-partition",
            TRAINING_PENDING => "training-pending",
            UNKNOWN_TOOL => "unknown-tool",
            QUEUE_FULL => "queue-full",
            NOTHING_PENDING => "nothing-pending",
            NOT_READY => "not-ready",
            TOOL_FAILED => "tool-failed",
            _ => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Session {
    pub local_role: Role,
    pub peer_role: Role,
    pub peer_major: u16,
    pub peer_minor: u16,
}

/// Exchanges HELLO frames. Both sides send first, then read.
pub fn handshake<S: Read + Write>(conn: &mut S, role: Role, major: u16, minor: u16) -> Result<Session> {
    write_message(conn, &Message::Hello { major, minor, role })?;
    match read_message(conn, DEFAULT_MAX_PAYLOAD)? {
        Message::Hello {
            major: pm,
            minor: pn,
            role: pr,
        } => {
            if pm != major {
                return Err(WireError::VersionMismatch { local: major, peer: pm });
            }
            if pr == role {
                return Err(WireError::RoleConflict(role));
            }
            Ok(Session {
                local_role: role,
                peer_role: pr,
                peer_major: pm,
                peer_minor: pn,
            })
        }
        Message::Error { code, message } => Err(WireError::Protocol(format!("peer error {code}: {message}"))),
        other => Err(WireError::Protocol(format!("expected HELLO, got {:?}", other.kind()))),
    }
}
