//! Framed request/reply protocol between devices and the backend.
//!
//! Every frame is a 4-byte big-endian length, a kind byte and a body; the
//! length counts the kind byte and the body. Multi-byte integers in bodies
//! are big-endian except fingerprint values, which follow the token layout.
//!
//! | kind | body |
//! |------|------|
//! | 0 EnrollBegin | device id (u16), model code (u8) |
//! | 1 EnrollData | device id, pair count (u16), pairs |
//! | 2 EnrollCommit | device id |
//! | 3 AuthRequest | device id, operation (u8 length + bytes), nonce (u32), payload count (u8), payloads (u16 length + bytes), token (u16 length + bytes) |
//! | 4 Reply | 0 = ack, or 1 followed by decision, matched count and reason (one byte each) |
//! | 5 Error | error code (u8), UTF-8 message |
//!
//! A pair is the feature code (u8), the argument count (u8), each argument
//! (u16), then a value tag and value exactly as in a token entry.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{AuthResult, Backend, BackendError, Decision, Reason};
use crate::client::Token;
use crate::hwsim::{FingerprintValue, Model, TrainingPair};
use crate::mapping::{Feature, HardwareTask, Request};

/// Largest accepted value of the length prefix.
pub const MAX_FRAME: usize = 1 << 20;
/// Pairs sent per EnrollData frame by [`ServiceClient::enroll_data`].
pub const PAIRS_PER_FRAME: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    EnrollBegin = 0,
    EnrollData = 1,
    EnrollCommit = 2,
    AuthRequest = 3,
    Reply = 4,
    Error = 5,
}

impl FrameKind {
    pub fn from_code(code: u8) -> Option<FrameKind> {
        use FrameKind::*;
        [
            EnrollBegin,
            EnrollData,
            EnrollCommit,
            AuthRequest,
            Reply,
            Error,
        ]
        .get(code as usize)
        .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub body: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame length {0} exceeds the limit")]
    Oversized(usize),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Malformed = 1,
    ProtocolOrder = 2,
    UnknownDevice = 3,
    SealedDevice = 4,
    EnrollmentFailed = 5,
    UnexpectedKind = 6,
}

impl ErrorCode {
    pub fn from_code(code: u8) -> Option<ErrorCode> {
        use ErrorCode::*;
        [
            Malformed,
            ProtocolOrder,
            UnknownDevice,
            SealedDevice,
            EnrollmentFailed,
            UnexpectedKind,
        ]
        .into_iter()
        .find(|c| *c as u8 == code)
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("out-of-order enrollment message for device {0}")]
    ProtocolOrder(u16),
    #[error("device {0} is not enrolled")]
    UnknownDevice(u16),
    #[error("device {0} is sealed")]
    SealedDevice(u16),
    #[error("server error {code:?}: {message}")]
    Remote {
        code: Option<ErrorCode>,
        message: String,
    },
    #[error("unexpected reply")]
    UnexpectedReply,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(kind: FrameKind, body: &[u8]) -> Result<Vec<u8>, FrameError> {
    let len = body.len() + 1;
    if len > MAX_FRAME {
        return Err(FrameError::Oversized(len));
    }
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(body);
    Ok(out)
}

/// Decodes the frame at the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame_prefix(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let header = bytes.get(..4).ok_or(FrameError::Truncated)?;
    let len = u32::from_be_bytes(header.try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::Oversized(len));
    }
    if len == 0 {
        return Err(FrameError::Truncated);
    }
    let rest = bytes.get(4..4 + len).ok_or(FrameError::Truncated)?;
    let kind = FrameKind::from_code(rest[0]).ok_or(FrameError::UnknownKind(rest[0]))?;
    Ok((
        Frame {
            kind,
            body: rest[1..].to_vec(),
        },
        4 + len,
    ))
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let (frame, used) = decode_frame_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Frame>, ServiceError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::Oversized(len).into());
    }
    if len == 0 {
        return Err(FrameError::Truncated.into());
    }
    let mut rest = vec![0u8; len];
    reader.read_exact(&mut rest).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ServiceError::Frame(FrameError::Truncated),
        _ => ServiceError::Io(e),
    })?;
    let kind = FrameKind::from_code(rest[0]).ok_or(FrameError::UnknownKind(rest[0]))?;
    rest.remove(0);
    Ok(Some(Frame { kind, body: rest }))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> Result<(), ServiceError> {
    writer.write_all(&encode_frame(frame.kind, &frame.body)?)?;
    writer.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

fn malformed(what: &str) -> ServiceError {
    ServiceError::Malformed(what.to_string())
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ServiceError> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| malformed("body truncated"))?;
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ServiceError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ServiceError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ServiceError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), ServiceError> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            Err(malformed("trailing bytes in body"))
        }
    }
}

pub fn encode_enroll_begin(device_id: u16, model: Model) -> Vec<u8> {
    let mut out = device_id.to_be_bytes().to_vec();
    out.push(model.code());
    out
}

pub fn encode_enroll_data(device_id: u16, pairs: &[TrainingPair]) -> Vec<u8> {
    let mut out = device_id.to_be_bytes().to_vec();
    out.extend_from_slice(&(pairs.len() as u16).to_be_bytes());
    for p in pairs {
        out.push(p.task.feature.code());
        out.push(p.task.args.len() as u8);
        for &a in &p.task.args {
            out.extend_from_slice(&(a as u16).to_be_bytes());
        }
        match p.fingerprint {
            FingerprintValue::Analog(v) => {
                out.push(0);
                out.extend_from_slice(&v.to_le_bytes());
            }
            FingerprintValue::Bits32(w) => {
                out.push(1);
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    out
}

pub fn encode_auth_request(device_id: u16, request: &Request, token: &Token) -> Vec<u8> {
    let mut out = device_id.to_be_bytes().to_vec();
    let op = request.operation.as_bytes();
    out.push(op.len() as u8);
    out.extend_from_slice(op);
    out.extend_from_slice(&request.nonce.to_be_bytes());
    out.push(request.payloads.len() as u8);
    for p in &request.payloads {
        out.extend_from_slice(&(p.len() as u16).to_be_bytes());
        out.extend_from_slice(p);
    }
    let token = token.to_bytes();
    out.extend_from_slice(&(token.len() as u16).to_be_bytes());
    out.extend_from_slice(&token);
    out
}

pub fn encode_auth_result(result: &AuthResult) -> Vec<u8> {
    let decision = match result.decision {
        Decision::Accept => 0,
        Decision::Reject => 1,
    };
    vec![
        1,
        decision,
        result.matched_count.min(255) as u8,
        result.reason.code(),
    ]
}

pub fn encode_error(code: ErrorCode, message: &str) -> Vec<u8> {
    let mut out = vec![code as u8];
    out.extend_from_slice(message.as_bytes());
    out
}

fn decode_pairs(c: &mut Cursor) -> Result<Vec<TrainingPair>, ServiceError> {
    let count = c.u16()? as usize;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let feature = Feature::from_code(c.u8()?).ok_or_else(|| malformed("unknown feature"))?;
        let nargs = c.u8()? as usize;
        let args = (0..nargs)
            .map(|_| c.u16().map(u32::from))
            .collect::<Result<Vec<_>, _>>()?;
        let fingerprint = match c.u8()? {
            0 => FingerprintValue::Analog(f64::from_le_bytes(c.take(8)?.try_into().unwrap())),
            1 => FingerprintValue::Bits32(u32::from_le_bytes(c.take(4)?.try_into().unwrap())),
            _ => return Err(malformed("unknown value tag")),
        };
        pairs.push(TrainingPair {
            task: HardwareTask { feature, args },
            fingerprint,
        });
    }
    Ok(pairs)
}

/// Decoded AuthRequest body. The token is kept as raw bytes; it is decoded
/// by the handler so that a bad token yields a MalformedToken result.
#[derive(Debug, Clone, PartialEq)]
pub struct WireAuthRequest {
    pub device_id: u16,
    pub request: Request,
    pub token: Vec<u8>,
}

pub fn decode_auth_request(body: &[u8]) -> Result<WireAuthRequest, ServiceError> {
    let mut c = Cursor::new(body);
    let device_id = c.u16()?;
    let op_len = c.u8()? as usize;
    let operation = std::str::from_utf8(c.take(op_len)?)
        .map_err(|_| malformed("operation is not UTF-8"))?
        .to_string();
    let nonce = c.u32()?;
    let count = c.u8()? as usize;
    let mut payloads = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        payloads.push(c.take(len)?.to_vec());
    }
    let token_len = c.u16()? as usize;
    let token = c.take(token_len)?.to_vec();
    c.finish()?;
    Ok(WireAuthRequest {
        device_id,
        request: Request {
            operation,
            nonce,
            payloads,
        },
        token,
    })
}

pub fn decode_auth_result(body: &[u8]) -> Result<AuthResult, ServiceError> {
    let mut c = Cursor::new(body);
    if c.u8()? != 1 {
        return Err(ServiceError::UnexpectedReply);
    }
    let decision = match c.u8()? {
        0 => Decision::Accept,
        1 => Decision::Reject,
        _ => return Err(malformed("unknown decision")),
    };
    let matched_count = c.u8()? as usize;
    let reason = Reason::from_code(c.u8()?).ok_or_else(|| malformed("unknown reason"))?;
    c.finish()?;
    Ok(AuthResult {
        decision,
        matched_count,
        reason,
    })
}

fn error_frame(code: ErrorCode, message: impl std::fmt::Display) -> Frame {
    Frame {
        kind: FrameKind::Error,
        body: encode_error(code, &message.to_string()),
    }
}

fn ack() -> Frame {
    Frame {
        kind: FrameKind::Reply,
        body: vec![0],
    }
}

fn enrollment_error(id: u16, e: BackendError) -> Frame {
    match e {
        BackendError::UnknownDevice(_) => {
            error_frame(ErrorCode::ProtocolOrder, ServiceError::ProtocolOrder(id))
        }
        BackendError::AlreadyRegistered(_) => {
            error_frame(ErrorCode::ProtocolOrder, ServiceError::ProtocolOrder(id))
        }
        BackendError::SealedDevice(_) => {
            error_frame(ErrorCode::SealedDevice, ServiceError::SealedDevice(id))
        }
        BackendError::InvalidPair(_) => error_frame(ErrorCode::Malformed, e),
        other => error_frame(ErrorCode::EnrollmentFailed, other),
    }
}

/// Processes one request frame and returns the reply frame.
pub fn handle_message(backend: &Backend, kind: FrameKind, body: &[u8]) -> Frame {
    let outcome = (|| -> Result<Frame, ServiceError> {
        let mut c = Cursor::new(body);
        Ok(match kind {
            FrameKind::EnrollBegin => {
                let id = c.u16()?;
                let model = Model::from_code(c.u8()?).ok_or_else(|| malformed("unknown model"))?;
                c.finish()?;
                match backend.begin_enrollment(id, model) {
                    Ok(()) => ack(),
                    Err(e) => enrollment_error(id, e),
                }
            }
            FrameKind::EnrollData => {
                let id = c.u16()?;
                let pairs = decode_pairs(&mut c)?;
                c.finish()?;
                match backend.add_pairs(id, pairs) {
                    Ok(()) => ack(),
                    Err(e) => enrollment_error(id, e),
                }
            }
            FrameKind::EnrollCommit => {
                let id = c.u16()?;
                c.finish()?;
                match backend.commit(id) {
                    Ok(_) => ack(),
                    Err(e) => enrollment_error(id, e),
                }
            }
            FrameKind::AuthRequest => {
                let wire = decode_auth_request(body)?;
                let result = match Token::from_bytes(&wire.token) {
                    Ok(token) => backend.authenticate(wire.device_id, &wire.request, &token),
                    Err(_) if !backend.is_sealed(wire.device_id) => AuthResult {
                        decision: Decision::Reject,
                        matched_count: 0,
                        reason: Reason::UnknownDevice,
                    },
                    Err(_) => AuthResult {
                        decision: Decision::Reject,
                        matched_count: 0,
                        reason: Reason::MalformedToken,
                    },
                };
                Frame {
                    kind: FrameKind::Reply,
                    body: encode_auth_result(&result),
                }
            }
            FrameKind::Reply | FrameKind::Error => {
                error_frame(ErrorCode::UnexpectedKind, "not a request")
            }
        })
    })();
    outcome.unwrap_or_else(|e| error_frame(ErrorCode::Malformed, e))
}

/// A request/reply channel to a backend.
pub trait Transport {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, ServiceError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, ServiceError> {
        (**self).round_trip(frame)
    }
}

/// Calls [`handle_message`] directly, with no socket in between.
pub struct Loopback<'a> {
    pub backend: &'a Backend,
}

impl Transport for Loopback<'_> {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, ServiceError> {
        // exercise the codec as a socket would
        let bytes = encode_frame(frame.kind, &frame.body)?;
        let frame = decode_frame(&bytes)?;
        Ok(handle_message(self.backend, frame.kind, &frame.body))
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, ServiceError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, ServiceError> {
        write_frame(&mut self.stream, frame)?;
        read_frame(&mut self.stream)?.ok_or_else(|| FrameError::Truncated.into())
    }
}

/// Typed client for the protocol.
pub struct ServiceClient<T: Transport> {
    transport: T,
}

fn remote_error(frame: &Frame) -> ServiceError {
    let code = frame.body.first().and_then(|&c| ErrorCode::from_code(c));
    let message = String::from_utf8_lossy(frame.body.get(1..).unwrap_or_default()).into_owned();
    ServiceError::Remote { code, message }
}

impl<T: Transport> ServiceClient<T> {
    pub fn new(transport: T) -> Self {
        ServiceClient { transport }
    }

    fn expect_ack(&mut self, kind: FrameKind, body: Vec<u8>) -> Result<(), ServiceError> {
        let reply = self.transport.round_trip(&Frame { kind, body })?;
        match reply.kind {
            FrameKind::Reply if reply.body == [0] => Ok(()),
            FrameKind::Error => Err(remote_error(&reply)),
            _ => Err(ServiceError::UnexpectedReply),
        }
    }

    pub fn enroll_begin(&mut self, device_id: u16, model: Model) -> Result<(), ServiceError> {
        self.expect_ack(
            FrameKind::EnrollBegin,
            encode_enroll_begin(device_id, model),
        )
    }

    pub fn enroll_data(
        &mut self,
        device_id: u16,
        pairs: &[TrainingPair],
    ) -> Result<(), ServiceError> {
        for chunk in pairs.chunks(PAIRS_PER_FRAME) {
            self.expect_ack(FrameKind::EnrollData, encode_enroll_data(device_id, chunk))?;
        }
        Ok(())
    }

    pub fn enroll_commit(&mut self, device_id: u16) -> Result<(), ServiceError> {
        self.expect_ack(FrameKind::EnrollCommit, device_id.to_be_bytes().to_vec())
    }

    pub fn authenticate(
        &mut self,
        device_id: u16,
        request: &Request,
        token: &Token,
    ) -> Result<AuthResult, ServiceError> {
        let body = encode_auth_request(device_id, request, token);
        let reply = self.transport.round_trip(&Frame {
            kind: FrameKind::AuthRequest,
            body,
        })?;
        match reply.kind {
            FrameKind::Reply => decode_auth_result(&reply.body),
            FrameKind::Error => Err(remote_error(&reply)),
            _ => Err(ServiceError::UnexpectedReply),
        }
    }

    pub fn into_inner(self) -> T {
        self.transport
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Written after every successful commit and on shutdown.
    pub snapshot: Option<PathBuf>,
    pub read_timeout: Option<Duration>,
}

/// A running TCP server.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    backend: Arc<Backend>,
    config: ServerConfig,
    accept_thread: Option<JoinHandle<()>>,
}

fn serve_connection(mut stream: TcpStream, backend: &Backend, config: &ServerConfig) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(config.read_timeout);
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(ServiceError::Io(_)) => return,
            Err(e) => {
                // the stream cannot be resynchronized after a bad header
                let _ = write_frame(&mut stream, &error_frame(ErrorCode::Malformed, e));
                return;
            }
        };
        let reply = handle_message(backend, frame.kind, &frame.body);
        if frame.kind == FrameKind::EnrollCommit && reply.kind == FrameKind::Reply {
            if let Some(path) = &config.snapshot {
                let _ = backend.save(path);
            }
        }
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

impl Server {
    pub fn spawn<A: ToSocketAddrs>(
        addr: A,
        backend: Arc<Backend>,
        config: ServerConfig,
    ) -> Result<Server, ServiceError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_thread = {
            let stop = stop.clone();
            let backend = backend.clone();
            let config = config.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let backend = backend.clone();
                    let config = config.clone();
                    std::thread::spawn(move || serve_connection(stream, &backend, &config));
                }
            })
        };
        Ok(Server {
            addr,
            stop,
            backend,
            config,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    /// Blocks until the accept loop ends (it only ends on shutdown).
    pub fn wait(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting connections and writes the snapshot if configured.
    pub fn shutdown(mut self) -> Result<(), ServiceError> {
        self.stop_accepting();
        if let Some(path) = &self.config.snapshot {
            self.backend.save(path)?;
        }
        Ok(())
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_examples() {
        let bytes = encode_frame(FrameKind::EnrollCommit, &[0, 7]).unwrap();
        assert_eq!(bytes, [0, 0, 0, 3, 2, 0, 7]);
        assert_eq!(
            decode_frame(&bytes).unwrap(),
            Frame {
                kind: FrameKind::EnrollCommit,
                body: vec![0, 7]
            }
        );
        assert_eq!(decode_frame(&[0, 0, 0]), Err(FrameError::Truncated));
        assert_eq!(
            decode_frame(&[0, 0x20, 0, 0, 1]),
            Err(FrameError::Oversized(2 << 20))
        );
        assert_eq!(
            decode_frame(&[0, 0, 0, 1, 9]),
            Err(FrameError::UnknownKind(9))
        );
        assert_eq!(decode_frame(&[0, 0, 0, 0]), Err(FrameError::Truncated));
        assert!(matches!(
            encode_frame(FrameKind::Reply, &vec![0; MAX_FRAME]),
            Err(FrameError::Oversized(_))
        ));
    }

    #[test]
    fn auth_result_round_trip() {
        let r = AuthResult {
            decision: Decision::Reject,
            matched_count: 2,
            reason: Reason::BelowThreshold,
        };
        assert_eq!(decode_auth_result(&encode_auth_result(&r)).unwrap(), r);
    }

    proptest! {
        #[test]
        fn frames_round_trip(kind in 0u8..6, body in prop::collection::vec(any::<u8>(), 0..300)) {
            let kind = FrameKind::from_code(kind).unwrap();
            let bytes = encode_frame(kind, &body).unwrap();
            prop_assert_eq!(decode_frame(&bytes).unwrap(), Frame { kind, body });
        }

        #[test]
        fn auth_request_round_trip(
            id in any::<u16>(),
            op in "[A-Z_]{0,20}",
            nonce in any::<u32>(),
            payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..20), 1..4),
        ) {
            let request = Request { operation: op, nonce, payloads };
            let token = Token { nonce, entries: vec![] };
            let wire = decode_auth_request(&encode_auth_request(id, &request, &token)).unwrap();
            prop_assert_eq!(wire.device_id, id);
            prop_assert_eq!(wire.request, request);
            prop_assert_eq!(Token::from_bytes(&wire.token).unwrap(), token);
        }

        #[test]
        fn garbage_never_panics(kind in 0u8..6, body in prop::collection::vec(any::<u8>(), 0..64)) {
            let backend = Backend::new(Default::default()).unwrap();
            let reply = handle_message(&backend, FrameKind::from_code(kind).unwrap(), &body);
            if reply.kind == FrameKind::Reply && reply.body.len() == 4 {
                prop_assert_ne!(decode_auth_result(&reply.body).unwrap().decision, Decision::Accept);
            }
        }
    }
}
