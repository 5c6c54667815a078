//! TCP service hosting one streaming session per connection. The first four
//! bytes decide the transport: `GET ` upgrades to WebSocket on `/stream`,
//! anything else is length-prefixed JSON.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::protocol::{decode_tensor, encode_frame, encode_tensor, read_frame, FrameRead, Message, MAX_FRAME};
use crate::stream::{Condition, ConditionUpdate, SessionConfig, StreamSession};

pub const WS_PATH: &str = "/stream";

enum Inbound {
    Message(Message),
    /// Unparseable but the transport is still in sync.
    Malformed(String),
    Closed,
}

trait Transport {
    fn recv(&mut self) -> Result<Inbound>;
    fn send(&mut self, msg: &Message) -> Result<()>;
}

/// A TCP stream whose first bytes were already consumed for transport
/// detection; they are replayed before the socket is read again.
struct Prefixed {
    head: Vec<u8>,
    pos: usize,
    stream: TcpStream,
}

impl Read for Prefixed {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        if self.pos < self.head.len() {
            let n = buf.len().min(self.head.len() - self.pos);
            buf[..n].copy_from_slice(&self.head[self.pos..self.pos + n]);
            self.pos += n;
            return Ok(n);
        }
        self.stream.read(buf)
    }
}

impl Write for Prefixed {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.stream.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.stream.flush()
    }
}

struct Framed {
    stream: Prefixed,
}

impl Transport for Framed {
    fn recv(&mut self) -> Result<Inbound> {
        match read_frame(&mut self.stream, MAX_FRAME)? {
            FrameRead::Payload(p) => Ok(match Message::from_json(&p) {
                Ok(m) => Inbound::Message(m),
                Err(e) => Inbound::Malformed(e.to_string()),
            }),
            FrameRead::Eof => Ok(Inbound::Closed),
            FrameRead::TooLarge(n) => {
                let _ = self.send(&Message::error("frame_too_large", format!("{n} bytes exceeds {MAX_FRAME}")));
                Ok(Inbound::Closed)
            }
        }
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        self.stream.write_all(&encode_frame(msg)?)?;
        Ok(())
    }
}

struct Ws {
    socket: WebSocket<Prefixed>,
}

impl Transport for Ws {
    fn recv(&mut self) -> Result<Inbound> {
        loop {
            let msg = match self.socket.read() {
                Ok(m) => m,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(Inbound::Closed),
                Err(tungstenite::Error::Io(e)) => return Err(e.into()),
                Err(e) => return Err(Error::Protocol(format!("websocket: {e}"))),
            };
            return Ok(match msg {
                WsMessage::Text(t) => match Message::from_json(t.as_bytes()) {
                    Ok(m) => Inbound::Message(m),
                    Err(e) => Inbound::Malformed(e.to_string()),
                },
                WsMessage::Binary(b) => match Message::from_json(&b) {
                    Ok(m) => Inbound::Message(m),
                    Err(e) => Inbound::Malformed(e.to_string()),
                },
                WsMessage::Close(_) => Inbound::Closed,
                WsMessage::Ping(_) | WsMessage::Pong(_) | WsMessage::Frame(_) => continue,
            });
        }
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        self.socket
            .send(WsMessage::Text(msg.to_json()?))
            .map_err(|e| Error::Protocol(format!("websocket: {e}")))
    }
}

/// Per-connection state machine, independent of transport.
pub struct Connection {
    params: Arc<DenoiserParams<f32>>,
    session: Option<StreamSession>,
}

impl Connection {
    pub fn new(params: Arc<DenoiserParams<f32>>) -> Self {
        Self { params, session: None }
    }

    pub fn session(&self) -> Option<&StreamSession> {
        self.session.as_ref()
    }

    fn reference(&self, b64: Option<&String>) -> Result<Option<crate::tensor::Tensor<f32>>> {
        let shape = self.params.config.geometry().frame_shape();
        b64.map(|s| decode_tensor(s, &shape)).transpose()
    }

    /// Process one client message, producing the replies in order.
    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        match self.dispatch(msg) {
            Ok(replies) => replies,
            Err(e) => vec![error_reply(&e)],
        }
    }

    fn dispatch(&mut self, msg: Message) -> Result<Vec<Message>> {
        match msg {
            Message::Init { window, steps, cfg_scale, effect_label, reference_b64, seed } => {
                if self.session.is_some() {
                    return Ok(vec![Message::error("session_exists", "this connection already hosts a session")]);
                }
                let condition = Condition { reference: self.reference(reference_b64.as_ref())?, label: effect_label };
                let cfg = SessionConfig { window, steps, cfg_scale, noise_seed: seed.unwrap_or(0) };
                self.session = Some(StreamSession::open(Arc::clone(&self.params), cfg, condition)?);
                Ok(vec![Message::Ack { of: "init".into(), effective_chunk: Some(0) }])
            }
            Message::Chunk { index, frames_b64, shape } => {
                let s = self.session.as_mut().ok_or_else(|| Error::Session("send init first".into()))?;
                if index != s.chunks_done() {
                    return Ok(vec![Message::error("bad_index", format!("expected chunk {}, got {index}", s.chunks_done()))]);
                }
                let frames = decode_tensor(&frames_b64, &shape)?;
                let r = s.push_chunk(&frames)?;
                Ok(vec![Message::Result { index: r.index, frames_b64: encode_tensor(&r.frames), chunk_ms: r.chunk_ms }])
            }
            Message::Condition { reference_b64, effect_label } => {
                let reference = self.reference(reference_b64.as_ref())?;
                let s = self.session.as_ref().ok_or_else(|| Error::Session("send init first".into()))?;
                s.update_condition(ConditionUpdate { reference, label: effect_label })?;
                Ok(vec![Message::Ack { of: "condition".into(), effective_chunk: Some(s.chunks_done()) }])
            }
            Message::Close {} => {
                let mut s = self.session.take().ok_or_else(|| Error::Session("no open session".into()))?;
                let st = s.close();
                Ok(vec![
                    Message::Stats { chunks: st.chunks, mean_ms: st.mean_ms, max_ms: st.max_ms, p95_ms: st.p95_ms, fps: st.fps },
                    Message::Ack { of: "close".into(), effective_chunk: None },
                ])
            }
            other => Ok(vec![Message::error("unexpected", format!("{} is a server-to-client message", other.kind()))]),
        }
    }
}

fn error_reply(e: &Error) -> Message {
    let code = match e {
        Error::Protocol(_) => "bad_message",
        Error::ChunkShape { .. } | Error::ShapeMismatch { .. } => "bad_shape",
        Error::Session(_) => "session",
        Error::InvalidArgument(_) | Error::Config(_) => "invalid",
        _ => "internal",
    };
    Message::error(code, e.to_string())
}

fn serve_transport<T: Transport>(t: &mut T, params: Arc<DenoiserParams<f32>>) -> Result<()> {
    let mut conn = Connection::new(params);
    loop {
        match t.recv()? {
            Inbound::Closed => return Ok(()),
            Inbound::Malformed(why) => t.send(&Message::error("bad_message", why))?,
            Inbound::Message(m) => {
                for reply in conn.handle(m) {
                    t.send(&reply)?;
                }
            }
        }
    }
}

/// Read up to four bytes; fewer only if the peer closed first.
fn read_prefix(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match stream.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(buf[..got].to_vec())
}

fn handle_connection(mut stream: TcpStream, params: Arc<DenoiserParams<f32>>) -> Result<()> {
    stream.set_nodelay(true)?;
    let head = read_prefix(&mut stream)?;
    let is_ws = head == b"GET ";
    let io = Prefixed { head, pos: 0, stream };
    if is_ws {
        let check_path = |req: &Request, resp: Response| -> std::result::Result<Response, ErrorResponse> {
            if req.uri().path() == WS_PATH {
                Ok(resp)
            } else {
                let mut r = ErrorResponse::new(Some(format!("only {WS_PATH} is served")));
                *r.status_mut() = StatusCode::NOT_FOUND;
                Err(r)
            }
        };
        let socket = tungstenite::accept_hdr(io, check_path).map_err(|e| Error::Protocol(format!("websocket handshake: {e}")))?;
        serve_transport(&mut Ws { socket }, params)
    } else {
        let mut t = Framed { stream: io };
        let r = serve_transport(&mut t, params);
        let _ = t.stream.stream.shutdown(Shutdown::Both);
        r
    }
}

/// A bound listener; `run` blocks, `spawn` serves from a background thread.
pub struct Server {
    listener: TcpListener,
    params: Arc<DenoiserParams<f32>>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, params: Arc<DenoiserParams<f32>>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self { listener, params, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept until stopped; one worker thread per connection.
    pub fn run(&self) -> Result<()> {
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            let params = Arc::clone(&self.params);
            thread::spawn(move || {
                let _ = handle_connection(stream, params);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let thread = thread::spawn(move || self.run());
        Ok(ServerHandle { addr, stop, thread: Some(thread) })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| Error::Session("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;

    fn conn() -> Connection {
        let c = DenoiserConfig { d_model: 8, d_mlp: 8, t_features: 4, height: 4, width: 4, c_frames: 2, layers: 1, ..Default::default() };
        Connection::new(Arc::new(DenoiserParams::init(c, 1).unwrap()))
    }

    #[test]
    fn chunk_before_init_is_an_error() {
        let mut c = conn();
        let r = c.handle(Message::Chunk { index: 0, frames_b64: String::new(), shape: vec![1] });
        assert!(matches!(&r[0], Message::Error { code, .. } if code == "session"));
    }

    #[test]
    fn double_init_rejected() {
        let mut c = conn();
        let init = Message::Init { window: 2, steps: 4, cfg_scale: 5.0, effect_label: None, reference_b64: None, seed: None };
        assert!(matches!(&c.handle(init.clone())[0], Message::Ack { .. }));
        assert!(matches!(&c.handle(init)[0], Message::Error { code, .. } if code == "session_exists"));
    }

    #[test]
    fn server_messages_from_client_are_rejected() {
        let mut c = conn();
        let r = c.handle(Message::Stats { chunks: 0, mean_ms: 0.0, max_ms: 0.0, p95_ms: 0.0, fps: 0.0 });
        assert!(matches!(&r[0], Message::Error { code, .. } if code == "unexpected"));
    }
}
