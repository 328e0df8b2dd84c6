//! Localhost TCP backend for demo deployments.
//!
//! Wire format: length-prefixed frames, 4-byte big-endian length followed
//! by a canonical-encoded envelope `{kind: pub|req|resp|sub, topic?,
//! correlation-id?, payload}`. Requests open a fresh connection per
//! round-trip; subscriptions are long-lived connections opened by the
//! subscriber toward each publisher (`sub` frame first, then `pub` frames
//! flow back). The fault-injection layer does not apply here.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Bus, Endpoint, PubHandler, ReqHandler, SubscriptionHandle, Topic, TransportError};
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

const FRAME_TAG: u8 = 0x40;
const RECONNECT_DELAY: Duration = Duration::from_millis(200);
const ACCEPT_POLL: Duration = Duration::from_millis(25);

/// Maximum accepted frame body, a guard against garbage length prefixes.
const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Publish,
    Request,
    Response,
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub topic: Option<String>,
    pub correlation_id: Option<u64>,
    pub payload: Vec<u8>,
}

impl WireEncode for Frame {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, FRAME_TAG);
        let kind = match self.kind {
            FrameKind::Publish => 0,
            FrameKind::Request => 1,
            FrameKind::Response => 2,
            FrameKind::Subscribe => 3,
        };
        wire::put_u8(out, kind);
        wire::put_option(out, &self.topic);
        wire::put_option(out, &self.correlation_id);
        wire::put_bytes(out, &self.payload);
    }
}

impl WireDecode for Frame {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(FRAME_TAG)?;
        let kind = match r.get_u8()? {
            0 => FrameKind::Publish,
            1 => FrameKind::Request,
            2 => FrameKind::Response,
            3 => FrameKind::Subscribe,
            b => return Err(DecodeError::invalid(format!("bad frame kind {b:#04x}"))),
        };
        Ok(Frame {
            kind,
            topic: wire::get_option(r)?,
            correlation_id: wire::get_option(r)?,
            payload: r.get_bytes()?,
        })
    }
}

pub fn write_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    let body = frame.encode();
    stream.write_all(&(body.len() as u32).to_be_bytes())?;
    stream.write_all(&body)?;
    stream.flush()
}

pub fn read_frame(stream: &mut TcpStream) -> std::io::Result<Frame> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body)?;
    Frame::decode(&body).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// One request round-trip against a daemon machine address. Used by client
/// tooling that has no endpoint of its own.
pub fn socket_request(addr: &str, payload: &[u8], timeout_ms: u64) -> Result<Vec<u8>, TransportError> {
    let timeout = Duration::from_millis(timeout_ms.max(1));
    let sock_addr: std::net::SocketAddr = addr
        .parse()
        .map_err(|e| TransportError::ConnectionFailed(format!("bad address {addr}: {e}")))?;
    let mut stream =
        TcpStream::connect_timeout(&sock_addr, timeout).map_err(|_| TransportError::Timeout)?;
    stream.set_read_timeout(Some(timeout)).ok();
    stream.set_write_timeout(Some(timeout)).ok();
    write_frame(
        &mut stream,
        &Frame {
            kind: FrameKind::Request,
            topic: None,
            correlation_id: Some(1),
            payload: payload.to_vec(),
        },
    )
    .map_err(|_| TransportError::Timeout)?;
    loop {
        let frame = read_frame(&mut stream).map_err(|_| TransportError::Timeout)?;
        if frame.kind == FrameKind::Response {
            return Ok(frame.payload);
        }
    }
}

struct EndpointState {
    addr: String,
    stop: Arc<AtomicBool>,
    /// Open connections from subscribers, per topic, on the publisher side.
    subscriber_conns: Arc<Mutex<Vec<(String, TcpStream)>>>,
}

struct DialerState {
    stop: Arc<AtomicBool>,
}

/// TCP implementation of [`Bus`]. Every registered endpoint runs a
/// listener; subscriptions dial the publishers and stay connected.
pub struct SocketBus {
    endpoints: Mutex<BTreeMap<String, EndpointState>>,
    dialers: Mutex<BTreeMap<u64, Vec<DialerState>>>,
    next_sub: AtomicU64,
}

impl SocketBus {
    pub fn new() -> Arc<Self> {
        Arc::new(SocketBus {
            endpoints: Mutex::new(BTreeMap::new()),
            dialers: Mutex::new(BTreeMap::new()),
            next_sub: AtomicU64::new(0),
        })
    }

    /// The bound address of a registered endpoint (useful with port 0).
    pub fn local_addr(&self, name: &str) -> Option<String> {
        self.endpoints.lock().unwrap().get(name).map(|e| e.addr.clone())
    }

    pub fn shutdown(&self) {
        let endpoints = std::mem::take(&mut *self.endpoints.lock().unwrap());
        for (_, ep) in endpoints {
            ep.stop.store(true, Ordering::SeqCst);
        }
        let dialers = std::mem::take(&mut *self.dialers.lock().unwrap());
        for (_, states) in dialers {
            for d in states {
                d.stop.store(true, Ordering::SeqCst);
            }
        }
    }
}

fn serve_connection(
    mut stream: TcpStream,
    handler: ReqHandler,
    subscriber_conns: Arc<Mutex<Vec<(String, TcpStream)>>>,
    stop: Arc<AtomicBool>,
) {
    stream.set_read_timeout(Some(Duration::from_millis(250))).ok();
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match read_frame(&mut stream) {
            Ok(frame) => match frame.kind {
                FrameKind::Request => {
                    let response = handler("", &frame.payload);
                    let resp_frame = Frame {
                        kind: FrameKind::Response,
                        topic: None,
                        correlation_id: frame.correlation_id,
                        payload: response,
                    };
                    if write_frame(&mut stream, &resp_frame).is_err() {
                        return;
                    }
                }
                FrameKind::Subscribe => {
                    let topic = frame.topic.unwrap_or_default();
                    if let Ok(clone) = stream.try_clone() {
                        subscriber_conns.lock().unwrap().push((topic, clone));
                    }
                    // Keep reading so the connection close is noticed.
                }
                FrameKind::Publish | FrameKind::Response => {
                    // Not expected inbound on a listener; ignore.
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock || e.kind() == std::io::ErrorKind::TimedOut => {
                continue;
            }
            Err(_) => return,
        }
    }
}

impl Bus for SocketBus {
    fn register_endpoint(&self, endpoint: &Endpoint, handler: ReqHandler) -> Result<(), TransportError> {
        let mut endpoints = self.endpoints.lock().unwrap();
        if endpoints.contains_key(&endpoint.name) {
            return Err(TransportError::EndpointTaken(endpoint.name.clone()));
        }
        let listener = TcpListener::bind(&endpoint.addr)
            .map_err(|e| TransportError::ConnectionFailed(format!("bind {}: {e}", endpoint.addr)))?;
        let local = listener
            .local_addr()
            .map_err(|e| TransportError::ConnectionFailed(e.to_string()))?
            .to_string();
        listener.set_nonblocking(true).ok();
        let stop = Arc::new(AtomicBool::new(false));
        let subscriber_conns = Arc::new(Mutex::new(Vec::new()));
        let state = EndpointState {
            addr: local,
            stop: stop.clone(),
            subscriber_conns: subscriber_conns.clone(),
        };
        endpoints.insert(endpoint.name.clone(), state);
        drop(endpoints);
        std::thread::spawn(move || loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).ok();
                    let handler = handler.clone();
                    let conns = subscriber_conns.clone();
                    let stop = stop.clone();
                    std::thread::spawn(move || serve_connection(stream, handler, conns, stop));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(ACCEPT_POLL);
                }
                Err(_) => return,
            }
        });
        Ok(())
    }

    fn unregister_endpoint(&self, name: &str) {
        if let Some(state) = self.endpoints.lock().unwrap().remove(name) {
            state.stop.store(true, Ordering::SeqCst);
        }
    }

    fn subscribe(
        &self,
        subscriber: &Endpoint,
        topic: &Topic,
        publishers: &[Endpoint],
        handler: PubHandler,
    ) -> Result<SubscriptionHandle, TransportError> {
        let id = self.next_sub.fetch_add(1, Ordering::SeqCst);
        let mut states = Vec::new();
        for publisher in publishers {
            if publisher.name == subscriber.name {
                continue;
            }
            let stop = Arc::new(AtomicBool::new(false));
            states.push(DialerState { stop: stop.clone() });
            let addr = publisher.addr.clone();
            let topic_str = topic.as_str().to_string();
            let handler = handler.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(mut stream) = TcpStream::connect(&addr) else {
                        std::thread::sleep(RECONNECT_DELAY);
                        continue;
                    };
                    stream.set_read_timeout(Some(Duration::from_millis(250))).ok();
                    let sub_frame = Frame {
                        kind: FrameKind::Subscribe,
                        topic: Some(topic_str.clone()),
                        correlation_id: None,
                        payload: Vec::new(),
                    };
                    if write_frame(&mut stream, &sub_frame).is_err() {
                        std::thread::sleep(RECONNECT_DELAY);
                        continue;
                    }
                    loop {
                        if stop.load(Ordering::SeqCst) {
                            return;
                        }
                        match read_frame(&mut stream) {
                            Ok(frame) if frame.kind == FrameKind::Publish => {
                                if frame.topic.as_deref() == Some(topic_str.as_str()) {
                                    handler(&Topic::for_keygroup(
                                        &match crate::model::KeygroupName::parse(&topic_str) {
                                            Ok(kg) => kg,
                                            Err(_) => continue,
                                        },
                                    ), &frame.payload);
                                }
                            }
                            Ok(_) => {}
                            Err(e)
                                if e.kind() == std::io::ErrorKind::WouldBlock
                                    || e.kind() == std::io::ErrorKind::TimedOut =>
                            {
                                continue;
                            }
                            Err(_) => break, // reconnect
                        }
                    }
                    std::thread::sleep(RECONNECT_DELAY);
                }
            });
        }
        self.dialers.lock().unwrap().insert(id, states);
        Ok(SubscriptionHandle {
            id,
            endpoint: subscriber.name.clone(),
            topic: topic.clone(),
        })
    }

    fn unsubscribe(&self, handle: &SubscriptionHandle) {
        if let Some(states) = self.dialers.lock().unwrap().remove(&handle.id) {
            for d in states {
                d.stop.store(true, Ordering::SeqCst);
            }
        }
    }

    fn publish(&self, sender: &Endpoint, topic: &Topic, payload: &[u8]) {
        let endpoints = self.endpoints.lock().unwrap();
        let Some(state) = endpoints.get(&sender.name) else {
            return; // fire-and-forget
        };
        let conns = state.subscriber_conns.clone();
        drop(endpoints);
        let frame = Frame {
            kind: FrameKind::Publish,
            topic: Some(topic.as_str().to_string()),
            correlation_id: None,
            payload: payload.to_vec(),
        };
        let mut conns = conns.lock().unwrap();
        conns.retain_mut(|(sub_topic, stream)| {
            if sub_topic != topic.as_str() {
                return true;
            }
            write_frame(stream, &frame).is_ok()
        });
    }

    fn request(
        &self,
        _from: &Endpoint,
        to: &Endpoint,
        payload: &[u8],
        timeout_ms: u64,
    ) -> Result<Vec<u8>, TransportError> {
        // Registered endpoints may carry a stale addr; prefer the bound one.
        let addr = self
            .endpoints
            .lock()
            .unwrap()
            .get(&to.name)
            .map(|s| s.addr.clone())
            .unwrap_or_else(|| to.addr.clone());
        if addr.is_empty() {
            return Err(TransportError::UnknownEndpoint(to.name.clone()));
        }
        socket_request(&addr, payload, timeout_ms)
    }
}
