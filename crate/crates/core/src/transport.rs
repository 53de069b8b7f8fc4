//! Message passing between parties.
//!
//! Every message travels as a frame `len:u32 | version:u8 | body | crc32:u32`,
//! where `len` counts everything after itself. The in-process backend moves
//! the encoded frames through channels; the TCP backend writes the same bytes
//! to loopback sockets and decodes them on a reader thread per link. Links
//! form a star: each passive party talks only to the active party.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::share::ShareTensor;
use crate::tensor::DenseTensor;

pub const FRAME_VERSION: u8 = 1;

/// What a [`Message::ShareTransfer`] carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShareKind {
    /// Counterparty share of a masked layer's input.
    Input,
    /// Active party's share of a masked layer's output.
    Output,
    /// Counterparty share of the gradient arriving at a masked layer.
    Gradient,
    /// Active party's share of the gradient w.r.t. a masked layer's input.
    InputGrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Seed {
        party: u32,
        seed: u64,
    },
    LayerShare {
        party: u32,
        layer: u32,
        weights: ShareTensor,
        bias: ShareTensor,
    },
    LayerReconstruct {
        party: u32,
        layer: u32,
        weights: ShareTensor,
        bias: ShareTensor,
    },
    Embedding {
        party: u32,
        batch: u32,
        payload: DenseTensor,
    },
    EmbeddingGrad {
        party: u32,
        batch: u32,
        payload: DenseTensor,
    },
    SharedMulOpen {
        layer: u32,
        step: u32,
        e: ShareTensor,
        f: ShareTensor,
    },
    ShareTransfer {
        kind: ShareKind,
        layer: u32,
        payload: ShareTensor,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Seed { .. } => "Seed",
            Message::LayerShare { .. } => "LayerShare",
            Message::LayerReconstruct { .. } => "LayerReconstruct",
            Message::Embedding { .. } => "Embedding",
            Message::EmbeddingGrad { .. } => "EmbeddingGrad",
            Message::SharedMulOpen { .. } => "SharedMulOpen",
            Message::ShareTransfer { .. } => "ShareTransfer",
        }
    }

    /// Layer masking traffic, as opposed to training traffic.
    pub fn is_masking(&self) -> bool {
        matches!(self, Message::LayerShare { .. } | Message::LayerReconstruct { .. })
    }
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let body = bincode::serialize(msg).expect("message serialization is infallible");
    let len = 1 + body.len() + 4;
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(FRAME_VERSION);
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_frame(frame: &[u8]) -> Result<Message, TransportError> {
    let corrupt = |m: &str| TransportError::FrameCorrupted(m.to_string());
    if frame.len() < 4 + 1 + 4 {
        return Err(corrupt("short frame"));
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    if len != frame.len() - 4 {
        return Err(corrupt(&format!("length prefix {len}, frame has {}", frame.len() - 4)));
    }
    let (payload, crc) = frame[4..].split_at(len - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    if payload[0] != FRAME_VERSION {
        return Err(corrupt(&format!("unsupported version {}", payload[0])));
    }
    bincode::deserialize(&payload[1..]).map_err(|e| corrupt(&e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One entry of an endpoint's traffic log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficEvent {
    pub epoch: u32,
    pub direction: Direction,
    pub peer: u32,
    pub kind: &'static str,
    pub bytes: usize,
}

type Inbox = Receiver<Result<Vec<u8>, TransportError>>;

enum Sink {
    Channel(Sender<Result<Vec<u8>, TransportError>>),
    Tcp(TcpStream),
}

impl Drop for Sink {
    fn drop(&mut self) {
        if let Sink::Tcp(s) = self {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

struct Link {
    sink: Sink,
    inbox: Inbox,
}

/// A party's handles to its counterparties.
pub struct Endpoint {
    id: u32,
    links: BTreeMap<u32, Link>,
    log: Vec<TrafficEvent>,
    epoch: u32,
    timeout: Duration,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("id", &self.id)
            .field("peers", &self.peers())
            .field("epoch", &self.epoch)
            .finish()
    }
}

impl Endpoint {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn peers(&self) -> Vec<u32> {
        self.links.keys().copied().collect()
    }

    /// Tags subsequent log entries with `epoch`.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn log(&self) -> &[TrafficEvent] {
        &self.log
    }

    pub fn send(&mut self, to: u32, msg: &Message) -> Result<(), TransportError> {
        let link = self
            .links
            .get_mut(&to)
            .ok_or(TransportError::NoRoute { from: self.id, to })?;
        let frame = encode_frame(msg);
        let bytes = frame.len();
        match &mut link.sink {
            Sink::Channel(tx) => tx.send(Ok(frame)).map_err(|_| TransportError::ChannelClosed(to))?,
            Sink::Tcp(stream) => stream
                .write_all(&frame)
                .map_err(|e| TransportError::Socket(e.to_string()))?,
        }
        self.log.push(TrafficEvent {
            epoch: self.epoch,
            direction: Direction::Sent,
            peer: to,
            kind: msg.kind(),
            bytes,
        });
        Ok(())
    }

    /// Blocks until the next message from `from` arrives.
    pub fn recv(&mut self, from: u32) -> Result<Message, TransportError> {
        let link = self
            .links
            .get(&from)
            .ok_or(TransportError::NoRoute { from, to: self.id })?;
        let frame = match link.inbox.recv_timeout(self.timeout) {
            Ok(frame) => frame?,
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::ChannelClosed(from)),
            Err(RecvTimeoutError::Timeout) => {
                return Err(TransportError::Socket(format!("timed out waiting for party {from}")))
            }
        };
        let msg = decode_frame(&frame)?;
        self.log.push(TrafficEvent {
            epoch: self.epoch,
            direction: Direction::Received,
            peer: from,
            kind: msg.kind(),
            bytes: frame.len(),
        });
        Ok(msg)
    }

    /// Drops the link to `peer`; its subsequent receives see a closed channel.
    pub fn close(&mut self, peer: u32) {
        self.links.remove(&peer);
    }
}

pub(crate) fn unexpected(expected: &str, got: &Message) -> TransportError {
    TransportError::Unexpected {
        expected: expected.to_string(),
        got: got.kind().to_string(),
    }
}

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

fn endpoint(id: u32) -> Endpoint {
    Endpoint {
        id,
        links: BTreeMap::new(),
        log: Vec::new(),
        epoch: 0,
        timeout: DEFAULT_TIMEOUT,
    }
}

/// Endpoints for `parties` parties where the last one is the hub. Entry `i`
/// of the result belongs to party `i`.
pub fn star(parties: u32, backend: Backend) -> Result<Vec<Endpoint>, TransportError> {
    if parties < 2 {
        return Err(TransportError::NoRoute { from: 0, to: 0 });
    }
    let hub = parties - 1;
    let mut eps: Vec<Endpoint> = (0..parties).map(endpoint).collect();
    for k in 0..hub {
        let (a, b) = match backend {
            Backend::InProcess => channel_pair(),
            Backend::Tcp => tcp_pair()?,
        };
        eps[k as usize].links.insert(hub, a);
        eps[hub as usize].links.insert(k, b);
    }
    Ok(eps)
}

/// A single bidirectional link between two fresh endpoints.
pub fn pair(backend: Backend) -> Result<(Endpoint, Endpoint), TransportError> {
    let mut eps = star(2, backend)?;
    let b = eps.pop().unwrap();
    let a = eps.pop().unwrap();
    Ok((a, b))
}

fn channel_pair() -> (Link, Link) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (
        Link {
            sink: Sink::Channel(tx_ab),
            inbox: rx_ba,
        },
        Link {
            sink: Sink::Channel(tx_ba),
            inbox: rx_ab,
        },
    )
}

fn tcp_pair() -> Result<(Link, Link), TransportError> {
    let sock = |e: std::io::Error| TransportError::Socket(e.to_string());
    let listener = TcpListener::bind("127.0.0.1:0").map_err(sock)?;
    let addr = listener.local_addr().map_err(sock)?;
    let a = TcpStream::connect(addr).map_err(sock)?;
    let (b, _) = listener.accept().map_err(sock)?;
    Ok((tcp_link(a)?, tcp_link(b)?))
}

fn tcp_link(stream: TcpStream) -> Result<Link, TransportError> {
    stream
        .set_nodelay(true)
        .map_err(|e| TransportError::Socket(e.to_string()))?;
    let mut reader = stream.try_clone().map_err(|e| TransportError::Socket(e.to_string()))?;
    let (tx, inbox) = mpsc::channel();
    thread::spawn(move || loop {
        let mut len = [0u8; 4];
        if reader.read_exact(&mut len).is_err() {
            break;
        }
        let n = u32::from_le_bytes(len) as usize;
        let mut frame = Vec::with_capacity(4 + n);
        frame.extend_from_slice(&len);
        frame.resize(4 + n, 0);
        if let Err(e) = reader.read_exact(&mut frame[4..]) {
            let _ = tx.send(Err(TransportError::Socket(e.to_string())));
            break;
        }
        if tx.send(Ok(frame)).is_err() {
            break;
        }
    });
    Ok(Link {
        sink: Sink::Tcp(stream),
        inbox,
    })
}
