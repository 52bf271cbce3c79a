//! Frame transports: the emulated link (virtual or real clock) and TCP.
//!
//! An [`Endpoint`] sends whole encoded frames through a [`FrameSink`] and
//! receives complete frames from a clock-aware channel, so the runtimes are
//! oblivious to which transport carries them.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::{mpsc, Arc, Mutex};

use crate::clock::{Clock, RecvError, Rx, Tx};
use crate::error::{Error, Result};
use crate::netsim::{Blackhole, CounterSnapshot, Direction, LinkConfig, LinkCounters, LinkModel};
use crate::sim::{secs_to_nanos, SimTx};
use crate::wire::{self, WireMessage, FRAME_HEADER_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
}

impl Side {
    fn outgoing(self) -> Direction {
        match self {
            Side::Client => Direction::Up,
            Side::Server => Direction::Down,
        }
    }

    fn incoming(self) -> Direction {
        match self {
            Side::Client => Direction::Down,
            Side::Server => Direction::Up,
        }
    }
}

/// Accepts one whole frame at a time. Implementations must not interleave
/// the bytes of concurrent frames.
pub trait FrameSink: Send + Sync {
    /// Returns once the frame has been handed to the medium.
    fn send_frame(&self, frame: Vec<u8>) -> Result<()>;
}

/// Cloneable sending half, for loops that write concurrently with the
/// endpoint's owner.
#[derive(Clone)]
pub struct Sender {
    sink: Arc<dyn FrameSink>,
}

impl Sender {
    pub fn send(&self, msg: &WireMessage) -> Result<()> {
        let frame = wire::encode(msg)?;
        log::trace!("send {:?} ({} bytes)", msg.kind(), frame.len());
        self.sink.send_frame(frame)
    }
}

/// Read-only view of an endpoint's byte counters.
#[derive(Clone)]
pub struct Traffic {
    counters: Arc<LinkCounters>,
    side: Side,
}

impl Traffic {
    /// Bytes this side has put on the link.
    pub fn bytes_sent(&self) -> u64 {
        let s = self.counters.snapshot();
        match self.side {
            Side::Client => s.up_entered,
            Side::Server => s.down_entered,
        }
    }

    /// Bytes the peer has put on the link towards this side.
    pub fn bytes_incoming(&self) -> u64 {
        let s = self.counters.snapshot();
        match self.side {
            Side::Client => s.down_entered,
            Side::Server => s.up_entered,
        }
    }
}

pub struct Endpoint {
    sender: Sender,
    rx: Rx<Vec<u8>>,
    counters: Arc<LinkCounters>,
    side: Side,
    clock: Clock,
}

impl Endpoint {
    pub fn send(&self, msg: &WireMessage) -> Result<()> {
        self.sender.send(msg)
    }

    pub fn sender(&self) -> Sender {
        self.sender.clone()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn traffic(&self) -> Traffic {
        Traffic {
            counters: self.counters.clone(),
            side: self.side,
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.traffic().bytes_sent()
    }

    pub fn bytes_incoming(&self) -> u64 {
        self.traffic().bytes_incoming()
    }

    fn finish(&self, got: std::result::Result<Vec<u8>, RecvError>) -> Result<WireMessage> {
        match got {
            Ok(frame) => {
                self.counters.record_delivered(self.side.incoming(), frame.len());
                let (msg, used) = wire::decode(&frame)?;
                debug_assert_eq!(used, frame.len());
                log::trace!("recv {:?} ({} bytes)", msg.kind(), frame.len());
                Ok(msg)
            }
            Err(RecvError::Timeout) => Err(Error::Timeout("no frame from peer".into())),
            Err(RecvError::Disconnected) => Err(Error::Disconnected),
        }
    }

    pub fn recv(&self) -> Result<WireMessage> {
        self.finish(self.rx.recv())
    }

    pub fn recv_timeout(&self, secs: f64) -> Result<WireMessage> {
        self.finish(self.rx.recv_timeout(secs))
    }

    /// Waits until absolute clock time `at` at most.
    pub fn recv_until(&self, at: f64) -> Result<WireMessage> {
        self.finish(self.rx.recv_until(&self.clock, at))
    }
}

enum Peer {
    Virtual(SimTx<Vec<u8>>),
    DelayLine(Mutex<mpsc::Sender<(f64, Vec<u8>)>>),
}

struct EmulatedSink {
    model: Arc<Mutex<LinkModel>>,
    counters: Arc<LinkCounters>,
    dir: Direction,
    clock: Clock,
    peer: Peer,
}

impl FrameSink for EmulatedSink {
    fn send_frame(&self, frame: Vec<u8>) -> Result<()> {
        let len = frame.len();
        let now = self.clock.now();
        let (tx_done, delivery) = self
            .model
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .deliver(self.dir, len, now);
        self.counters.record_entered(self.dir, len);
        match delivery {
            None => {
                log::debug!("blackhole drops {len}-byte frame");
                self.counters.record_dropped(len);
            }
            Some(d) => match &self.peer {
                Peer::Virtual(tx) => tx.send_at(frame, secs_to_nanos(d.delivered_at)),
                Peer::DelayLine(tx) => {
                    let tx = tx.lock().unwrap_or_else(|e| e.into_inner());
                    if tx.send((d.delivered_at, frame)).is_err() {
                        return Err(Error::Disconnected);
                    }
                }
            },
        }
        self.clock.sleep_until(tx_done);
        Ok(())
    }
}

/// Control surface of an emulated link, held by whoever set it up.
#[derive(Clone)]
pub struct LinkHandle {
    model: Arc<Mutex<LinkModel>>,
    counters: Arc<LinkCounters>,
}

impl LinkHandle {
    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn config(&self) -> LinkConfig {
        self.model.lock().unwrap_or_else(|e| e.into_inner()).config().clone()
    }

    /// Bytes offered to the link so far, both directions.
    pub fn entered(&self) -> u64 {
        self.model.lock().unwrap_or_else(|e| e.into_inner()).entered()
    }

    pub fn set_blackhole(&self, blackhole: Option<Blackhole>) {
        self.model
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .set_blackhole(blackhole);
    }
}

fn emulated_half(
    clock: &Clock,
    model: &Arc<Mutex<LinkModel>>,
    counters: &Arc<LinkCounters>,
    dir: Direction,
) -> (Arc<dyn FrameSink>, Rx<Vec<u8>>) {
    let (peer_tx, peer_rx) = clock.channel::<Vec<u8>>();
    let peer = match peer_tx {
        Tx::Virtual(tx) => Peer::Virtual(tx),
        Tx::Real(out) => {
            let (line_tx, line_rx) = mpsc::channel::<(f64, Vec<u8>)>();
            let c = clock.clone();
            clock.spawn("delay-line", move || {
                while let Ok((at, frame)) = line_rx.recv() {
                    c.sleep_until(at);
                    if out.send(frame).is_err() {
                        break;
                    }
                }
            });
            Peer::DelayLine(Mutex::new(line_tx))
        }
    };
    let sink = EmulatedSink {
        model: model.clone(),
        counters: counters.clone(),
        dir,
        clock: clock.clone(),
        peer,
    };
    (Arc::new(sink), peer_rx)
}

/// Connects a client endpoint and a server endpoint through an emulated link.
pub fn emulated_pair(clock: &Clock, config: LinkConfig) -> (Endpoint, Endpoint, LinkHandle) {
    let model = Arc::new(Mutex::new(LinkModel::new(config)));
    let counters = Arc::new(LinkCounters::default());
    let (up_sink, server_rx) = emulated_half(clock, &model, &counters, Direction::Up);
    let (down_sink, client_rx) = emulated_half(clock, &model, &counters, Direction::Down);
    let client = Endpoint {
        sender: Sender { sink: up_sink },
        rx: client_rx,
        counters: counters.clone(),
        side: Side::Client,
        clock: clock.clone(),
    };
    let server = Endpoint {
        sender: Sender { sink: down_sink },
        rx: server_rx,
        counters: counters.clone(),
        side: Side::Server,
        clock: clock.clone(),
    };
    (client, server, LinkHandle { model, counters })
}

struct TcpSink {
    stream: Mutex<TcpStream>,
    counters: Arc<LinkCounters>,
    dir: Direction,
}

impl FrameSink for TcpSink {
    fn send_frame(&self, frame: Vec<u8>) -> Result<()> {
        let mut s = self.stream.lock().unwrap_or_else(|e| e.into_inner());
        s.write_all(&frame)?;
        s.flush()?;
        self.counters.record_entered(self.dir, frame.len());
        Ok(())
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let total = wire::frame_len(header)?;
    let mut frame = vec![0u8; total];
    frame[..FRAME_HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut frame[FRAME_HEADER_LEN..])?;
    Ok(Some(frame))
}

/// Wraps a connected socket. A reader thread feeds complete frames into the
/// endpoint; a malformed length prefix closes the connection.
pub fn tcp_endpoint(stream: TcpStream, side: Side) -> Result<Endpoint> {
    stream.set_nodelay(true)?;
    let clock = Clock::real();
    let counters = Arc::new(LinkCounters::default());
    let (tx, rx) = clock.channel::<Vec<u8>>();
    let mut reader = stream.try_clone()?;
    let incoming = side.incoming();
    let c = counters.clone();
    clock.spawn("tcp-reader", move || loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                c.record_entered(incoming, frame.len());
                if tx.send(frame).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                log::warn!("closing connection: {e}");
                break;
            }
        }
    });
    let sink = TcpSink {
        stream: Mutex::new(stream),
        counters: counters.clone(),
        dir: side.outgoing(),
    };
    Ok(Endpoint {
        sender: Sender { sink: Arc::new(sink) },
        rx,
        counters,
        side,
        clock,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::LinkConfig;

    #[test]
    fn virtual_link_timing_matches_model() {
        let clock = Clock::virtual_time();
        let cfg = LinkConfig::new("t", 0.2, 1000.0, 2000.0).unwrap();
        let (client, server, link) = emulated_pair(&clock, cfg);
        // PROBE of 495 body bytes makes a 500-byte frame
        client.send(&WireMessage::Probe { len: 495 }).unwrap();
        assert!((clock.now() - 0.5).abs() < 1e-9, "sender blocks for serialization");
        let m = server.recv().unwrap();
        assert_eq!(m, WireMessage::Probe { len: 495 });
        assert!((clock.now() - 0.6).abs() < 1e-9);
        server.send(&WireMessage::Pong).unwrap();
        client.recv().unwrap();
        let c = link.counters();
        assert_eq!(c.up_entered, 500);
        assert_eq!(c.up_delivered, 500);
        assert_eq!(c.down_entered, 5);
        assert_eq!(c.down_delivered, 5);
    }

    #[test]
    fn blackholed_frames_never_arrive() {
        let clock = Clock::virtual_time();
        let cfg = LinkConfig::new("t", 0.01, 1e6, 1e6).unwrap();
        let (client, server, link) = emulated_pair(&clock, cfg);
        link.set_blackhole(Some(Blackhole::AfterBytes(0)));
        client.send(&WireMessage::Ping).unwrap();
        assert!(matches!(server.recv_timeout(1.0), Err(Error::Timeout(_))));
        assert_eq!(link.counters().dropped, 5);
        drop(client);
        assert!(matches!(server.recv(), Err(Error::Disconnected)));
    }

    #[test]
    fn real_clock_emulated_link_delivers() {
        let clock = Clock::real();
        let cfg = LinkConfig::new("t", 0.004, 1e7, 1e7).unwrap();
        let (client, server, _) = emulated_pair(&clock, cfg);
        client.send(&WireMessage::Ping).unwrap();
        assert_eq!(server.recv_timeout(5.0).unwrap(), WireMessage::Ping);
        assert!(clock.now() >= 0.002);
    }

    #[test]
    fn tcp_endpoints_exchange_frames() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let ep = tcp_endpoint(s, Side::Server).unwrap();
            let m = ep.recv_timeout(5.0).unwrap();
            assert_eq!(m, WireMessage::Ping);
            ep.send(&WireMessage::Pong).unwrap();
            ep.bytes_incoming()
        });
        let ep = tcp_endpoint(TcpStream::connect(addr).unwrap(), Side::Client).unwrap();
        ep.send(&WireMessage::Ping).unwrap();
        assert_eq!(ep.recv_timeout(5.0).unwrap(), WireMessage::Pong);
        assert_eq!(t.join().unwrap(), 5);
        assert_eq!(ep.bytes_sent(), 5);
    }
}
