//! Link model for the network emulator: latency, asymmetric bandwidth,
//! FIFO serialization per direction, and blackhole fault injection.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Blackhole {
    /// Drop every frame that starts after this many bytes (both directions
    /// combined) have entered the link.
    AfterBytes(u64),
    /// Drop every frame offered at or after this clock time, in seconds.
    AfterTime(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkConfig {
    pub name: String,
    /// Round-trip latency in seconds; each direction adds half.
    pub rtt: f64,
    /// Client to server, bytes per second.
    pub up_bandwidth: f64,
    /// Server to client, bytes per second.
    pub down_bandwidth: f64,
    pub blackhole: Option<Blackhole>,
}

impl LinkConfig {
    pub fn new(name: &str, rtt: f64, up_bandwidth: f64, down_bandwidth: f64) -> Result<LinkConfig> {
        let cfg = LinkConfig {
            name: name.to_string(),
            rtt,
            up_bandwidth,
            down_bandwidth,
            blackhole: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtt >= 0.0) || !self.rtt.is_finite() {
            return Err(Error::Config(format!("link rtt must be finite and >= 0, got {}", self.rtt)));
        }
        for (what, bw) in [("uplink", self.up_bandwidth), ("downlink", self.down_bandwidth)] {
            if !(bw > 0.0) {
                return Err(Error::Config(format!("{what} bandwidth must be > 0, got {bw}")));
            }
        }
        Ok(())
    }

    pub fn with_rtt(mut self, rtt: f64) -> LinkConfig {
        self.rtt = rtt;
        self
    }

    pub fn with_blackhole(mut self, blackhole: Option<Blackhole>) -> LinkConfig {
        self.blackhole = blackhole;
        self
    }

    pub fn bandwidth(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Up => self.up_bandwidth,
            Direction::Down => self.down_bandwidth,
        }
    }

    /// Seconds needed to push `len` bytes through one direction.
    pub fn serialization_time(&self, dir: Direction, len: usize) -> f64 {
        len as f64 / self.bandwidth(dir)
    }
}

impl fmt::Display for LinkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (rtt {:.1} ms, up {} B/s, down {} B/s)",
            self.name,
            self.rtt * 1e3,
            self.up_bandwidth,
            self.down_bandwidth
        )
    }
}

/// The built-in link profiles: `wifi`, `3g` and `loopback`.
pub fn presets() -> BTreeMap<String, LinkConfig> {
    let mut m = BTreeMap::new();
    for (name, rtt, up, down) in [
        ("wifi", 0.010, 2.5e6, 2.5e6),
        ("3g", 0.150, 125e3, 500e3),
        ("loopback", 0.0001, 1e9, 1e9),
    ] {
        m.insert(name.to_string(), LinkConfig::new(name, rtt, up, down).expect("valid preset"));
    }
    m
}

pub fn preset(name: &str) -> Result<LinkConfig> {
    presets()
        .remove(name)
        .ok_or_else(|| Error::Config(format!("unknown network preset {name:?}")))
}

/// Parses `wifi`, `3g`, `loopback` or `custom:<rtt_ms>,<up_Bps>,<down_Bps>`.
pub fn parse_network(spec: &str) -> Result<LinkConfig> {
    let Some(rest) = spec.strip_prefix("custom:") else {
        return preset(spec);
    };
    let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "custom network needs <rtt_ms>,<up_Bps>,<down_Bps>, got {rest:?}"
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number {s:?} in network spec")))
    };
    LinkConfig::new(spec, num(parts[0])? / 1e3, num(parts[1])?, num(parts[2])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Client to server.
    Up,
    /// Server to client.
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delivery {
    /// When the last byte has left the sender.
    pub tx_done: f64,
    /// When the frame is available at the receiver.
    pub delivered_at: f64,
}

/// Scheduling state of one emulated link. Pure bookkeeping: the transport
/// layer asks it when frames land and acts on the answer.
#[derive(Clone, Debug)]
pub struct LinkModel {
    config: LinkConfig,
    up_free: f64,
    down_free: f64,
    entered: u64,
}

impl LinkModel {
    pub fn new(config: LinkConfig) -> LinkModel {
        LinkModel {
            config,
            up_free: 0.0,
            down_free: 0.0,
            entered: 0,
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    pub fn set_blackhole(&mut self, blackhole: Option<Blackhole>) {
        self.config.blackhole = blackhole;
    }

    /// Total bytes offered to the link so far, both directions.
    pub fn entered(&self) -> u64 {
        self.entered
    }

    fn drops(&self, now: f64) -> bool {
        match self.config.blackhole {
            None => false,
            Some(Blackhole::AfterBytes(n)) => self.entered >= n,
            Some(Blackhole::AfterTime(t)) => now >= t,
        }
    }

    /// Schedules a frame of `len` bytes offered at `enqueue`. Returns `None`
    /// for the delivery when the blackhole swallows it; the sender is still
    /// charged the transmission time.
    pub fn deliver(&mut self, dir: Direction, len: usize, enqueue: f64) -> (f64, Option<Delivery>) {
        let dropped = self.drops(enqueue);
        self.entered += len as u64;
        let free = match dir {
            Direction::Up => &mut self.up_free,
            Direction::Down => &mut self.down_free,
        };
        let start = enqueue.max(*free);
        let tx_done = start + self.config.serialization_time(dir, len);
        *free = tx_done;
        let delivered_at = tx_done + self.config.rtt / 2.0;
        let d = Delivery { tx_done, delivered_at };
        (tx_done, (!dropped).then_some(d))
    }
}

/// Byte counters for one link, shared by both endpoints. The byte counts
/// reported in transfer metrics are read from here.
#[derive(Debug, Default)]
pub struct LinkCounters {
    up_entered: AtomicU64,
    down_entered: AtomicU64,
    up_delivered: AtomicU64,
    down_delivered: AtomicU64,
    dropped: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub up_entered: u64,
    pub down_entered: u64,
    pub up_delivered: u64,
    pub down_delivered: u64,
    pub dropped: u64,
}

impl LinkCounters {
    pub fn record_entered(&self, dir: Direction, len: usize) {
        let c = match dir {
            Direction::Up => &self.up_entered,
            Direction::Down => &self.down_entered,
        };
        c.fetch_add(len as u64, Ordering::SeqCst);
    }

    pub fn record_delivered(&self, dir: Direction, len: usize) {
        let c = match dir {
            Direction::Up => &self.up_delivered,
            Direction::Down => &self.down_delivered,
        };
        c.fetch_add(len as u64, Ordering::SeqCst);
    }

    pub fn record_dropped(&self, len: usize) {
        self.dropped.fetch_add(len as u64, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            up_entered: self.up_entered.load(Ordering::SeqCst),
            down_entered: self.down_entered.load(Ordering::SeqCst),
            up_delivered: self.up_delivered.load(Ordering::SeqCst),
            down_delivered: self.down_delivered.load(Ordering::SeqCst),
            dropped: self.dropped.load(Ordering::SeqCst),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(rtt: f64, bw: f64) -> LinkModel {
        LinkModel::new(LinkConfig::new("t", rtt, bw, bw).unwrap())
    }

    #[test]
    fn single_frame_arithmetic() {
        let mut l = link(0.0, 1000.0);
        let (_, d) = l.deliver(Direction::Up, 500, 0.0);
        assert_eq!(d.unwrap().delivered_at, 0.5);
    }

    #[test]
    fn back_to_back_frames_serialize_fifo() {
        let mut l = link(0.0, 1000.0);
        l.deliver(Direction::Up, 500, 0.0);
        let (_, d) = l.deliver(Direction::Up, 500, 0.0);
        assert_eq!(d.unwrap().delivered_at, 1.0);
    }

    #[test]
    fn directions_are_independent() {
        let mut l = link(0.2, 1000.0);
        l.deliver(Direction::Up, 1000, 0.0);
        let (_, d) = l.deliver(Direction::Down, 100, 0.0);
        assert!((d.unwrap().delivered_at - 0.2).abs() < 1e-12);
    }

    #[test]
    fn idle_link_starts_at_enqueue_time() {
        let mut l = link(0.0, 1000.0);
        l.deliver(Direction::Up, 100, 0.0);
        let (_, d) = l.deliver(Direction::Up, 100, 5.0);
        assert!((d.unwrap().delivered_at - 5.1).abs() < 1e-12);
    }

    #[test]
    fn presets_have_exactly_three_entries() {
        let p = presets();
        assert_eq!(p.keys().cloned().collect::<Vec<_>>(), vec!["3g", "loopback", "wifi"]);
        let g = &p["3g"];
        assert_eq!((g.rtt, g.up_bandwidth, g.down_bandwidth), (0.150, 125e3, 500e3));
        let w = &p["wifi"];
        assert_eq!((w.rtt, w.up_bandwidth, w.down_bandwidth), (0.010, 2.5e6, 2.5e6));
        let lo = &p["loopback"];
        assert_eq!((lo.rtt, lo.up_bandwidth, lo.down_bandwidth), (0.0001, 1e9, 1e9));
    }

    #[test]
    fn overriding_rtt_changes_delivery() {
        let mut l = LinkModel::new(preset("wifi").unwrap().with_rtt(1.0));
        let (_, d) = l.deliver(Direction::Down, 0, 0.0);
        assert!((d.unwrap().delivered_at - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_g_eager_upload_is_much_slower_than_wifi() {
        let bytes = 1_500_000;
        let t = |name: &str| {
            let mut l = LinkModel::new(preset(name).unwrap());
            l.deliver(Direction::Up, bytes, 0.0).1.unwrap().delivered_at
        };
        // 12 s + 75 ms against 0.6 s + 5 ms
        assert!(t("3g") >= 10.0 * t("wifi"));
    }

    #[test]
    fn parses_custom_links() {
        let c = parse_network("custom:20,1000,4000").unwrap();
        assert_eq!((c.rtt, c.up_bandwidth, c.down_bandwidth), (0.02, 1000.0, 4000.0));
        assert!(parse_network("custom:1,2").is_err());
        assert!(parse_network("custom:1,0,5").is_err());
        assert!(parse_network("lte").is_err());
    }

    #[test]
    fn blackhole_after_bytes_drops_later_frames() {
        let mut l = link(0.0, 1000.0);
        l.set_blackhole(Some(Blackhole::AfterBytes(150)));
        assert!(l.deliver(Direction::Up, 100, 0.0).1.is_some());
        // starts at 100 < 150, still delivered
        assert!(l.deliver(Direction::Down, 100, 0.0).1.is_some());
        assert!(l.deliver(Direction::Up, 1, 0.0).1.is_none());
    }

    #[test]
    fn blackhole_after_time() {
        let mut l = link(0.0, 1000.0);
        l.set_blackhole(Some(Blackhole::AfterTime(1.0)));
        assert!(l.deliver(Direction::Up, 1, 0.5).1.is_some());
        assert!(l.deliver(Direction::Up, 1, 1.0).1.is_none());
    }
}
