use crate::error::{Error, Result};
use crate::transport::Endpoint;
use crate::wire::{WireMessage, PROBE_BYTES};

const EWMA_ALPHA: f64 = 0.5;
const PINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkProfile {
    /// Seconds.
    pub rtt: f64,
    /// Bytes per second, client to server.
    pub uplink: f64,
    /// Bytes per second, server to client.
    pub downlink: f64,
    /// Clock time of the last measurement; `None` before the first one.
    pub last_updated: Option<f64>,
    pub reachable: bool,
}

impl NetworkProfile {
    /// Nothing measured yet; placement will try the server.
    pub fn unknown() -> Self {
        NetworkProfile {
            rtt: 0.0,
            uplink: f64::INFINITY,
            downlink: f64::INFINITY,
            last_updated: None,
            reachable: true,
        }
    }

    pub fn measured(rtt: f64, uplink: f64, downlink: f64, at: f64) -> Self {
        NetworkProfile {
            rtt,
            uplink,
            downlink,
            last_updated: Some(at),
            reachable: true,
        }
    }

    fn blend(&self, fresh: NetworkProfile) -> NetworkProfile {
        if self.last_updated.is_none() || !self.reachable {
            return fresh;
        }
        let mix = |old: f64, new: f64| EWMA_ALPHA * new + (1.0 - EWMA_ALPHA) * old;
        NetworkProfile {
            rtt: mix(self.rtt, fresh.rtt),
            uplink: mix(self.uplink, fresh.uplink),
            downlink: mix(self.downlink, fresh.downlink),
            last_updated: fresh.last_updated,
            reachable: true,
        }
    }
}

/// Waits for the first frame satisfying `want`, skipping stale traffic.
fn await_frame(ep: &Endpoint, deadline: f64, want: impl Fn(&WireMessage) -> bool) -> Result<()> {
    loop {
        let msg = ep.recv_until(deadline)?;
        if want(&msg) {
            return Ok(());
        }
        log::debug!("profiler skips stale {:?}", msg.kind());
    }
}

fn measure(ep: &Endpoint, timeout: f64) -> Result<NetworkProfile> {
    let clock = ep.clock().clone();
    let mut rtts = Vec::with_capacity(PINGS);
    for _ in 0..PINGS {
        let t0 = clock.now();
        ep.send(&WireMessage::Ping)?;
        await_frame(ep, t0 + timeout, |m| *m == WireMessage::Pong)?;
        rtts.push(clock.now() - t0);
    }
    rtts.sort_by(f64::total_cmp);
    let rtt = rtts[PINGS / 2];

    let probe = WireMessage::Probe { len: PROBE_BYTES };
    let probe_frame = probe.frame_size() as f64;

    let t0 = clock.now();
    ep.send(&probe)?;
    await_frame(ep, t0 + timeout, |m| *m == WireMessage::Pong)?;
    let uplink = probe_frame / (clock.now() - t0 - rtt).max(1e-9);

    let t0 = clock.now();
    ep.send(&WireMessage::Probe { len: 0 })?;
    await_frame(ep, t0 + timeout, |m| matches!(m, WireMessage::Probe { len } if *len > 0))?;
    let downlink = probe_frame / (clock.now() - t0 - rtt).max(1e-9);

    Ok(NetworkProfile::measured(rtt, uplink, downlink, clock.now()))
}

/// Measures the link and folds the result into `prior`. Any probe that goes
/// unanswered within `timeout` seconds leaves the profile unreachable.
pub fn profile_network(ep: &Endpoint, prior: &NetworkProfile, timeout: f64) -> NetworkProfile {
    match measure(ep, timeout) {
        Ok(fresh) => prior.blend(fresh),
        Err(e) => {
            match e {
                Error::Timeout(_) | Error::Disconnected => {}
                ref other => log::warn!("network profiling failed: {other}"),
            }
            NetworkProfile {
                reachable: false,
                ..*prior
            }
        }
    }
}
