use std::fmt;

use crate::object::{TransmissionStrategy, PROXY_OVERHEAD};

use super::profile::NetworkProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    Local,
    Remote(TransmissionStrategy),
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Local => "local",
            Placement::Remote(s) => s.name(),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Compute throughput in work units per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedProfile {
    pub local: f64,
    pub server: f64,
}

/// Sizes of one invocation's state, in bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StateEstimate {
    /// The state serialized without strategy proxies.
    pub state_size: usize,
    /// Encoded size of the nodes a proxying strategy would withhold.
    pub elidable_size: usize,
    pub n_proxies: usize,
    /// Expected size of the returned state.
    pub expected_down: usize,
}

impl StateEstimate {
    /// Bytes of state shipped with EXECUTE when proxyable nodes are withheld.
    pub fn proxied_upload(&self) -> usize {
        self.state_size - self.elidable_size + PROXY_OVERHEAD * self.n_proxies
    }
}

/// Predicted makespans, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub local: f64,
    pub eager: f64,
    pub lazy: f64,
    pub pipelined: f64,
}

impl Estimate {
    pub fn remote(&self, s: TransmissionStrategy) -> f64 {
        match s {
            TransmissionStrategy::Eager => self.eager,
            TransmissionStrategy::Lazy => self.lazy,
            TransmissionStrategy::Pipelined => self.pipelined,
        }
    }
}

pub fn estimate(
    compute_hint: f64,
    profile: &NetworkProfile,
    speeds: &SpeedProfile,
    state: &StateEstimate,
) -> Estimate {
    let up = |bytes: usize| bytes as f64 / profile.uplink;
    let down = state.expected_down as f64 / profile.downlink;
    let compute = compute_hint / speeds.server;
    let head = state.proxied_upload();
    Estimate {
        local: compute_hint / speeds.local,
        eager: profile.rtt + up(state.state_size) + compute + down,
        lazy: profile.rtt + up(head) + compute + down,
        pipelined: profile.rtt + up(head) + up(state.elidable_size).max(compute) + down,
    }
}

/// Picks the placement with the smallest predicted makespan. Exact ties
/// prefer, in order, local, eager, pipelined, lazy.
pub fn decide(
    offloadable: bool,
    compute_hint: f64,
    profile: &NetworkProfile,
    speeds: &SpeedProfile,
    state: &StateEstimate,
) -> Placement {
    if !offloadable || !profile.reachable {
        return Placement::Local;
    }
    let e = estimate(compute_hint, profile, speeds, state);
    let mut best = (Placement::Local, e.local);
    for s in [
        TransmissionStrategy::Eager,
        TransmissionStrategy::Pipelined,
        TransmissionStrategy::Lazy,
    ] {
        let t = e.remote(s);
        if t < best.1 {
            best = (Placement::Remote(s), t);
        }
    }
    best.0
}
