//! Computation offloading runtime.
//!
//! Application state is an [`ObjectGraph`] of identified nodes. A
//! [`Client`] runs registered tasks either in place or on a [`Server`],
//! shipping the task's reachable graph eagerly, as proxies fetched on
//! demand, or as proxies followed by a background push stream. Links can be
//! real TCP connections or an emulated link driven by a deterministic
//! virtual clock.

mod codec;

pub mod client;
pub mod clock;
pub mod error;
pub mod netsim;
pub mod object;
pub mod server;
pub mod sim;
pub mod task;
pub mod testbed;
pub mod transport;
pub mod wire;

pub use client::{
    Client, ClientCacheView, ClientConfig, NetworkProfile, Placement, SpeedProfile, StrategyChoice,
    TaskDescriptor, TaskHints, TransferMetrics,
};
pub use clock::Clock;
pub use error::{Error, Result};
pub use netsim::{Blackhole, LinkConfig};
pub use object::{Digest, Guid, ObjectGraph, ObjectNode, ProxyPolicy, TransmissionStrategy};
pub use server::{Server, ServerConfig};
pub use task::{Invocation, TaskContext, TaskError, TaskFn};
pub use testbed::Testbed;
