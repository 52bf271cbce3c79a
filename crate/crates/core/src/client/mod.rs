//! Client runtime: task registry, code registration, placement, offload
//! with eager/lazy/pipelined state transfer, and local fallback.

mod cache;
mod config;
mod decide;
mod profile;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use cache::{should_elide, ClientCacheView};
pub use config::{ClientConfig, StrategyChoice};
pub use decide::{decide, estimate, Estimate, Placement, SpeedProfile, StateEstimate};
pub use profile::{profile_network, NetworkProfile};

use crate::clock::{Clock, Join};
use crate::error::{Error, Result};
use crate::object::{
    apply_result_state, content_hash, encode_node_stream, reachable_closure, serialize_graph, Digest,
    Guid, ObjectGraph, ObjectNode, ProxyPolicy, TransmissionStrategy, GRAPH_MAGIC, PROXY_OVERHEAD,
};
use crate::task::{Invocation, LocalCtx, Meter, TaskFn};
use crate::transport::{Endpoint, Sender};
use crate::wire::{ExecuteBody, RemoteErrorCode, ResultStatus, WireMessage};

/// Per-invocation cost and access predictions supplied by the task author.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskHints {
    /// Estimated work units.
    pub compute: f64,
    /// Expected order in which the task touches proxyable nodes.
    pub access_order: Option<Vec<Guid>>,
}

pub type HintFn = Arc<dyn Fn(&ObjectGraph, &Invocation) -> TaskHints + Send + Sync>;

#[derive(Clone)]
pub struct TaskDescriptor {
    pub task_id: u32,
    pub name: String,
    pub offloadable: bool,
    pub local_impl: TaskFn,
    /// Server implementation to run instead of `task_id` when offloaded.
    pub alternative_impl_id: Option<u32>,
    pub hints: HintFn,
}

impl TaskDescriptor {
    pub fn new(task_id: u32, name: &str, local_impl: TaskFn) -> Self {
        TaskDescriptor {
            task_id,
            name: name.to_string(),
            offloadable: true,
            local_impl,
            alternative_impl_id: None,
            hints: Arc::new(|_, _| TaskHints::default()),
        }
    }

    pub fn with_alternative(mut self, id: u32) -> Self {
        self.alternative_impl_id = Some(id);
        self
    }

    pub fn with_hints(
        mut self,
        f: impl Fn(&ObjectGraph, &Invocation) -> TaskHints + Send + Sync + 'static,
    ) -> Self {
        self.hints = Arc::new(f);
        self
    }

    pub fn local_only(mut self) -> Self {
        self.offloadable = false;
        self
    }
}

impl std::fmt::Debug for TaskDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskDescriptor")
            .field("task_id", &self.task_id)
            .field("name", &self.name)
            .field("offloadable", &self.offloadable)
            .field("alternative_impl_id", &self.alternative_impl_id)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferMetrics {
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Seconds on the runtime's clock.
    pub wall_time: f64,
    /// Where the result was finally computed.
    pub placement: Placement,
    /// The remote placement that failed before falling back, if any.
    pub fallback_from: Option<Placement>,
    pub fetch_round_trips: u64,
    pub pushes: u64,
    pub cache_hits: u64,
    /// Execution time reported by the server.
    pub server_exec: f64,
}

impl TransferMetrics {
    fn local(wall_time: f64) -> Self {
        TransferMetrics {
            bytes_up: 0,
            bytes_down: 0,
            wall_time,
            placement: Placement::Local,
            fallback_from: None,
            fetch_round_trips: 0,
            pushes: 0,
            cache_hits: 0,
            server_exec: 0.0,
        }
    }

    pub fn fell_back(&self) -> bool {
        self.fallback_from.is_some()
    }
}

/// Traffic spent on code registration, kept apart from invocation metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CodeStats {
    pub checks: u64,
    pub uploads: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// What went wrong with an offload, which decides how the client reacts.
enum OffloadError {
    /// No answer in time or the connection dropped.
    Link(Error),
    Remote(RemoteErrorCode, String),
    Local(Error),
}

impl From<Error> for OffloadError {
    fn from(e: Error) -> Self {
        match e {
            Error::Timeout(_) | Error::Disconnected | Error::Io(_) => OffloadError::Link(e),
            other => OffloadError::Local(other),
        }
    }
}

struct OffloadOutcome {
    ret: Vec<u8>,
    fetches: u64,
    pushes: u64,
    cache_hits: u64,
    server_exec: f64,
}

/// Background OBJECT_PUSH stream for pipelined transfer.
#[derive(Default)]
struct PushQueue {
    waiting: VecDeque<ObjectNode>,
    /// Guids the pusher has started sending.
    taken: HashSet<Guid>,
}

enum Claim {
    /// The pusher already put it on the wire; it will arrive.
    InFlight,
    /// Removed from the push queue; the caller sends it now.
    Claimed(ObjectNode),
    /// Never queued.
    Absent,
}

struct Pusher {
    done: Arc<AtomicBool>,
    queue: Arc<Mutex<PushQueue>>,
    join: Join<u64>,
}

impl Pusher {
    fn start(clock: &Clock, sender: Sender, nodes: Vec<ObjectNode>, activity: Arc<AtomicU64>) -> Pusher {
        let done = Arc::new(AtomicBool::new(false));
        let queue = Arc::new(Mutex::new(PushQueue {
            waiting: nodes.into(),
            taken: HashSet::new(),
        }));
        let stop = done.clone();
        let q = queue.clone();
        let c = clock.clone();
        let join = clock.spawn("pusher", move || {
            let mut pushed = 0;
            while !stop.load(Ordering::SeqCst) {
                let node = {
                    let mut q = q.lock().unwrap_or_else(|e| e.into_inner());
                    let Some(node) = q.waiting.pop_front() else { break };
                    q.taken.insert(node.guid);
                    node
                };
                // encoded only now, after the previous push left the client
                let msg = WireMessage::ObjectPush {
                    guid: node.guid,
                    node_bytes: encode_node_stream(&node),
                };
                if sender.send(&msg).is_err() {
                    break;
                }
                pushed += 1;
                activity.store(c.now().to_bits(), Ordering::SeqCst);
            }
            pushed
        });
        Pusher { done, queue, join }
    }

    /// Takes `guid` out of the push schedule so a fetch answer can jump the
    /// queue, unless the pusher has already sent it.
    fn claim(&self, guid: Guid) -> Claim {
        let mut q = self.queue.lock().unwrap_or_else(|e| e.into_inner());
        if q.taken.contains(&guid) {
            return Claim::InFlight;
        }
        match q.waiting.iter().position(|n| n.guid == guid) {
            Some(i) => {
                q.taken.insert(guid);
                Claim::Claimed(q.waiting.remove(i).expect("index in range"))
            }
            None => Claim::Absent,
        }
    }

    fn finish(self) -> u64 {
        self.done.store(true, Ordering::SeqCst);
        self.join.join()
    }
}

pub struct Client {
    ep: Endpoint,
    clock: Clock,
    config: ClientConfig,
    speeds: SpeedProfile,
    tasks: BTreeMap<u32, TaskDescriptor>,
    profile: NetworkProfile,
    cache: ClientCacheView,
    bundle: Option<(Digest, Vec<u8>)>,
    code_registered: bool,
    code_stats: CodeStats,
}

impl Client {
    pub fn new(ep: Endpoint, speeds: SpeedProfile, config: ClientConfig) -> Client {
        Client {
            clock: ep.clock().clone(),
            ep,
            config,
            speeds,
            tasks: BTreeMap::new(),
            profile: NetworkProfile::unknown(),
            cache: ClientCacheView::new(),
            bundle: None,
            code_registered: false,
            code_stats: CodeStats::default(),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.ep
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ClientConfig {
        &mut self.config
    }

    pub fn speeds(&self) -> &SpeedProfile {
        &self.speeds
    }

    pub fn set_speeds(&mut self, speeds: SpeedProfile) {
        self.speeds = speeds;
    }

    pub fn profile(&self) -> &NetworkProfile {
        &self.profile
    }

    pub fn set_profile(&mut self, profile: NetworkProfile) {
        self.profile = profile;
    }

    pub fn cache(&self) -> &ClientCacheView {
        &self.cache
    }

    pub fn code_stats(&self) -> CodeStats {
        self.code_stats
    }

    pub fn register_task(&mut self, descriptor: TaskDescriptor) -> Result<()> {
        if self.tasks.contains_key(&descriptor.task_id) {
            return Err(Error::Conflict(format!(
                "task id {} already registered",
                descriptor.task_id
            )));
        }
        self.tasks.insert(descriptor.task_id, descriptor);
        Ok(())
    }

    fn remote_timeout(&self) -> f64 {
        let rtt = if self.profile.last_updated.is_some() {
            self.profile.rtt
        } else {
            0.0
        };
        self.config.timeout.max(100.0 * rtt)
    }

    /// Makes `bundle` known to the server, uploading it only if the server
    /// does not already hold a copy with the same hash.
    pub fn register_code(&mut self, bundle: Vec<u8>) -> Result<()> {
        let hash = Digest::of(&bundle);
        let same = matches!(&self.bundle, Some((h, _)) if *h == hash);
        if !same {
            self.code_registered = false;
        }
        self.bundle = Some((hash, bundle));
        self.ensure_code()
    }

    fn ensure_code(&mut self) -> Result<()> {
        if self.code_registered {
            return Ok(());
        }
        let Some((hash, bundle)) = self.bundle.clone() else {
            return Err(Error::IllegalState("no code bundle set".into()));
        };
        let before = self.ep.counters();
        let result = self.code_exchange(hash, &bundle);
        let after = self.ep.counters();
        self.code_stats.bytes_up += after.up_entered - before.up_entered;
        self.code_stats.bytes_down += after.down_entered - before.down_entered;
        match &result {
            Ok(()) => self.code_registered = true,
            Err(Error::Timeout(_) | Error::Disconnected | Error::Io(_)) => {
                self.profile.reachable = false;
            }
            Err(_) => {}
        }
        result
    }

    fn code_exchange(&mut self, hash: Digest, bundle: &[u8]) -> Result<()> {
        let timeout = self.remote_timeout();
        self.code_stats.checks += 1;
        self.ep.send(&WireMessage::CodeCheck(hash))?;
        loop {
            match self.ep.recv_until(self.clock.now() + timeout)? {
                WireMessage::CodeOk(h) if h == hash => return Ok(()),
                WireMessage::CodeNeed(h) if h == hash => {
                    self.code_stats.uploads += 1;
                    self.ep.send(&WireMessage::CodeUpload {
                        hash,
                        bundle: bundle.to_vec(),
                    })?;
                }
                WireMessage::RemoteError { code, message } => {
                    return Err(Error::RemoteFailure(format!("{code}: {message}")))
                }
                other => log::debug!("code registration skips {:?}", other.kind()),
            }
        }
    }

    /// Measures the link and updates the stored profile.
    pub fn profile_network(&mut self) -> NetworkProfile {
        self.profile = profile_network(&self.ep, &self.profile, self.remote_timeout());
        self.profile
    }

    fn roots(&self, graph: &ObjectGraph, inv: &Invocation) -> Result<(Vec<Guid>, Vec<Guid>)> {
        let mut statics = Vec::new();
        for name in &self.config.static_roots {
            let g = graph
                .statics
                .get(name)
                .ok_or_else(|| Error::Config(format!("static root {name:?} not in graph")))?;
            statics.push(*g);
        }
        let mut roots = vec![inv.target];
        roots.extend(&inv.params);
        roots.extend(&statics);
        Ok((roots, statics))
    }

    fn state_estimate(&self, graph: &ObjectGraph, roots: &[Guid]) -> Result<StateEstimate> {
        let mut est = StateEstimate {
            state_size: GRAPH_MAGIC.len() + 4,
            expected_down: GRAPH_MAGIC.len() + 4,
            ..Default::default()
        };
        for g in reachable_closure(graph, roots)? {
            let n = graph.node(&g)?;
            if self.config.cache_enabled && n.proxyable && self.cache.should_elide(n) {
                est.state_size += PROXY_OVERHEAD;
                continue;
            }
            est.state_size += n.encoded_len();
            if n.proxyable {
                est.elidable_size += n.encoded_len();
                est.n_proxies += 1;
            } else {
                est.expected_down += n.encoded_len();
            }
        }
        Ok(est)
    }

    /// The placement `invoke` would choose right now, with the predictions
    /// behind it. Does not touch the network.
    pub fn plan(
        &self,
        task_id: u32,
        graph: &ObjectGraph,
        target: Guid,
        params: &[Guid],
    ) -> Result<(Placement, Estimate, StateEstimate)> {
        let task = self.tasks.get(&task_id).ok_or(Error::UnknownTask(task_id))?;
        let inv = Invocation {
            target,
            params: params.to_vec(),
        };
        let (roots, _) = self.roots(graph, &inv)?;
        let state = self.state_estimate(graph, &roots)?;
        let hints = (task.hints)(graph, &inv);
        let est = estimate(hints.compute, &self.profile, &self.speeds, &state);
        let placement = match self.config.strategy {
            StrategyChoice::Local => Placement::Local,
            StrategyChoice::Remote(s) if task.offloadable && self.profile.reachable => Placement::Remote(s),
            StrategyChoice::Remote(_) => Placement::Local,
            StrategyChoice::Auto => decide(task.offloadable, hints.compute, &self.profile, &self.speeds, &state),
        };
        Ok((placement, est, state))
    }

    fn run_local(&self, task: &TaskDescriptor, graph: &mut ObjectGraph, inv: &Invocation) -> Result<Vec<u8>> {
        let meter = Meter::new(self.clock.clone(), self.speeds.local);
        let mut ctx = LocalCtx::new(graph, inv.target, Some(meter));
        Ok((task.local_impl)(&mut ctx, inv)?)
    }

    /// Runs a registered task, locally or on the server, and reports how.
    /// Remote failures are not surfaced: the task is rerun locally against
    /// the untouched graph.
    pub fn invoke(
        &mut self,
        task_id: u32,
        graph: &mut ObjectGraph,
        target: Guid,
        params: &[Guid],
    ) -> Result<(Vec<u8>, TransferMetrics)> {
        let task = self.tasks.get(&task_id).cloned().ok_or(Error::UnknownTask(task_id))?;
        let inv = Invocation {
            target,
            params: params.to_vec(),
        };
        if self.config.strategy == StrategyChoice::Auto
            && task.offloadable
            && self.profile.reachable
            && self.profile.last_updated.is_none()
        {
            self.profile_network();
        }
        let (placement, _, _) = self.plan(task_id, graph, target, params)?;
        let Placement::Remote(strategy) = placement else {
            let start = self.clock.now();
            let ret = self.run_local(&task, graph, &inv)?;
            return Ok((ret, TransferMetrics::local(self.clock.now() - start)));
        };

        let start = self.clock.now();
        let registered = self.ensure_code();
        let before = self.ep.counters();
        let outcome = match registered {
            Ok(()) => self.offload(&task, strategy, graph, &inv),
            Err(e) => Err(OffloadError::Local(e)),
        };
        let after = self.ep.counters();
        let mut metrics = TransferMetrics {
            bytes_up: after.up_entered - before.up_entered,
            bytes_down: after.down_entered - before.down_entered,
            wall_time: 0.0,
            placement,
            fallback_from: None,
            fetch_round_trips: 0,
            pushes: 0,
            cache_hits: 0,
            server_exec: 0.0,
        };
        match outcome {
            Ok(o) => {
                metrics.fetch_round_trips = o.fetches;
                metrics.pushes = o.pushes;
                metrics.cache_hits = o.cache_hits;
                metrics.server_exec = o.server_exec;
                metrics.wall_time = self.clock.now() - start;
                Ok((o.ret, metrics))
            }
            Err(err) => {
                match err {
                    OffloadError::Link(e) => {
                        log::warn!("offload of task {task_id} failed ({e}); server marked unreachable");
                        self.profile.reachable = false;
                    }
                    OffloadError::Remote(code, msg) => {
                        log::warn!("server rejected task {task_id}: {code}: {msg}");
                        if code == RemoteErrorCode::CodeUnknown {
                            self.code_registered = false;
                        }
                    }
                    OffloadError::Local(e) => log::warn!("offload of task {task_id} failed: {e}"),
                }
                // the server may have cached versions this client never saw
                self.cache.clear();
                let ret = self.run_local(&task, graph, &inv)?;
                metrics.placement = Placement::Local;
                metrics.fallback_from = Some(placement);
                metrics.wall_time = self.clock.now() - start;
                Ok((ret, metrics))
            }
        }
    }

    fn offload(
        &mut self,
        task: &TaskDescriptor,
        strategy: TransmissionStrategy,
        graph: &mut ObjectGraph,
        inv: &Invocation,
    ) -> std::result::Result<OffloadOutcome, OffloadError> {
        let (roots, statics) = self.roots(graph, inv)?;
        let hints = (task.hints)(graph, inv);
        let policy = ProxyPolicy::new(strategy, self.config.cache_enabled);
        let ser = serialize_graph(graph, &roots, &policy, &self.cache)?;
        let elided: HashSet<Guid> = ser.elided.iter().copied().collect();
        let code_hash = self.bundle.as_ref().map(|(h, _)| *h).expect("code registered");
        let idle = self.remote_timeout() + 2.0 * hints.compute / self.speeds.server;

        let pending_push = if strategy == TransmissionStrategy::Pipelined {
            push_order(&ser.strategy_elided(), hints.access_order.as_deref())
                .into_iter()
                .map(|g| graph.node(&g).cloned())
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let cache_hits = ser.cache_hits.len() as u64;

        self.ep.send(&WireMessage::Execute(ExecuteBody {
            task_id: task.task_id,
            alternative_impl_id: task.alternative_impl_id,
            strategy,
            code_hash,
            target_root: inv.target,
            param_roots: inv.params.clone(),
            static_roots: statics,
            state: ser.bytes,
        }))?;
        let activity = Arc::new(AtomicU64::new(self.clock.now().to_bits()));
        let pusher = (!pending_push.is_empty())
            .then(|| Pusher::start(&self.clock, self.ep.sender(), pending_push, activity.clone()));

        let result = self.await_result(graph, &elided, idle, &activity, pusher.as_ref());
        let pushes = pusher.map(Pusher::finish).unwrap_or(0);
        let (body, fetches) = result?;
        if body.status != ResultStatus::Ok {
            return Err(OffloadError::Remote(
                RemoteErrorCode::TaskFailed,
                String::from_utf8_lossy(&body.return_payload).into_owned(),
            ));
        }
        apply_result_state(graph, &body.modified_state)?;
        if self.config.cache_enabled {
            for g in &body.cached {
                if let Some(n) = graph.get(g) {
                    if n.proxyable && !n.is_proxy() {
                        self.cache.acknowledge(*g, content_hash(n));
                    }
                }
            }
        }
        Ok(OffloadOutcome {
            ret: body.return_payload,
            fetches,
            pushes,
            cache_hits,
            server_exec: body.exec_nanos as f64 / 1e9,
        })
    }

    /// Serves fetches until RESULT arrives. The idle timer restarts whenever
    /// a frame is received or sent.
    fn await_result(
        &self,
        graph: &ObjectGraph,
        elided: &HashSet<Guid>,
        idle: f64,
        activity: &AtomicU64,
        pusher: Option<&Pusher>,
    ) -> std::result::Result<(crate::wire::ResultBody, u64), OffloadError> {
        let touch = || activity.store(self.clock.now().to_bits(), Ordering::SeqCst);
        let mut fetches = 0;
        loop {
            let deadline = f64::from_bits(activity.load(Ordering::SeqCst)) + idle;
            let msg = match self.ep.recv_until(deadline) {
                Ok(m) => m,
                Err(Error::Timeout(_)) => {
                    // retry only if the pusher moved the deadline meanwhile
                    if f64::from_bits(activity.load(Ordering::SeqCst)) + idle > deadline {
                        continue;
                    }
                    return Err(OffloadError::Link(Error::Timeout(format!(
                        "no frame from server for {idle:.1} s"
                    ))));
                }
                Err(e) => return Err(e.into()),
            };
            touch();
            match msg {
                WireMessage::ObjectFetch(g) => {
                    if !elided.contains(&g) {
                        return Err(OffloadError::Local(Error::protocol(
                            0,
                            format!("server fetched {g}, which was sent in full"),
                        )));
                    }
                    fetches += 1;
                    let node_bytes = match pusher.map_or(Claim::Absent, |p| p.claim(g)) {
                        Claim::InFlight => continue,
                        Claim::Claimed(node) => encode_node_stream(&node),
                        Claim::Absent => encode_node_stream(graph.node(&g)?),
                    };
                    self.ep.send(&WireMessage::ObjectPush { guid: g, node_bytes })?;
                    touch();
                }
                WireMessage::Result(body) => return Ok((body, fetches)),
                WireMessage::RemoteError { code, message } => {
                    return Err(OffloadError::Remote(code, message))
                }
                other => log::debug!("offload skips stale {:?}", other.kind()),
            }
        }
    }
}

/// Push order for pipelined transfer: hinted nodes first, in hint order,
/// then the rest in closure order.
fn push_order(elided: &[Guid], hint: Option<&[Guid]>) -> Vec<Guid> {
    let members: HashSet<Guid> = elided.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(elided.len());
    for g in hint.unwrap_or(&[]).iter().chain(elided) {
        if members.contains(g) && seen.insert(*g) {
            out.push(*g);
        }
    }
    out
}
