//! Server runtime: code registry, object cache and execution sessions.
//!
//! Each connection runs an ingest loop that answers control messages and
//! feeds pushed objects into the active session. Execution runs on its own
//! thread; when the task touches a proxy it asks the client for the object
//! and parks until ingest hydrates it.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::clock::{Clock, Join, RecvError, Rx, Tx};
use crate::error::{Error, Result};
use crate::object::{
    content_hash, decode_stream, deserialize_graph, encode_nodes, hydrate_proxy, Digest, Guid,
    ObjectGraph, ObjectNode,
};
use crate::task::{bundle_tasks, GuidMint, Invocation, Meter, TaskContext, TaskError, TaskFn};
use crate::transport::{tcp_endpoint, Endpoint, Sender, Side, Traffic};
use crate::wire::{ExecuteBody, RemoteErrorCode, ResultBody, ResultStatus, WireMessage, PROBE_BYTES};

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Work units per second, used to emulate compute time.
    pub speed: f64,
    /// Seconds an executing task waits for a fetched object.
    pub fetch_timeout: f64,
    /// Where uploaded bundles are persisted; `None` keeps them in memory.
    pub registry_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            speed: 1e9,
            fetch_timeout: 30.0,
            registry_dir: None,
        }
    }
}

/// Uploaded code bundles keyed by their MD5.
#[derive(Debug, Default)]
pub struct CodeRegistry {
    bundles: BTreeMap<Digest, Vec<u8>>,
    dir: Option<PathBuf>,
}

impl CodeRegistry {
    /// Loads previously persisted bundles from `dir`, if given.
    pub fn open(dir: Option<PathBuf>) -> Result<CodeRegistry> {
        let mut bundles = BTreeMap::new();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
            for entry in std::fs::read_dir(d)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("bundle") {
                    continue;
                }
                let bytes = std::fs::read(&path)?;
                let hash = Digest::of(&bytes);
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if stem != hash.to_string() {
                    log::warn!("ignoring {}: contents do not match its name", path.display());
                    continue;
                }
                bundles.insert(hash, bytes);
            }
        }
        Ok(CodeRegistry { bundles, dir })
    }

    pub fn contains(&self, hash: &Digest) -> bool {
        self.bundles.contains_key(hash)
    }

    pub fn get(&self, hash: &Digest) -> Option<&[u8]> {
        self.bundles.get(hash).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Stores `bundle` under `hash` after checking the hash.
    pub fn insert(&mut self, hash: Digest, bundle: Vec<u8>) -> Result<()> {
        let actual = Digest::of(&bundle);
        if actual != hash {
            return Err(Error::RemoteFailure(format!(
                "bundle hashes to {actual}, announced {hash}"
            )));
        }
        if self.bundles.contains_key(&hash) {
            return Ok(());
        }
        if let Some(d) = &self.dir {
            std::fs::write(d.join(format!("{hash}.bundle")), &bundle)?;
        }
        self.bundles.insert(hash, bundle);
        Ok(())
    }
}

/// Full copies of proxyable nodes as of the end of their last session.
#[derive(Debug, Default)]
pub struct ServerCache {
    entries: BTreeMap<Guid, (Digest, Vec<u8>)>,
}

impl ServerCache {
    pub fn store(&mut self, node: &ObjectNode) {
        debug_assert!(!node.is_proxy());
        self.entries
            .insert(node.guid, (content_hash(node), encode_nodes(std::slice::from_ref(node))));
    }

    pub fn lookup(&self, guid: &Guid) -> Option<ObjectNode> {
        let (_, bytes) = self.entries.get(guid)?;
        decode_stream(bytes).ok()?.into_iter().next()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every entry's digest matches the node it stores.
    pub fn is_coherent(&self) -> bool {
        self.entries.iter().all(|(g, (d, bytes))| {
            matches!(decode_stream(bytes).as_deref(), Ok([n]) if n.guid == *g && content_hash(n) == *d)
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub sessions: u64,
    pub results: u64,
    pub remote_errors: u64,
    pub fetches_sent: u64,
    pub hydrations: u64,
    /// Pushes for nodes that were already hydrated.
    pub duplicate_pushes: u64,
    /// Pushes that arrived with no session running.
    pub late_pushes: u64,
    pub cache_restores: u64,
    /// Highest number of hydrations of one node within one session.
    pub max_hydrations_per_node: u32,
    pub code_uploads: u64,
}

struct SessionState {
    graph: ObjectGraph,
    /// Content hash of each node when it first became available in full.
    pre_hashes: BTreeMap<Guid, Digest>,
    pending_faults: BTreeSet<Guid>,
    hydrations: BTreeMap<Guid, u32>,
    aborted: Option<String>,
    finished: bool,
}

struct Session {
    state: Mutex<SessionState>,
}

struct Active {
    session: Arc<Session>,
    wake: Tx<()>,
    join: Join<()>,
}

/// Server handle. Clones share the registry, cache and statistics.
#[derive(Clone)]
pub struct Server {
    catalog: Arc<BTreeMap<u32, TaskFn>>,
    config: ServerConfig,
    registry: Arc<Mutex<CodeRegistry>>,
    cache: Arc<Mutex<ServerCache>>,
    stats: Arc<Mutex<ServerStats>>,
}

impl Server {
    /// `catalog` holds the implementations this server can run, standard
    /// and alternative alike, keyed by id.
    pub fn new(catalog: BTreeMap<u32, TaskFn>, config: ServerConfig) -> Result<Server> {
        let registry = CodeRegistry::open(config.registry_dir.clone())?;
        Ok(Server {
            catalog: Arc::new(catalog),
            config,
            registry: Arc::new(Mutex::new(registry)),
            cache: Arc::new(Mutex::new(ServerCache::default())),
            stats: Arc::new(Mutex::new(ServerStats::default())),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn stats(&self) -> ServerStats {
        lock(&self.stats).clone()
    }

    pub fn cache_len(&self) -> usize {
        lock(&self.cache).len()
    }

    pub fn cache_is_coherent(&self) -> bool {
        lock(&self.cache).is_coherent()
    }

    pub fn registry_len(&self) -> usize {
        lock(&self.registry).len()
    }

    /// Runs the connection on a new thread of the endpoint's clock.
    pub fn spawn(&self, ep: Endpoint) -> Join<()> {
        let server = self.clone();
        ep.clock().clone().spawn("server-ingest", move || server.serve(ep))
    }

    /// Binds a TCP listener; pair with [`Server::serve_listener`].
    pub fn bind(addr: &str) -> Result<(TcpListener, SocketAddr)> {
        let l = TcpListener::bind(addr)?;
        let a = l.local_addr()?;
        Ok((l, a))
    }

    /// Accepts connections forever, one thread each.
    pub fn serve_listener(&self, listener: TcpListener) -> Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let peer = stream.peer_addr().ok();
            let server = self.clone();
            std::thread::spawn(move || match tcp_endpoint(stream, Side::Server) {
                Ok(ep) => {
                    log::info!("connection from {peer:?}");
                    server.serve(ep);
                    log::info!("connection from {peer:?} closed");
                }
                Err(e) => log::warn!("connection setup failed: {e}"),
            });
        }
        Ok(())
    }

    fn send_error(&self, ep: &Endpoint, code: RemoteErrorCode, message: String) {
        lock(&self.stats).remote_errors += 1;
        log::debug!("remote error {code}: {message}");
        let _ = ep.send(&WireMessage::RemoteError { code, message });
    }

    /// Ingest loop for one connection. Returns when the peer disconnects.
    pub fn serve(&self, ep: Endpoint) {
        let mut active: Option<Active> = None;
        loop {
            let msg = match ep.recv() {
                Ok(m) => m,
                Err(Error::Disconnected) => break,
                Err(e @ Error::Protocol { .. }) => {
                    self.abort(&ep, &mut active, format!("{e}"));
                    continue;
                }
                Err(e) => {
                    log::warn!("connection error: {e}");
                    break;
                }
            };
            let sent = match msg {
                WireMessage::Ping => ep.send(&WireMessage::Pong),
                WireMessage::Probe { len: 0 } => ep.send(&WireMessage::Probe { len: PROBE_BYTES }),
                WireMessage::Probe { .. } => ep.send(&WireMessage::Pong),
                WireMessage::CodeCheck(h) => {
                    let known = lock(&self.registry).contains(&h);
                    ep.send(&if known {
                        WireMessage::CodeOk(h)
                    } else {
                        WireMessage::CodeNeed(h)
                    })
                }
                WireMessage::CodeUpload { hash, bundle } => {
                    let stored = lock(&self.registry).insert(hash, bundle);
                    match stored {
                        Ok(()) => {
                            lock(&self.stats).code_uploads += 1;
                            ep.send(&WireMessage::CodeOk(hash))
                        }
                        Err(e) => {
                            self.send_error(&ep, RemoteErrorCode::HashMismatch, e.to_string());
                            Ok(())
                        }
                    }
                }
                WireMessage::Execute(_) => {
                    let received_before = ep.bytes_incoming() - msg.frame_size() as u64;
                    let WireMessage::Execute(body) = msg else { unreachable!() };
                    self.start_session(&ep, &mut active, body, received_before);
                    Ok(())
                }
                WireMessage::ObjectPush { guid, node_bytes } => {
                    self.ingest_push(&ep, &mut active, guid, &node_bytes);
                    Ok(())
                }
                other => {
                    let reason = format!("unexpected {:?} from client", other.kind());
                    self.abort(&ep, &mut active, reason);
                    Ok(())
                }
            };
            if let Err(e) = sent {
                log::warn!("send failed: {e}");
                break;
            }
        }
        if let Some(a) = active.take() {
            {
                let mut st = lock(&a.session.state);
                if !st.finished {
                    st.aborted.get_or_insert_with(|| "connection closed".into());
                }
            }
            drop(a.wake);
            a.join.join();
        }
    }

    /// Abandons the running session, if any, and reports a protocol error.
    fn abort(&self, ep: &Endpoint, active: &mut Option<Active>, reason: String) {
        log::warn!("aborting session: {reason}");
        if let Some(a) = active {
            let mut st = lock(&a.session.state);
            if !st.finished && st.aborted.is_none() {
                st.aborted = Some(reason.clone());
            }
            drop(st);
            let _ = a.wake.send(());
        }
        self.send_error(ep, RemoteErrorCode::Protocol, reason);
    }

    fn start_session(
        &self,
        ep: &Endpoint,
        active: &mut Option<Active>,
        body: ExecuteBody,
        received_before: u64,
    ) {
        if let Some(a) = active.take() {
            let st = lock(&a.session.state);
            let busy = !st.finished && st.aborted.is_none();
            let done = st.finished || a.join_ready();
            drop(st);
            if busy || !done {
                *active = Some(a);
                self.send_error(ep, RemoteErrorCode::Busy, "a task is already executing".into());
                return;
            }
            drop(a.wake);
            a.join.join();
        }

        let bundle_tasks = {
            let reg = lock(&self.registry);
            match reg.get(&body.code_hash) {
                Some(b) => bundle_tasks(b),
                None => {
                    drop(reg);
                    self.send_error(
                        ep,
                        RemoteErrorCode::CodeUnknown,
                        format!("code {} is not registered", body.code_hash),
                    );
                    return;
                }
            }
        };
        let impl_id = body.alternative_impl_id.unwrap_or(body.task_id);
        let Some(task) = self.catalog.get(&impl_id).filter(|_| bundle_tasks.contains(&impl_id)).cloned()
        else {
            self.send_error(ep, RemoteErrorCode::UnknownTask, format!("no implementation {impl_id}"));
            return;
        };

        let mut graph = match deserialize_graph(&body.state) {
            Ok(g) => g,
            Err(e) => {
                self.send_error(ep, RemoteErrorCode::Protocol, e.to_string());
                return;
            }
        };
        let missing = std::iter::once(&body.target_root)
            .chain(&body.param_roots)
            .chain(&body.static_roots)
            .find(|g| !graph.contains(g));
        if let Some(g) = missing {
            self.send_error(ep, RemoteErrorCode::Protocol, format!("root {g} not in state"));
            return;
        }

        let mut restores = 0;
        {
            let cache = lock(&self.cache);
            for node in graph.nodes.values_mut().filter(|n| n.is_in_cache) {
                match cache.lookup(&node.guid) {
                    Some(real) => {
                        *node = real;
                        restores += 1;
                    }
                    // unknown here: leave an ordinary proxy to be fetched
                    None => node.is_in_cache = false,
                }
            }
        }
        let pre_hashes = graph
            .nodes
            .values()
            .filter(|n| !n.is_proxy())
            .map(|n| (n.guid, content_hash(n)))
            .collect();
        {
            let mut s = lock(&self.stats);
            s.sessions += 1;
            s.cache_restores += restores;
        }

        let session = Arc::new(Session {
            state: Mutex::new(SessionState {
                graph,
                pre_hashes,
                pending_faults: BTreeSet::new(),
                hydrations: BTreeMap::new(),
                aborted: None,
                finished: false,
            }),
        });
        let clock = ep.clock().clone();
        let (wake_tx, wake_rx) = clock.channel::<()>();
        let exec = Executor {
            server: self.clone(),
            session: session.clone(),
            sender: ep.sender(),
            traffic: ep.traffic(),
            received_before,
            clock: clock.clone(),
            task,
            inv: Invocation {
                target: body.target_root,
                params: body.param_roots,
            },
            wake: wake_rx,
        };
        let join = clock.spawn("server-exec", move || exec.run());
        *active = Some(Active {
            session,
            wake: wake_tx,
            join,
        });
    }

    fn ingest_push(&self, ep: &Endpoint, active: &mut Option<Active>, guid: Guid, bytes: &[u8]) {
        let Some(a) = active.as_ref() else {
            lock(&self.stats).late_pushes += 1;
            return;
        };
        let mut st = lock(&a.session.state);
        if st.finished || st.aborted.is_some() {
            drop(st);
            lock(&self.stats).late_pushes += 1;
            return;
        }
        let is_proxy = match st.graph.get(&guid) {
            None => {
                drop(st);
                self.abort(ep, active, format!("push for {guid}, which is not in the session"));
                return;
            }
            Some(n) => n.is_proxy(),
        };
        if !is_proxy {
            drop(st);
            lock(&self.stats).duplicate_pushes += 1;
            return;
        }
        let before = st.graph.len();
        if let Err(e) = hydrate_proxy(&mut st.graph, guid, bytes) {
            drop(st);
            self.abort(ep, active, e.to_string());
            return;
        }
        let st = &mut *st;
        let h = content_hash(st.graph.get(&guid).expect("just hydrated"));
        st.pre_hashes.insert(guid, h);
        if st.graph.len() != before {
            for n in st.graph.nodes.values() {
                if !n.is_proxy() && !st.pre_hashes.contains_key(&n.guid) {
                    st.pre_hashes.insert(n.guid, content_hash(n));
                }
            }
        }
        st.pending_faults.remove(&guid);
        let count = st.hydrations.entry(guid).or_insert(0);
        *count += 1;
        let count = *count;
        {
            let mut s = lock(&self.stats);
            s.hydrations += 1;
            s.max_hydrations_per_node = s.max_hydrations_per_node.max(count);
        }
        let _ = a.wake.send(());
    }
}

impl Active {
    fn join_ready(&self) -> bool {
        match &self.join {
            Join::Virtual(j) => j.is_finished(),
            Join::Real(h) => h.is_finished(),
        }
    }
}

struct Executor {
    server: Server,
    session: Arc<Session>,
    sender: Sender,
    traffic: Traffic,
    received_before: u64,
    clock: Clock,
    task: TaskFn,
    inv: Invocation,
    wake: Rx<()>,
}

impl Executor {
    fn run(self) {
        let start = self.clock.now();
        let mut ctx = ServerCtx {
            exec: &self,
            meter: Meter::new(self.clock.clone(), self.server.config.speed),
            mint: GuidMint::default(),
        };
        let outcome = (self.task)(&mut ctx, &self.inv);
        let exec_nanos = ((self.clock.now() - start) * 1e9).round() as u64;

        let mut st = lock(&self.session.state);
        if let Some(reason) = &st.aborted {
            log::debug!("session aborted: {reason}");
            return;
        }
        let reply = match outcome {
            Ok(ret) => {
                let modified: Vec<ObjectNode> = st
                    .graph
                    .nodes
                    .values()
                    .filter(|n| !n.is_proxy() && st.pre_hashes.get(&n.guid) != Some(&content_hash(n)))
                    .cloned()
                    .collect();
                let mut cached = Vec::new();
                {
                    let mut cache = lock(&self.server.cache);
                    for n in st.graph.nodes.values().filter(|n| n.proxyable && !n.is_proxy()) {
                        cache.store(n);
                        cached.push(n.guid);
                    }
                }
                lock(&self.server.stats).results += 1;
                WireMessage::Result(ResultBody {
                    status: ResultStatus::Ok,
                    return_payload: ret,
                    modified_state: encode_nodes(&modified),
                    bytes_received: self.traffic.bytes_incoming() - self.received_before,
                    exec_nanos,
                    cached,
                })
            }
            Err(e) => {
                lock(&self.server.stats).remote_errors += 1;
                let code = match e {
                    TaskError::FetchTimeout(_) => RemoteErrorCode::FetchTimeout,
                    _ => RemoteErrorCode::TaskFailed,
                };
                WireMessage::RemoteError {
                    code,
                    message: e.to_string(),
                }
            }
        };
        st.finished = true;
        drop(st);
        if let Err(e) = self.sender.send(&reply) {
            log::warn!("could not deliver result: {e}");
        }
    }
}

struct ServerCtx<'a> {
    exec: &'a Executor,
    meter: Meter,
    mint: GuidMint,
}

impl ServerCtx<'_> {
    fn state(&self) -> MutexGuard<'_, SessionState> {
        lock(&self.exec.session.state)
    }
}

impl TaskContext for ServerCtx<'_> {
    fn get(&mut self, guid: Guid) -> std::result::Result<ObjectNode, TaskError> {
        let must_fetch = {
            let mut st = self.state();
            if let Some(r) = &st.aborted {
                return Err(TaskError::Aborted(r.clone()));
            }
            match st.graph.get(&guid) {
                None => return Err(TaskError::Missing(guid)),
                Some(n) if !n.is_proxy() => return Ok(n.clone()),
                Some(_) => st.pending_faults.insert(guid),
            }
        };
        if must_fetch {
            lock(&self.exec.server.stats).fetches_sent += 1;
            self.exec
                .sender
                .send(&WireMessage::ObjectFetch(guid))
                .map_err(|e| TaskError::Aborted(e.to_string()))?;
        }
        let deadline = self.exec.clock.now() + self.exec.server.config.fetch_timeout;
        loop {
            match self.exec.wake.recv_until(&self.exec.clock, deadline) {
                Ok(()) => {}
                Err(RecvError::Timeout) => return Err(TaskError::FetchTimeout(guid)),
                Err(RecvError::Disconnected) => {
                    return Err(TaskError::Aborted("connection closed".into()))
                }
            }
            let st = self.state();
            if let Some(r) = &st.aborted {
                return Err(TaskError::Aborted(r.clone()));
            }
            if let Some(n) = st.graph.get(&guid).filter(|n| !n.is_proxy()) {
                return Ok(n.clone());
            }
        }
    }

    fn put(&mut self, node: ObjectNode) -> std::result::Result<(), TaskError> {
        if node.is_proxy() {
            return Err(TaskError::BadInput(format!("cannot store proxy {}", node.guid)));
        }
        self.state().graph.insert(node);
        Ok(())
    }

    fn new_guid(&mut self) -> std::result::Result<Guid, TaskError> {
        let target = self.get(self.exec.inv.target)?;
        Ok(self.mint.next(&target))
    }

    fn charge(&mut self, work: f64) {
        self.meter.charge(work);
    }
}
