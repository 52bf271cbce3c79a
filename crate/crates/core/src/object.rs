//! Application state as a directed, possibly cyclic object graph.
//!
//! A task sees the state reachable from its target, its parameters and the
//! configured static roots. That closure is what travels to the server, with
//! proxyable nodes optionally replaced by identity-only proxies that are
//! hydrated later.
//!
//! Canonical node encoding (big-endian):
//!
//! ```text
//! guid(16) | class_id(4) | flags(1) | ref_count(4) | refs(16 * ref_count) | payload_len(4) | payload
//! ```
//!
//! Flags: bit0 = empty_container, bit1 = is_in_cache, bit2 = proxyable.
//! A graph stream is `"COG1" | node_count(4) | nodes`.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use md5::{Digest as _, Md5};

use crate::client::ClientCacheView;
use crate::codec::{put_u32, Reader};
use crate::error::{Error, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"COG1";

/// Encoded size of a node with no refs and no payload: 16 + 4 + 1 + 4 + 4.
pub const PROXY_OVERHEAD: usize = 29;

const FLAG_EMPTY_CONTAINER: u8 = 0b001;
const FLAG_IN_CACHE: u8 = 0b010;
const FLAG_PROXYABLE: u8 = 0b100;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Guid(pub [u8; 16]);

impl Guid {
    pub const fn from_u128(v: u128) -> Self {
        Guid(v.to_be_bytes())
    }

    pub fn as_u128(&self) -> u128 {
        u128::from_be_bytes(self.0)
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({self})")
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// A 16-byte MD5 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 16]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Md5::digest(bytes).into())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransmissionStrategy {
    Eager,
    Lazy,
    Pipelined,
}

impl TransmissionStrategy {
    pub const ALL: [TransmissionStrategy; 3] = [Self::Eager, Self::Lazy, Self::Pipelined];

    pub fn code(self) -> u8 {
        match self {
            Self::Eager => 1,
            Self::Lazy => 2,
            Self::Pipelined => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::Eager),
            2 => Some(Self::Lazy),
            3 => Some(Self::Pipelined),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Eager => "eager",
            Self::Lazy => "lazy",
            Self::Pipelined => "pipelined",
        }
    }
}

impl fmt::Display for TransmissionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectNode {
    pub guid: Guid,
    pub class_id: u32,
    pub payload: Vec<u8>,
    pub refs: Vec<Guid>,
    /// The node's class opted into proxying.
    pub proxyable: bool,
    /// The real contents are not present; this node is a placeholder.
    pub empty_container: bool,
    /// The placeholder can be filled from the receiver's object cache.
    pub is_in_cache: bool,
}

impl ObjectNode {
    pub fn new(guid: Guid, class_id: u32, payload: Vec<u8>, refs: Vec<Guid>) -> Self {
        ObjectNode {
            guid,
            class_id,
            payload,
            refs,
            proxyable: false,
            empty_container: false,
            is_in_cache: false,
        }
    }

    pub fn proxyable(mut self) -> Self {
        self.proxyable = true;
        self
    }

    pub fn is_proxy(&self) -> bool {
        self.empty_container
    }

    /// An identity-only placeholder for this node.
    pub fn to_proxy(&self, in_cache: bool) -> ObjectNode {
        ObjectNode {
            guid: self.guid,
            class_id: self.class_id,
            payload: Vec::new(),
            refs: Vec::new(),
            proxyable: true,
            empty_container: true,
            is_in_cache: in_cache,
        }
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.empty_container {
            f |= FLAG_EMPTY_CONTAINER;
        }
        if self.is_in_cache {
            f |= FLAG_IN_CACHE;
        }
        if self.proxyable {
            f |= FLAG_PROXYABLE;
        }
        f
    }

    pub fn encoded_len(&self) -> usize {
        PROXY_OVERHEAD + 16 * self.refs.len() + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        self.encode_with_flags(self.flags(), out);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    fn encode_with_flags(&self, flags: u8, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.guid.0);
        put_u32(out, self.class_id);
        out.push(flags);
        put_u32(out, self.refs.len() as u32);
        for r in &self.refs {
            out.extend_from_slice(&r.0);
        }
        put_u32(out, self.payload.len() as u32);
        out.extend_from_slice(&self.payload);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<ObjectNode> {
        let start = r.offset();
        let guid = r.guid("node guid")?;
        let class_id = r.u32("node class id")?;
        let flags = r.u8("node flags")?;
        if flags & !(FLAG_EMPTY_CONTAINER | FLAG_IN_CACHE | FLAG_PROXYABLE) != 0 {
            return Err(Error::protocol(start + 20, format!("unknown flag bits {flags:#04x}")));
        }
        let refs = r.guid_list("node refs")?;
        let payload = r.blob("node payload")?.to_vec();
        let node = ObjectNode {
            guid,
            class_id,
            payload,
            refs,
            proxyable: flags & FLAG_PROXYABLE != 0,
            empty_container: flags & FLAG_EMPTY_CONTAINER != 0,
            is_in_cache: flags & FLAG_IN_CACHE != 0,
        };
        node.check_flags().map_err(|reason| Error::protocol(start, reason))?;
        Ok(node)
    }

    fn check_flags(&self) -> std::result::Result<(), String> {
        if self.empty_container && (!self.payload.is_empty() || !self.refs.is_empty()) {
            return Err(format!("proxy {} carries contents", self.guid));
        }
        if self.is_in_cache && !self.empty_container {
            return Err(format!("node {} is_in_cache without empty_container", self.guid));
        }
        if self.empty_container && !self.proxyable {
            return Err(format!("node {} is a proxy of a non-proxyable class", self.guid));
        }
        Ok(())
    }
}

/// MD5 over the canonical node encoding with the flags byte reduced to the
/// proxyable bit, so the digest is independent of proxy state.
pub fn content_hash(node: &ObjectNode) -> Digest {
    let mut buf = Vec::with_capacity(node.encoded_len());
    let flags = if node.proxyable { FLAG_PROXYABLE } else { 0 };
    node.encode_with_flags(flags, &mut buf);
    Digest::of(&buf)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObjectGraph {
    pub nodes: BTreeMap<Guid, ObjectNode>,
    /// Named static roots that are shipped with every offload that lists them.
    pub statics: BTreeMap<String, Guid>,
}

impl ObjectGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: ObjectNode) -> Option<ObjectNode> {
        self.nodes.insert(node.guid, node)
    }

    pub fn get(&self, guid: &Guid) -> Option<&ObjectNode> {
        self.nodes.get(guid)
    }

    pub fn get_mut(&mut self, guid: &Guid) -> Option<&mut ObjectNode> {
        self.nodes.get_mut(guid)
    }

    pub fn contains(&self, guid: &Guid) -> bool {
        self.nodes.contains_key(guid)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, guid: &Guid) -> Result<&ObjectNode> {
        self.nodes.get(guid).ok_or(Error::UnknownObject(*guid))
    }

    /// All nodes in GUID order, as a graph stream. Two graphs are equal in
    /// content exactly when these bytes are equal.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        encode_stream(self.nodes.values())
    }

    pub fn canonical_hash(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    /// The subgraph holding only `guids`, for comparing closures.
    pub fn restricted_to<'a>(&self, guids: impl IntoIterator<Item = &'a Guid>) -> ObjectGraph {
        let mut out = ObjectGraph::new();
        for g in guids {
            if let Some(n) = self.nodes.get(g) {
                out.insert(n.clone());
            }
        }
        out
    }
}

fn encode_stream<'a>(nodes: impl ExactSizeIterator<Item = &'a ObjectNode>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GRAPH_MAGIC);
    put_u32(&mut out, nodes.len() as u32);
    for n in nodes {
        n.encode_into(&mut out);
    }
    out
}

/// Transitive closure of `roots` over refs in BFS order: roots first in the
/// given order, then neighbours in refs order, first visit wins.
///
/// Proxies have no refs, so on a receiving graph the walk stops at them.
pub fn reachable_closure(graph: &ObjectGraph, roots: &[Guid]) -> Result<Vec<Guid>> {
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    for r in roots {
        if !graph.contains(r) {
            return Err(Error::UnknownObject(*r));
        }
        if seen.insert(*r) {
            queue.push_back(*r);
        }
    }
    while let Some(g) = queue.pop_front() {
        order.push(g);
        let node = graph.node(&g)?;
        for r in &node.refs {
            if !graph.contains(r) {
                return Err(Error::UnknownObject(*r));
            }
            if seen.insert(*r) {
                queue.push_back(*r);
            }
        }
    }
    Ok(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProxyPolicy {
    pub mode: TransmissionStrategy,
    pub cache_enabled: bool,
}

impl ProxyPolicy {
    pub fn new(mode: TransmissionStrategy, cache_enabled: bool) -> Self {
        ProxyPolicy {
            mode,
            cache_enabled,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SerializedGraph {
    pub bytes: Vec<u8>,
    /// Every GUID emitted as a proxy, in closure order.
    pub elided: Vec<Guid>,
    /// The subset of `elided` replaced because the server cache holds an
    /// identical copy.
    pub cache_hits: Vec<Guid>,
}

impl SerializedGraph {
    /// Proxies the server must obtain from the client (not from its cache).
    pub fn strategy_elided(&self) -> Vec<Guid> {
        let hits: HashSet<_> = self.cache_hits.iter().collect();
        self.elided.iter().filter(|g| !hits.contains(g)).copied().collect()
    }
}

/// Encodes the closure of `roots`, substituting proxies according to `policy`.
/// Cache substitution takes precedence over strategy proxying because the
/// server can resolve it without a round trip.
pub fn serialize_graph(
    graph: &ObjectGraph,
    roots: &[Guid],
    policy: &ProxyPolicy,
    cache: &ClientCacheView,
) -> Result<SerializedGraph> {
    let order = reachable_closure(graph, roots)?;
    let mut out = Vec::new();
    out.extend_from_slice(GRAPH_MAGIC);
    put_u32(&mut out, order.len() as u32);
    let mut elided = Vec::new();
    let mut cache_hits = Vec::new();
    for g in &order {
        let node = graph.node(g)?;
        if node.is_proxy() {
            return Err(Error::IllegalState(format!(
                "cannot serialize unhydrated proxy {g}"
            )));
        }
        if policy.cache_enabled && node.proxyable && cache.should_elide(node) {
            node.to_proxy(true).encode_into(&mut out);
            elided.push(*g);
            cache_hits.push(*g);
        } else if policy.mode != TransmissionStrategy::Eager && node.proxyable {
            node.to_proxy(false).encode_into(&mut out);
            elided.push(*g);
        } else {
            node.encode_into(&mut out);
        }
    }
    Ok(SerializedGraph {
        bytes: out,
        elided,
        cache_hits,
    })
}

/// Nodes of a graph stream in stream order.
pub fn decode_stream(bytes: &[u8]) -> Result<Vec<ObjectNode>> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4, "graph magic")?;
    if magic != GRAPH_MAGIC {
        return Err(Error::protocol(0, "bad graph magic"));
    }
    let count = r.u32("node count")? as usize;
    if count.saturating_mul(PROXY_OVERHEAD) > r.remaining() {
        return Err(Error::protocol(4, format!("node count {count} exceeds input")));
    }
    let mut seen = HashSet::with_capacity(count);
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let node = ObjectNode::decode(&mut r)?;
        if !seen.insert(node.guid) {
            return Err(Error::protocol(at, format!("duplicate guid {}", node.guid)));
        }
        nodes.push(node);
    }
    if !r.is_empty() {
        return Err(Error::protocol(r.offset(), "trailing bytes after graph stream"));
    }
    Ok(nodes)
}

pub fn deserialize_graph(bytes: &[u8]) -> Result<ObjectGraph> {
    let mut graph = ObjectGraph::new();
    for n in decode_stream(bytes)? {
        graph.insert(n);
    }
    Ok(graph)
}

/// Encodes a single node as a graph stream, the body of a push or fetch reply.
pub fn encode_node_stream(node: &ObjectNode) -> Vec<u8> {
    encode_stream(std::iter::once(node))
}

/// Fills the proxy `guid` with the real node decoded from `node_bytes`
/// (a graph stream whose first node is the real object). Further nodes in
/// the stream are inserted when absent.
pub fn hydrate_proxy(graph: &mut ObjectGraph, guid: Guid, node_bytes: &[u8]) -> Result<()> {
    let mut nodes = decode_stream(node_bytes)?.into_iter();
    let real = nodes
        .next()
        .ok_or_else(|| Error::protocol(4, "empty hydration stream"))?;
    if real.guid != guid {
        return Err(Error::protocol(
            8,
            format!("hydration for {guid} carries node {}", real.guid),
        ));
    }
    if real.is_proxy() {
        return Err(Error::protocol(8, format!("hydration for {guid} carries a proxy")));
    }
    let slot = graph.get_mut(&guid).ok_or(Error::UnknownObject(guid))?;
    if !slot.is_proxy() {
        return Err(Error::IllegalState(format!("node {guid} is not a proxy")));
    }
    *slot = real;
    for extra in nodes {
        if extra.is_proxy() {
            return Err(Error::protocol(0, format!("hydration stream carries proxy {}", extra.guid)));
        }
        graph.nodes.entry(extra.guid).or_insert(extra);
    }
    Ok(())
}

/// Overwrites local nodes with the server's returned state and inserts new
/// ones. Nodes absent from the return are left alone.
pub fn apply_result_state(local: &mut ObjectGraph, returned: &[u8]) -> Result<()> {
    let nodes = decode_stream(returned)?;
    if let Some(p) = nodes.iter().find(|n| n.is_proxy()) {
        return Err(Error::protocol(0, format!("returned state contains proxy {}", p.guid)));
    }
    for n in nodes {
        local.insert(n);
    }
    Ok(())
}

/// Encodes a set of nodes (in the given order) as a graph stream.
pub fn encode_nodes(nodes: &[ObjectNode]) -> Vec<u8> {
    encode_stream(nodes.iter())
}
