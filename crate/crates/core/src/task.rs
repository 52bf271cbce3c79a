//! Task bodies and the context through which they see the object graph.
//!
//! A task never touches an [`ObjectGraph`] directly. It reads and writes
//! nodes through a [`TaskContext`], which lets the server block on a proxy
//! until its contents arrive and lets the emulator charge compute time.

use std::sync::Arc;

use md5::{Digest as _, Md5};
use thiserror::Error;

use crate::clock::Clock;
use crate::object::{content_hash, Guid, ObjectGraph, ObjectNode};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("object {0} is not available")]
    Missing(Guid),
    #[error("timed out waiting for object {0}")]
    FetchTimeout(Guid),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("execution aborted: {0}")]
    Aborted(String),
}

/// The roots an invocation runs against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub target: Guid,
    pub params: Vec<Guid>,
}

pub trait TaskContext {
    /// A copy of the node, waiting for its contents if it is still a proxy.
    fn get(&mut self, guid: Guid) -> Result<ObjectNode, TaskError>;

    /// Inserts a new node or replaces an existing one.
    fn put(&mut self, node: ObjectNode) -> Result<(), TaskError>;

    /// A fresh identity for a node created by this invocation. The sequence
    /// is the same wherever the invocation runs.
    fn new_guid(&mut self) -> Result<Guid, TaskError>;

    /// Accounts for `work` units of computation.
    fn charge(&mut self, work: f64);
}

/// Task body: returns the opaque return payload.
pub type TaskFn =
    Arc<dyn Fn(&mut dyn TaskContext, &Invocation) -> Result<Vec<u8>, TaskError> + Send + Sync>;

/// Derives identities for created nodes from the target's content at first
/// use and a counter.
#[derive(Debug, Default)]
pub(crate) struct GuidMint {
    seed: Option<[u8; 16]>,
    counter: u64,
}

impl GuidMint {
    pub(crate) fn next(&mut self, target: &ObjectNode) -> Guid {
        let seed = *self.seed.get_or_insert_with(|| content_hash(target).0);
        let mut h = Md5::new();
        h.update(target.guid.0);
        h.update(seed);
        h.update(self.counter.to_be_bytes());
        self.counter += 1;
        Guid(h.finalize().into())
    }
}

/// Converts work units into emulated time. Under the wall clock the work
/// itself takes real time, so charging is free.
#[derive(Clone, Debug)]
pub struct Meter {
    clock: Clock,
    speed: f64,
    charged: f64,
}

impl Meter {
    pub fn new(clock: Clock, speed: f64) -> Meter {
        Meter {
            clock,
            speed,
            charged: 0.0,
        }
    }

    pub fn charge(&mut self, work: f64) {
        if work <= 0.0 {
            return;
        }
        self.charged += work;
        if self.clock.is_virtual() {
            self.clock.sleep(work / self.speed);
        }
    }

    /// Total work charged so far.
    pub fn charged(&self) -> f64 {
        self.charged
    }
}

/// Runs a task directly against an owned graph.
pub struct LocalCtx<'a> {
    graph: &'a mut ObjectGraph,
    target: Guid,
    mint: GuidMint,
    meter: Option<Meter>,
}

impl<'a> LocalCtx<'a> {
    pub fn new(graph: &'a mut ObjectGraph, target: Guid, meter: Option<Meter>) -> Self {
        LocalCtx {
            graph,
            target,
            mint: GuidMint::default(),
            meter,
        }
    }
}

impl TaskContext for LocalCtx<'_> {
    fn get(&mut self, guid: Guid) -> Result<ObjectNode, TaskError> {
        match self.graph.get(&guid) {
            Some(n) if !n.is_proxy() => Ok(n.clone()),
            _ => Err(TaskError::Missing(guid)),
        }
    }

    fn put(&mut self, node: ObjectNode) -> Result<(), TaskError> {
        if node.is_proxy() {
            return Err(TaskError::BadInput(format!("cannot store proxy {}", node.guid)));
        }
        self.graph.insert(node);
        Ok(())
    }

    fn new_guid(&mut self) -> Result<Guid, TaskError> {
        let target = self.get(self.target)?;
        Ok(self.mint.next(&target))
    }

    fn charge(&mut self, work: f64) {
        if let Some(m) = &mut self.meter {
            m.charge(work);
        }
    }
}

/// Runs `f` against `graph` with no emulated compute time.
pub fn run_local(f: &TaskFn, graph: &mut ObjectGraph, inv: &Invocation) -> Result<Vec<u8>, TaskError> {
    let mut ctx = LocalCtx::new(graph, inv.target, None);
    f(&mut ctx, inv)
}

const BUNDLE_MAGIC: &str = "offgrid-bundle 1";

/// A code bundle: the manifest of task implementations a client ships.
/// The bytes are hashed and cached by the server.
pub fn bundle_manifest(entries: &[(u32, &str)]) -> Vec<u8> {
    let mut s = String::from(BUNDLE_MAGIC);
    s.push('\n');
    for (id, name) in entries {
        s.push_str(&format!("task {id} {name}\n"));
    }
    s.into_bytes()
}

/// Task ids a bundle provides. An empty bundle provides none.
pub fn bundle_tasks(bundle: &[u8]) -> Vec<u32> {
    let Ok(text) = std::str::from_utf8(bundle) else {
        return Vec::new();
    };
    let mut lines = text.lines();
    if lines.next() != Some(BUNDLE_MAGIC) {
        return Vec::new();
    }
    lines
        .filter_map(|l| l.strip_prefix("task "))
        .filter_map(|l| l.split_whitespace().next()?.parse().ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mint_is_deterministic_and_distinct() {
        let t = ObjectNode::new(Guid::from_u128(1), 0, vec![1, 2], vec![]);
        let mut a = GuidMint::default();
        let mut b = GuidMint::default();
        let xs: Vec<_> = (0..4).map(|_| a.next(&t)).collect();
        let ys: Vec<_> = (0..4).map(|_| b.next(&t)).collect();
        assert_eq!(xs, ys);
        let mut sorted = xs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }

    #[test]
    fn mint_seed_fixed_at_first_use() {
        let t1 = ObjectNode::new(Guid::from_u128(1), 0, vec![1], vec![]);
        let t2 = ObjectNode::new(Guid::from_u128(1), 0, vec![2], vec![]);
        let mut a = GuidMint::default();
        a.next(&t1);
        let second = a.next(&t2);
        let mut b = GuidMint::default();
        b.next(&t1);
        assert_eq!(b.next(&t1), second);
    }

    #[test]
    fn bundle_round_trip() {
        let b = bundle_manifest(&[(3, "alpha"), (40, "beta")]);
        assert_eq!(bundle_tasks(&b), vec![3, 40]);
        assert!(bundle_tasks(b"").is_empty());
        assert!(bundle_tasks(b"garbage\ntask 1 x").is_empty());
    }

    #[test]
    fn local_ctx_reads_and_writes() {
        let mut g = ObjectGraph::new();
        let id = Guid::from_u128(9);
        g.insert(ObjectNode::new(id, 0, vec![5], vec![]));
        let f: TaskFn = Arc::new(|ctx, inv| {
            let mut n = ctx.get(inv.target)?;
            n.payload[0] += 1;
            let child = ObjectNode::new(ctx.new_guid()?, 1, vec![], vec![]);
            n.refs.push(child.guid);
            ctx.put(child)?;
            ctx.put(n)?;
            Ok(b"done".to_vec())
        });
        let out = run_local(&f, &mut g, &Invocation { target: id, params: vec![] }).unwrap();
        assert_eq!(out, b"done");
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(&id).unwrap().payload, vec![6]);
    }
}
