//! Deterministic evaluation workloads, each a registered task over an
//! object graph built from a seed.
//!
//! | workload | state | work unit |
//! |----------|-------|-----------|
//! | `game_tree` | one node: seed, depth | positions searched |
//! | `linsolve` | one node: seed, n, k | floating-point operations |
//! | `blob_detect` | root over N proxyable blobs, plus a selection node | bytes hashed |
//! | `blob_detect_1ofN` | same graph, selection holds the last blob only | bytes hashed |
//! | `pi_machin` | one node: digit count | squared digit count |

pub mod blobs;
pub mod game_tree;
pub mod linsolve;
pub mod pi;
pub mod splitmix;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use offgrid_core::client::{TaskDescriptor, TaskHints};
use offgrid_core::task::bundle_manifest;
use offgrid_core::{Guid, Invocation, ObjectGraph, ObjectNode, TaskContext, TaskError, TaskFn};
use thiserror::Error;

use splitmix::SplitMix64;

pub const GAME_TREE_TASK: u32 = 10;
pub const LINSOLVE_TASK: u32 = 20;
pub const BLOB_TASK: u32 = 30;
pub const PI_TASK: u32 = 40;
/// Server-side pi implementation producing twice the requested digits.
pub const PI_DOUBLE_TASK: u32 = 41;

const CLASS_GAME: u32 = 0x6761_6d65;
const CLASS_LINSOLVE: u32 = 0x6c69_6e73;
const CLASS_BLOB_SET: u32 = 0x626c_7373;
const CLASS_BLOB: u32 = 0x626c_6f62;
const CLASS_SELECTION: u32 = 0x7365_6c65;
const CLASS_PI: u32 = 0x7069_0000;

pub const MAX_GAME_DEPTH: u32 = 9;
pub const MAX_LINSOLVE_N: u32 = 2048;
pub const MAX_PI_DIGITS: u32 = 1_000_000;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("invalid workload configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WorkloadName {
    GameTree,
    Linsolve,
    BlobDetect,
    BlobDetect1OfN,
    PiMachin,
}

impl WorkloadName {
    pub const ALL: [WorkloadName; 5] = [
        WorkloadName::GameTree,
        WorkloadName::Linsolve,
        WorkloadName::BlobDetect,
        WorkloadName::BlobDetect1OfN,
        WorkloadName::PiMachin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadName::GameTree => "game_tree",
            WorkloadName::Linsolve => "linsolve",
            WorkloadName::BlobDetect => "blob_detect",
            WorkloadName::BlobDetect1OfN => "blob_detect_1ofN",
            WorkloadName::PiMachin => "pi_machin",
        }
    }

    pub fn task_id(self) -> u32 {
        match self {
            WorkloadName::GameTree => GAME_TREE_TASK,
            WorkloadName::Linsolve => LINSOLVE_TASK,
            WorkloadName::BlobDetect | WorkloadName::BlobDetect1OfN => BLOB_TASK,
            WorkloadName::PiMachin => PI_TASK,
        }
    }
}

impl fmt::Display for WorkloadName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        WorkloadName::ALL
            .into_iter()
            .find(|w| w.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError(format!("unknown workload {s:?}")))
    }
}

/// Size knobs. Each workload reads only its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    GameTree { depth: u32 },
    Linsolve { n: u32, iterations: u32 },
    Blobs { count: u32, blob_bytes: u32, rounds: u32 },
    Pi { digits: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub name: WorkloadName,
    pub seed: u64,
    pub scale: Scale,
}

impl WorkloadSpec {
    pub fn game_tree(seed: u64, depth: u32) -> Self {
        WorkloadSpec {
            name: WorkloadName::GameTree,
            seed,
            scale: Scale::GameTree { depth },
        }
    }

    pub fn linsolve(seed: u64, n: u32, iterations: u32) -> Self {
        WorkloadSpec {
            name: WorkloadName::Linsolve,
            seed,
            scale: Scale::Linsolve { n, iterations },
        }
    }

    pub fn blob_detect(seed: u64, count: u32, blob_bytes: u32, rounds: u32) -> Self {
        WorkloadSpec {
            name: WorkloadName::BlobDetect,
            seed,
            scale: Scale::Blobs {
                count,
                blob_bytes,
                rounds,
            },
        }
    }

    pub fn blob_detect_1_of_n(seed: u64, count: u32, blob_bytes: u32, rounds: u32) -> Self {
        WorkloadSpec {
            name: WorkloadName::BlobDetect1OfN,
            ..Self::blob_detect(seed, count, blob_bytes, rounds)
        }
    }

    pub fn pi_machin(seed: u64, digits: u32) -> Self {
        WorkloadSpec {
            name: WorkloadName::PiMachin,
            seed,
            scale: Scale::Pi { digits },
        }
    }

    pub fn task_id(&self) -> u32 {
        self.name.task_id()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        match (self.name, self.scale) {
            (WorkloadName::GameTree, Scale::GameTree { depth }) => {
                if depth > MAX_GAME_DEPTH {
                    return bad(format!("depth {depth} exceeds {MAX_GAME_DEPTH}"));
                }
            }
            (WorkloadName::Linsolve, Scale::Linsolve { n, iterations }) => {
                if n == 0 || n > MAX_LINSOLVE_N {
                    return bad(format!("n must be in 1..={MAX_LINSOLVE_N}, got {n}"));
                }
                if iterations == 0 {
                    return bad("iterations must be positive".into());
                }
            }
            (WorkloadName::BlobDetect | WorkloadName::BlobDetect1OfN, Scale::Blobs { count, blob_bytes, rounds }) => {
                if count == 0 {
                    return bad("blob count must be positive".into());
                }
                if (blob_bytes as usize) <= blobs::SLOT {
                    return bad(format!("blobs must exceed {} bytes, got {blob_bytes}", blobs::SLOT));
                }
                if rounds == 0 {
                    return bad("rounds must be positive".into());
                }
            }
            (WorkloadName::PiMachin, Scale::Pi { digits }) => {
                if digits == 0 || digits > MAX_PI_DIGITS {
                    return bad(format!("digits must be in 1..={MAX_PI_DIGITS}, got {digits}"));
                }
            }
            (name, scale) => return bad(format!("{scale:?} does not apply to {name}")),
        }
        Ok(())
    }
}

/// A built workload: the graph and the roots to invoke on.
#[derive(Clone, Debug)]
pub struct Instance {
    pub graph: ObjectGraph,
    pub target: Guid,
    pub params: Vec<Guid>,
}

fn guid_stream(seed: u64, tag: u64) -> impl FnMut() -> Guid {
    let mut rng = SplitMix64::new(seed ^ tag);
    move || Guid::from_u128(((rng.next_u64() as u128) << 64) | rng.next_u64() as u128)
}

pub fn build_graph(spec: &WorkloadSpec) -> Result<Instance, ConfigError> {
    spec.validate()?;
    let mut next_guid = guid_stream(spec.seed, spec.task_id() as u64);
    let mut g = ObjectGraph::new();
    let root = next_guid();
    let mut params = Vec::new();
    match spec.scale {
        Scale::GameTree { depth } => {
            let mut p = spec.seed.to_be_bytes().to_vec();
            p.extend(depth.to_be_bytes());
            g.insert(ObjectNode::new(root, CLASS_GAME, p, vec![]));
        }
        Scale::Linsolve { n, iterations } => {
            let mut p = spec.seed.to_be_bytes().to_vec();
            p.extend(n.to_be_bytes());
            p.extend(iterations.to_be_bytes());
            g.insert(ObjectNode::new(root, CLASS_LINSOLVE, p, vec![]));
        }
        Scale::Blobs {
            count,
            blob_bytes,
            rounds,
        } => {
            let mut rng = SplitMix64::new(spec.seed);
            let mut kids = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let id = next_guid();
                let mut payload = vec![0u8; blob_bytes as usize];
                rng.fill(&mut payload[blobs::SLOT..]);
                g.insert(ObjectNode::new(id, CLASS_BLOB, payload, vec![]).proxyable());
                kids.push(id);
            }
            g.insert(ObjectNode::new(root, CLASS_BLOB_SET, spec.seed.to_be_bytes().to_vec(), kids));
            let selected: Vec<u32> = match spec.name {
                WorkloadName::BlobDetect1OfN => vec![count - 1],
                _ => (0..count).collect(),
            };
            let sel = next_guid();
            g.insert(ObjectNode::new(sel, CLASS_SELECTION, encode_selection(rounds, &selected), vec![]));
            params.push(sel);
        }
        Scale::Pi { digits } => {
            g.insert(ObjectNode::new(root, CLASS_PI, digits.to_be_bytes().to_vec(), vec![]));
        }
    }
    Ok(Instance {
        graph: g,
        target: root,
        params,
    })
}

fn encode_selection(rounds: u32, indexes: &[u32]) -> Vec<u8> {
    let mut p = rounds.to_be_bytes().to_vec();
    for i in indexes {
        p.extend(i.to_be_bytes());
    }
    p
}

fn decode_selection(payload: &[u8]) -> Result<(u32, Vec<u32>), TaskError> {
    if payload.len() < 4 || payload.len() % 4 != 0 {
        return Err(TaskError::BadInput("malformed selection node".into()));
    }
    let mut words = payload.chunks(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()));
    let rounds = words.next().unwrap();
    Ok((rounds, words.collect()))
}

fn field<const N: usize>(payload: &[u8], at: usize) -> Result<[u8; N], TaskError> {
    payload
        .get(at..at + N)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| TaskError::BadInput(format!("payload too short for field at {at}")))
}

fn u32_at(payload: &[u8], at: usize) -> Result<u32, TaskError> {
    field::<4>(payload, at).map(u32::from_be_bytes)
}

fn u64_at(payload: &[u8], at: usize) -> Result<u64, TaskError> {
    field::<8>(payload, at).map(u64::from_be_bytes)
}

fn game_tree_task(ctx: &mut dyn TaskContext, inv: &Invocation) -> Result<Vec<u8>, TaskError> {
    let node = ctx.get(inv.target)?;
    let seed = u64_at(&node.payload, 0)?;
    let depth = u32_at(&node.payload, 8)?;
    if depth > MAX_GAME_DEPTH {
        return Err(TaskError::BadInput(format!("depth {depth}")));
    }
    let score = game_tree::negamax(seed, depth);
    ctx.charge(game_tree::nodes_visited(depth) as f64);
    Ok(score.to_be_bytes().to_vec())
}

fn linsolve_task(ctx: &mut dyn TaskContext, inv: &Invocation) -> Result<Vec<u8>, TaskError> {
    let node = ctx.get(inv.target)?;
    let seed = u64_at(&node.payload, 0)?;
    let n = u32_at(&node.payload, 8)?;
    let k = u32_at(&node.payload, 12)?;
    if n == 0 || n > MAX_LINSOLVE_N || k == 0 {
        return Err(TaskError::BadInput(format!("n={n} k={k}")));
    }
    let residual = linsolve::run(seed, n as usize, k);
    let flops = linsolve::flops(n, k);
    ctx.charge(flops);
    let mut out = residual.to_be_bytes().to_vec();
    out.extend(flops.to_be_bytes());
    Ok(out)
}

fn blob_task(ctx: &mut dyn TaskContext, inv: &Invocation) -> Result<Vec<u8>, TaskError> {
    let sel_id = *inv
        .params
        .first()
        .ok_or_else(|| TaskError::BadInput("missing selection parameter".into()))?;
    let (rounds, indexes) = decode_selection(&ctx.get(sel_id)?.payload)?;
    let root = ctx.get(inv.target)?;
    for &i in &indexes {
        let id = *root
            .refs
            .get(i as usize)
            .ok_or_else(|| TaskError::BadInput(format!("blob index {i} out of range")))?;
        let mut blob = ctx.get(id)?;
        if blob.payload.len() <= blobs::SLOT {
            return Err(TaskError::BadInput(format!("blob {id} too short")));
        }
        ctx.charge(blobs::work(blob.payload.len() as u32, rounds));
        blobs::detect_in_place(&mut blob.payload, rounds);
        ctx.put(blob)?;
    }
    Ok((indexes.len() as u32).to_be_bytes().to_vec())
}

fn pi_task(multiplier: u32) -> TaskFn {
    Arc::new(move |ctx, inv| {
        let node = ctx.get(inv.target)?;
        let digits = u32_at(&node.payload, 0)?
            .checked_mul(multiplier)
            .filter(|d| (1..=2 * MAX_PI_DIGITS).contains(d))
            .ok_or_else(|| TaskError::BadInput("digit count out of range".into()))?;
        ctx.charge(pi::work(digits));
        Ok(pi::machin(digits).into_bytes())
    })
}

fn hints(g: &ObjectGraph, inv: &Invocation) -> TaskHints {
    let Some(root) = g.get(&inv.target) else {
        return TaskHints::default();
    };
    let p = &root.payload;
    let compute = match root.class_id {
        CLASS_GAME => u32_at(p, 8).map(|d| game_tree::nodes_visited(d.min(MAX_GAME_DEPTH)) as f64),
        CLASS_LINSOLVE => u32_at(p, 8).and_then(|n| Ok(linsolve::flops(n, u32_at(p, 12)?))),
        CLASS_PI => u32_at(p, 0).map(pi::work),
        CLASS_BLOB_SET => {
            // touched blobs depend on the selection, which only the task
            // body reads; the hint offers every blob in reference order
            let selection = inv
                .params
                .first()
                .and_then(|s| g.get(s))
                .and_then(|s| decode_selection(&s.payload).ok());
            let work = selection.map(|(rounds, idx)| {
                idx.iter()
                    .filter_map(|&i| root.refs.get(i as usize).and_then(|r| g.get(r)))
                    .map(|b| blobs::work(b.payload.len().max(blobs::SLOT + 1) as u32, rounds))
                    .sum()
            });
            return TaskHints {
                compute: work.unwrap_or(0.0),
                access_order: Some(root.refs.clone()),
            };
        }
        _ => Ok(0.0),
    };
    TaskHints {
        compute: compute.unwrap_or(0.0),
        access_order: None,
    }
}

/// Server-side implementations by task id.
pub fn catalog() -> BTreeMap<u32, TaskFn> {
    let mut m: BTreeMap<u32, TaskFn> = BTreeMap::new();
    m.insert(GAME_TREE_TASK, Arc::new(game_tree_task));
    m.insert(LINSOLVE_TASK, Arc::new(linsolve_task));
    m.insert(BLOB_TASK, Arc::new(blob_task));
    m.insert(PI_TASK, pi_task(1));
    m.insert(PI_DOUBLE_TASK, pi_task(2));
    m
}

/// Client-side registrations. With `pi_alternative`, remote pi runs use the
/// double-precision implementation.
pub fn descriptors(pi_alternative: bool) -> Vec<TaskDescriptor> {
    let cat = catalog();
    let mut pi = TaskDescriptor::new(PI_TASK, "pi_machin", cat[&PI_TASK].clone()).with_hints(hints);
    if pi_alternative {
        pi = pi.with_alternative(PI_DOUBLE_TASK);
    }
    vec![
        TaskDescriptor::new(GAME_TREE_TASK, "game_tree", cat[&GAME_TREE_TASK].clone()).with_hints(hints),
        TaskDescriptor::new(LINSOLVE_TASK, "linsolve", cat[&LINSOLVE_TASK].clone()).with_hints(hints),
        TaskDescriptor::new(BLOB_TASK, "blob_detect", cat[&BLOB_TASK].clone()).with_hints(hints),
        pi,
    ]
}

/// The code bundle a client ships for these workloads.
pub fn bundle() -> Vec<u8> {
    bundle_manifest(&[
        (GAME_TREE_TASK, "game_tree"),
        (LINSOLVE_TASK, "linsolve"),
        (BLOB_TASK, "blob_detect"),
        (PI_TASK, "pi_machin"),
        (PI_DOUBLE_TASK, "pi_machin_double"),
    ])
}

/// Estimated work units for one invocation of `spec`.
pub fn compute_hint(spec: &WorkloadSpec) -> Result<f64, ConfigError> {
    let inst = build_graph(spec)?;
    let inv = Invocation {
        target: inst.target,
        params: inst.params,
    };
    Ok(hints(&inst.graph, &inv).compute)
}

/// Human-readable rendering of a task's return payload.
pub fn describe_output(name: WorkloadName, ret: &[u8]) -> String {
    let word = |at: usize| ret.get(at..at + 8).map(|b| u64::from_be_bytes(b.try_into().unwrap()));
    match name {
        WorkloadName::GameTree => match word(0) {
            Some(v) => format!("best score {}", v as i64),
            None => "malformed score".into(),
        },
        WorkloadName::Linsolve => match (word(0), word(8)) {
            (Some(r), Some(f)) => format!("residual {:.3e}, {:.1} MFLOP", f64::from_bits(r), f64::from_bits(f) / 1e6),
            _ => "malformed result".into(),
        },
        WorkloadName::BlobDetect | WorkloadName::BlobDetect1OfN => match ret.get(..4) {
            Some(b) => format!("{} blobs processed", u32::from_be_bytes(b.try_into().unwrap())),
            None => "malformed count".into(),
        },
        WorkloadName::PiMachin => {
            let s = String::from_utf8_lossy(ret);
            let digits = s.len().saturating_sub(2);
            let head: String = s.chars().take(12).collect();
            format!("{digits} digits, {head}...")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use offgrid_core::task::run_local;

    fn invoke(spec: &WorkloadSpec) -> (Vec<u8>, ObjectGraph) {
        let mut inst = build_graph(spec).unwrap();
        let f = &catalog()[&spec.task_id()];
        let inv = Invocation {
            target: inst.target,
            params: inst.params.clone(),
        };
        let out = run_local(f, &mut inst.graph, &inv).unwrap();
        (out, inst.graph)
    }

    #[test]
    fn names_round_trip() {
        for w in WorkloadName::ALL {
            assert_eq!(w.as_str().parse::<WorkloadName>().unwrap(), w);
        }
        assert!("chess".parse::<WorkloadName>().is_err());
    }

    #[test]
    fn invalid_scales_are_rejected() {
        let cases = [
            WorkloadSpec::game_tree(0, MAX_GAME_DEPTH + 1),
            WorkloadSpec::linsolve(0, 0, 1),
            WorkloadSpec::linsolve(0, 4, 0),
            WorkloadSpec::blob_detect(0, 0, 100, 1),
            WorkloadSpec::blob_detect(0, 2, 16, 1),
            WorkloadSpec::blob_detect_1_of_n(0, 2, 100, 0),
            WorkloadSpec::pi_machin(0, 0),
            WorkloadSpec {
                name: WorkloadName::PiMachin,
                seed: 0,
                scale: Scale::GameTree { depth: 1 },
            },
        ];
        for c in cases {
            assert!(build_graph(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn game_tree_state_is_tiny() {
        let inst = build_graph(&WorkloadSpec::game_tree(99, 5)).unwrap();
        assert!(inst.graph.len() <= 3);
        assert!(inst.graph.canonical_bytes().len() < 1024);
    }

    #[test]
    fn blob_closure_size() {
        let inst = build_graph(&WorkloadSpec::blob_detect(1, 10, 150_000, 1)).unwrap();
        let bytes = inst.graph.canonical_bytes().len();
        assert!((1_500_000..1_502_000).contains(&bytes), "{bytes}");
    }

    #[test]
    fn one_of_n_selects_last_blob_only() {
        let spec = WorkloadSpec::blob_detect_1_of_n(4, 6, 64, 2);
        let before = build_graph(&spec).unwrap();
        let (ret, after) = invoke(&spec);
        assert_eq!(ret, 1u32.to_be_bytes());
        let root = before.graph.get(&before.target).unwrap();
        let changed: Vec<Guid> = after
            .nodes
            .values()
            .filter(|n| before.graph.get(&n.guid) != Some(n))
            .map(|n| n.guid)
            .collect();
        assert_eq!(changed, vec![root.refs[5]]);
    }

    #[test]
    fn hints_follow_scale() {
        let h = compute_hint(&WorkloadSpec::linsolve(0, 30, 10)).unwrap();
        assert_eq!(h, linsolve::flops(30, 10));
        let all = compute_hint(&WorkloadSpec::blob_detect(0, 4, 116, 3)).unwrap();
        let one = compute_hint(&WorkloadSpec::blob_detect_1_of_n(0, 4, 116, 3)).unwrap();
        assert_eq!(all, 4.0 * 300.0);
        assert_eq!(one, 300.0);
        assert_eq!(compute_hint(&WorkloadSpec::game_tree(0, 2)).unwrap(), 73.0);
    }

    #[test]
    fn outputs_render() {
        let (ret, _) = invoke(&WorkloadSpec::pi_machin(0, 20));
        assert_eq!(describe_output(WorkloadName::PiMachin, &ret), "20 digits, 3.1415926535...");
        let (ret, _) = invoke(&WorkloadSpec::blob_detect(0, 3, 40, 1));
        assert_eq!(describe_output(WorkloadName::BlobDetect, &ret), "3 blobs processed");
    }
}
