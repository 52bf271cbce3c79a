use std::collections::{BTreeSet, VecDeque};

use md5::{Digest as _, Md5};
use offgrid_core::client::ClientCacheView;
use offgrid_core::object::{
    content_hash, decode_stream, deserialize_graph, encode_node_stream, hydrate_proxy,
    reachable_closure, serialize_graph,
};
use offgrid_core::wire::{
    self, ExecuteBody, RemoteErrorCode, ResultBody, ResultStatus, WireMessage,
};
use offgrid_core::{Digest, Guid, ObjectGraph, ObjectNode, ProxyPolicy, TransmissionStrategy};
use proptest::prelude::*;

fn guid() -> impl Strategy<Value = Guid> {
    any::<u128>().prop_map(Guid::from_u128)
}

fn digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 16]>().prop_map(Digest)
}

fn strategy() -> impl Strategy<Value = TransmissionStrategy> {
    prop_oneof![
        Just(TransmissionStrategy::Eager),
        Just(TransmissionStrategy::Lazy),
        Just(TransmissionStrategy::Pipelined),
    ]
}

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..max)
}

fn guids() -> impl Strategy<Value = Vec<Guid>> {
    prop::collection::vec(guid(), 0..4)
}

fn error_code() -> impl Strategy<Value = RemoteErrorCode> {
    use RemoteErrorCode::*;
    prop::sample::select(vec![
        CodeUnknown,
        UnknownTask,
        TaskFailed,
        Protocol,
        HashMismatch,
        Busy,
        FetchTimeout,
    ])
}

fn message() -> impl Strategy<Value = WireMessage> {
    let execute = (
        any::<u32>(),
        any::<Option<u32>>(),
        strategy(),
        digest(),
        guid(),
        guids(),
        guids(),
        bytes(200),
    )
        .prop_map(|(task_id, alternative_impl_id, strategy, code_hash, target_root, param_roots, static_roots, state)| {
            WireMessage::Execute(ExecuteBody {
                task_id,
                alternative_impl_id,
                strategy,
                code_hash,
                target_root,
                param_roots,
                static_roots,
                state,
            })
        });
    let result = (any::<bool>(), bytes(64), bytes(200), any::<u64>(), any::<u64>(), guids()).prop_map(
        |(ok, return_payload, modified_state, bytes_received, exec_nanos, cached)| {
            WireMessage::Result(ResultBody {
                status: if ok { ResultStatus::Ok } else { ResultStatus::Error },
                return_payload,
                modified_state,
                bytes_received,
                exec_nanos,
                cached,
            })
        },
    );
    prop_oneof![
        digest().prop_map(WireMessage::CodeCheck),
        digest().prop_map(WireMessage::CodeNeed),
        digest().prop_map(WireMessage::CodeOk),
        (digest(), bytes(300)).prop_map(|(hash, bundle)| WireMessage::CodeUpload { hash, bundle }),
        execute,
        guid().prop_map(WireMessage::ObjectFetch),
        (guid(), bytes(200)).prop_map(|(guid, node_bytes)| WireMessage::ObjectPush { guid, node_bytes }),
        result,
        (error_code(), ".{0,40}").prop_map(|(code, message)| WireMessage::RemoteError { code, message }),
        Just(WireMessage::Ping),
        Just(WireMessage::Pong),
        (0usize..2000).prop_map(|len| WireMessage::Probe { len }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn wire_round_trip(msg in message(), trailing in bytes(8)) {
        let mut frame = wire::encode(&msg).unwrap();
        prop_assert_eq!(frame.len(), msg.frame_size());
        let len = frame.len();
        frame.extend_from_slice(&trailing);
        let (back, used) = wire::decode(&frame).unwrap();
        prop_assert_eq!(used, len);
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn wire_prefixes_are_rejected(msg in message(), cut in any::<prop::sample::Index>()) {
        let frame = wire::encode(&msg).unwrap();
        let n = cut.index(frame.len());
        prop_assert!(wire::decode(&frame[..n]).is_err());
    }

    #[test]
    fn wire_garbage_never_panics(junk in bytes(64)) {
        let _ = wire::decode(&junk);
    }
}

/// A random graph over `n` nodes given as adjacency by index.
#[derive(Clone, Debug)]
struct Shape {
    nodes: Vec<(Vec<usize>, Vec<u8>, bool)>,
    roots: Vec<usize>,
}

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..=50).prop_flat_map(|n| {
        let node = (prop::collection::vec(0..n, 0..4), bytes(24), any::<bool>());
        (prop::collection::vec(node, n), prop::collection::vec(0..n, 1..3))
            .prop_map(|(nodes, roots)| Shape { nodes, roots })
    })
}

fn id(i: usize) -> Guid {
    Guid::from_u128(0x1000 + i as u128)
}

fn build(s: &Shape) -> ObjectGraph {
    let mut g = ObjectGraph::new();
    for (i, (refs, payload, proxyable)) in s.nodes.iter().enumerate() {
        let mut n = ObjectNode::new(id(i), i as u32 % 3, payload.clone(), refs.iter().map(|&r| id(r)).collect());
        n.proxyable = *proxyable;
        g.insert(n);
    }
    g
}

fn roots(s: &Shape) -> Vec<Guid> {
    s.roots.iter().map(|&r| id(r)).collect()
}

/// Reachability as the least fixpoint of "roots plus anything referenced".
fn fixpoint(s: &Shape) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = s.roots.iter().copied().collect();
    loop {
        let next: BTreeSet<usize> = set
            .iter()
            .flat_map(|&i| s.nodes[i].0.iter().copied())
            .chain(set.iter().copied())
            .collect();
        if next == set {
            return set;
        }
        set = next;
    }
}

fn bfs(s: &Shape) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut q: VecDeque<usize> = s.roots.iter().copied().collect();
    while let Some(i) = q.pop_front() {
        if seen.insert(i) {
            out.push(i);
            q.extend(s.nodes[i].0.iter().copied());
        }
    }
    out
}

/// The node encoding assembled by hand.
fn oracle_encoding(n: &ObjectNode, flags: u8) -> Vec<u8> {
    let mut v = n.guid.0.to_vec();
    v.extend(n.class_id.to_be_bytes());
    v.push(flags);
    v.extend((n.refs.len() as u32).to_be_bytes());
    for r in &n.refs {
        v.extend(r.0);
    }
    v.extend((n.payload.len() as u32).to_be_bytes());
    v.extend(&n.payload);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn closure_matches_fixpoint_and_bfs(s in shape()) {
        let g = build(&s);
        let got = reachable_closure(&g, &roots(&s)).unwrap();
        let as_set: BTreeSet<Guid> = got.iter().copied().collect();
        prop_assert_eq!(as_set.len(), got.len());
        let expected: BTreeSet<Guid> = fixpoint(&s).into_iter().map(id).collect();
        prop_assert_eq!(&as_set, &expected);
        prop_assert_eq!(got, bfs(&s).into_iter().map(id).collect::<Vec<_>>());
    }

    #[test]
    fn proxies_hydrate_back_to_the_original(s in shape(), mode in strategy()) {
        let g = build(&s);
        let r = roots(&s);
        let ser = serialize_graph(&g, &r, &ProxyPolicy::new(mode, false), &ClientCacheView::default()).unwrap();
        let mut remote = deserialize_graph(&ser.bytes).unwrap();
        for p in &ser.elided {
            hydrate_proxy(&mut remote, *p, &encode_node_stream(g.get(p).unwrap())).unwrap();
        }
        let closure = reachable_closure(&g, &r).unwrap();
        prop_assert_eq!(remote.canonical_hash(), g.restricted_to(&closure).canonical_hash());
    }

    #[test]
    fn proxy_flags_follow_the_rules(s in shape(), mode in strategy(), cache in any::<bool>()) {
        let g = build(&s);
        let mut view = ClientCacheView::default();
        // acknowledge every other node so both proxy kinds appear
        for n in g.nodes.values().step_by(2) {
            view.acknowledge(n.guid, content_hash(n));
        }
        let ser = serialize_graph(&g, &roots(&s), &ProxyPolicy::new(mode, cache), &view).unwrap();
        for n in decode_stream(&ser.bytes).unwrap() {
            let orig = g.get(&n.guid).unwrap();
            if n.empty_container {
                prop_assert!(orig.proxyable && n.proxyable);
                prop_assert!(n.payload.is_empty() && n.refs.is_empty());
                prop_assert_eq!(n.class_id, orig.class_id);
            } else {
                prop_assert_eq!(&n, orig);
            }
            if n.is_in_cache {
                prop_assert!(n.empty_container && cache);
            }
            if !orig.proxyable {
                prop_assert!(!n.empty_container);
            }
            if mode == TransmissionStrategy::Eager && !cache {
                prop_assert!(!n.empty_container);
            }
        }
    }

    #[test]
    fn encoding_and_hash_match_the_layout(s in shape()) {
        for n in build(&s).nodes.values() {
            let flags = if n.proxyable { 4 } else { 0 };
            prop_assert_eq!(n.encode(), oracle_encoding(n, flags));
            prop_assert_eq!(n.encoded_len(), n.encode().len());
            let want: [u8; 16] = Md5::digest(oracle_encoding(n, flags)).into();
            prop_assert_eq!(content_hash(n), Digest(want));
            // only the proxyable bit of the flags enters the digest
            let mut flagged = n.clone();
            flagged.empty_container = true;
            flagged.is_in_cache = true;
            prop_assert_eq!(content_hash(&flagged), content_hash(n));
        }
    }

    #[test]
    fn serialization_is_deterministic(s in shape()) {
        let a = build(&s);
        let mut b = ObjectGraph::new();
        for n in a.nodes.values().rev() {
            b.insert(n.clone());
        }
        prop_assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        let policy = ProxyPolicy::new(TransmissionStrategy::Lazy, false);
        let view = ClientCacheView::default();
        let x = serialize_graph(&a, &roots(&s), &policy, &view).unwrap();
        let y = serialize_graph(&b, &roots(&s), &policy, &view).unwrap();
        prop_assert_eq!(x, y);
    }
}
