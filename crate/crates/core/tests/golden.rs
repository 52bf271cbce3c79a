use std::path::PathBuf;

use offgrid_core::object::{serialize_graph, ProxyPolicy};
use offgrid_core::wire::{self, ExecuteBody, MessageKind, WireMessage};
use offgrid_core::{Digest, Guid, ObjectGraph, ObjectNode, TransmissionStrategy};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/wire/execute.bin")
}

fn sample() -> WireMessage {
    let root = Guid::from_u128(1);
    let blob = Guid::from_u128(2);
    let mut g = ObjectGraph::new();
    g.insert(ObjectNode::new(root, 7, b"hi".to_vec(), vec![blob]));
    g.insert(ObjectNode::new(blob, 8, vec![0xab; 3], vec![]).proxyable());
    let state = serialize_graph(
        &g,
        &[root],
        &ProxyPolicy::new(TransmissionStrategy::Lazy, false),
        &Default::default(),
    )
    .unwrap();
    WireMessage::Execute(ExecuteBody {
        task_id: 0x0102_0304,
        alternative_impl_id: None,
        strategy: TransmissionStrategy::Lazy,
        code_hash: Digest::of(b""),
        target_root: root,
        param_roots: vec![],
        static_roots: vec![],
        state: state.bytes,
    })
}

/// Set `OFFGRID_REGEN_FIXTURES=1` to rewrite the fixture after a deliberate
/// format change.
#[test]
fn execute_frame_matches_fixture() {
    let bytes = wire::encode(&sample()).unwrap();
    if std::env::var_os("OFFGRID_REGEN_FIXTURES").is_some() {
        std::fs::write(fixture(), &bytes).unwrap();
    }
    let golden = std::fs::read(fixture()).unwrap();
    assert_eq!(bytes, golden);
    assert_eq!(wire::decode(&golden).unwrap().0, sample());
}

#[test]
fn execute_fixture_layout() {
    let f = std::fs::read(fixture()).unwrap();
    let len = u32::from_be_bytes(f[0..4].try_into().unwrap()) as usize;
    assert_eq!(len + 4, f.len());
    assert_eq!(f[4], MessageKind::Execute as u8);
    assert_eq!(&f[5..9], &[1, 2, 3, 4]);
    assert_eq!(f[9], 0, "no alternative");
    assert_eq!(f[10], TransmissionStrategy::Lazy.code());
    assert_eq!(Digest(f[11..27].try_into().unwrap()).to_string(), "d41d8cd98f00b204e9800998ecf8427e");
    assert_eq!(&f[27..43], &Guid::from_u128(1).0);
    // empty param and static lists, then the state blob
    assert_eq!(&f[43..51], &[0; 8]);
    let state_len = u32::from_be_bytes(f[51..55].try_into().unwrap()) as usize;
    let state = &f[55..];
    assert_eq!(state.len(), state_len);
    assert_eq!(&state[..4], b"COG1");
    assert_eq!(&state[4..8], &[0, 0, 0, 2]);
    // root in full: 29 bytes overhead, one ref, two payload bytes
    let blob_at = 8 + 29 + 16 + 2;
    assert_eq!(state[8 + 20], 0, "root flags");
    // the proxyable child travels as a bare proxy
    let proxy = &state[blob_at..];
    assert_eq!(proxy.len(), 29);
    assert_eq!(&proxy[..16], &Guid::from_u128(2).0);
    assert_eq!(&proxy[16..20], &[0, 0, 0, 8]);
    assert_eq!(proxy[20], 0b101, "empty container, proxyable");
    assert_eq!(&proxy[21..29], &[0; 8]);
}
