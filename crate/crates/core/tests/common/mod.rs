#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use offgrid_core::client::{ClientConfig, SpeedProfile, TaskDescriptor, TaskHints};
use offgrid_core::task::bundle_manifest;
use offgrid_core::{
    Clock, Guid, LinkConfig, ObjectGraph, ObjectNode, Server, ServerConfig, TaskError, TaskFn,
    Testbed,
};

pub const TOUCH_A: u32 = 1;
pub const TOUCH_ALL: u32 = 2;
pub const FIVE_WAY: u32 = 3;
pub const ALT_TOUCH_A: u32 = 100;

pub const X: Guid = Guid::from_u128(0x10);
pub const A: Guid = Guid::from_u128(0xa);
pub const B: Guid = Guid::from_u128(0xb);

pub const SPEEDS: SpeedProfile = SpeedProfile {
    local: 1e6,
    server: 1e7,
};

/// x references two proxyable children a and b of `size` bytes each.
pub fn xab(size: usize) -> ObjectGraph {
    let mut g = ObjectGraph::new();
    g.insert(ObjectNode::new(X, 1, b"root".to_vec(), vec![A, B]));
    g.insert(ObjectNode::new(A, 2, vec![1; size], vec![]).proxyable());
    g.insert(ObjectNode::new(B, 2, vec![2; size], vec![]).proxyable());
    g
}

fn bump(ctx: &mut dyn offgrid_core::TaskContext, g: Guid) -> Result<(), TaskError> {
    let mut n = ctx.get(g)?;
    n.payload[0] = n.payload[0].wrapping_add(1);
    ctx.put(n)
}

/// Works `head` units on x, then modifies a.
pub fn touch_a(head: f64) -> TaskFn {
    Arc::new(move |ctx, inv| {
        ctx.get(inv.target)?;
        ctx.charge(head);
        bump(ctx, A)?;
        Ok(b"a".to_vec())
    })
}

/// Modifies every child of the target in refs order, charging `per` units
/// before each.
pub fn touch_all(per: f64) -> TaskFn {
    Arc::new(move |ctx, inv| {
        let x = ctx.get(inv.target)?;
        for r in &x.refs {
            ctx.charge(per);
            bump(ctx, *r)?;
        }
        Ok(vec![x.refs.len() as u8])
    })
}

pub fn bundle() -> Vec<u8> {
    bundle_manifest(&[
        (TOUCH_A, "touch_a"),
        (TOUCH_ALL, "touch_all"),
        (FIVE_WAY, "five_way"),
        (ALT_TOUCH_A, "touch_a_alt"),
    ])
}

pub fn alt_touch_a() -> TaskFn {
    Arc::new(|ctx, _| {
        bump(ctx, A)?;
        bump(ctx, A)?;
        Ok(b"alt".to_vec())
    })
}

pub fn catalog(head: f64) -> BTreeMap<u32, TaskFn> {
    let mut m = BTreeMap::new();
    m.insert(TOUCH_A, touch_a(head));
    m.insert(TOUCH_ALL, touch_all(head));
    m.insert(ALT_TOUCH_A, alt_touch_a());
    m
}

pub fn server(head: f64) -> Server {
    Server::new(
        catalog(head),
        ServerConfig {
            speed: SPEEDS.server,
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn descriptors(head: f64) -> Vec<TaskDescriptor> {
    vec![
        TaskDescriptor::new(TOUCH_A, "touch_a", touch_a(head)).with_hints(move |_, _| TaskHints {
            compute: head,
            access_order: Some(vec![A]),
        }),
        TaskDescriptor::new(TOUCH_ALL, "touch_all", touch_all(head)).with_hints(move |g, inv| {
            let refs = g.get(&inv.target).map(|n| n.refs.clone()).unwrap_or_default();
            TaskHints {
                compute: head * refs.len() as f64,
                access_order: Some(refs),
            }
        }),
    ]
}

pub fn testbed(link: LinkConfig, head: f64, config: ClientConfig) -> Testbed {
    let mut tb = Testbed::new(Clock::virtual_time(), link, server(head), SPEEDS, config);
    for d in descriptors(head) {
        tb.client_mut().register_task(d).unwrap();
    }
    tb.client_mut().register_code(bundle()).unwrap();
    tb
}

pub fn link(rtt: f64, up: f64, down: f64) -> LinkConfig {
    LinkConfig::new("test", rtt, up, down).unwrap()
}
