//! Negamax over a synthetic game tree whose leaf values come from hashing
//! the seed with the path. Heavy compute over a one-node state.

use crate::splitmix::mix;

pub const BRANCHING: u64 = 8;

/// Positions visited by a full search of depth `depth`, root included.
pub fn nodes_visited(depth: u32) -> u64 {
    (0..=depth).map(|d| BRANCHING.pow(d)).sum()
}

/// Static evaluation of the position at `path`, from the side to move.
pub fn leaf_value(seed: u64, path: u64) -> i64 {
    (mix(seed ^ mix(path)) >> 48) as i64 - 32_768
}

/// Best score for the side to move at the root.
pub fn negamax(seed: u64, depth: u32) -> i64 {
    search(seed, 1, depth)
}

fn search(seed: u64, path: u64, depth: u32) -> i64 {
    if depth == 0 {
        return leaf_value(seed, path);
    }
    (0..BRANCHING)
        .map(|m| -search(seed, path * BRANCHING + m, depth - 1))
        .max()
        .expect("branching is positive")
}
