use std::collections::BTreeMap;

use crate::object::{content_hash, Digest, Guid, ObjectNode};

/// The client's record of which node versions the server's object cache
/// holds: GUID to the digest of the copy the server last acknowledged.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientCacheView {
    entries: BTreeMap<Guid, Digest>,
}

impl ClientCacheView {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when the server already holds exactly this version of `node`.
    pub fn should_elide(&self, node: &ObjectNode) -> bool {
        self.entries.get(&node.guid) == Some(&content_hash(node))
    }

    /// Records that the server now stores `digest` for `guid`.
    pub fn acknowledge(&mut self, guid: Guid, digest: Digest) {
        self.entries.insert(guid, digest);
    }

    pub fn get(&self, guid: &Guid) -> Option<&Digest> {
        self.entries.get(guid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Free-function form of [`ClientCacheView::should_elide`].
pub fn should_elide(node: &ObjectNode, cache: &ClientCacheView) -> bool {
    cache.should_elide(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elides_only_matching_digest() {
        let mut n = ObjectNode::new(Guid::from_u128(4), 1, vec![1, 2, 3], vec![]).proxyable();
        let mut c = ClientCacheView::new();
        assert!(!c.should_elide(&n));
        c.acknowledge(n.guid, content_hash(&n));
        assert!(should_elide(&n, &c));
        n.payload[0] = 9;
        assert!(!c.should_elide(&n));
    }
}
