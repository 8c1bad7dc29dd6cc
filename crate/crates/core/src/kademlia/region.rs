use rand::RngCore;

use crate::model::NodeId;

/// Keyspace region: all ids whose first `depth` bits equal `prefix`'s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    prefix: NodeId,
    depth: u32,
}

pub const MAX_REGION_DEPTH: u32 = 24;

/// `id` with every bit from position `bits` on set to `fill`.
pub(crate) fn with_suffix(id: &NodeId, bits: u32, fill: bool) -> NodeId {
    let mut out = *id;
    for i in bits as usize..256 {
        if out.bit(i) != fill {
            out = out.with_bit_flipped(i);
        }
    }
    out
}

impl Region {
    /// The depth-`depth` region containing `key`. Depth is clamped to
    /// [`MAX_REGION_DEPTH`].
    pub fn of(key: &NodeId, depth: u32) -> Self {
        let depth = depth.min(MAX_REGION_DEPTH);
        Region {
            prefix: with_suffix(key, depth, false),
            depth,
        }
    }

    pub fn prefix(&self) -> &NodeId {
        &self.prefix
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        id.shares_prefix(&self.prefix, self.depth)
    }

    /// Uniform random id inside the region.
    pub fn random_id<R: RngCore + ?Sized>(&self, rng: &mut R) -> NodeId {
        let r = NodeId::random(rng);
        let mut out = self.prefix;
        for i in self.depth as usize..256 {
            if r.bit(i) {
                out = out.with_bit_flipped(i);
            }
        }
        out
    }

    pub fn expected_occupancy(&self, nodes: usize) -> f64 {
        nodes as f64 / 2f64.powi(self.depth as i32)
    }
}
