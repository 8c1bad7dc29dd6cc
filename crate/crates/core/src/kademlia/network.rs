use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, RngCore};

use super::region::{with_suffix, Region};
use super::routing::{NodeRecord, RoutingConfig, RoutingTable, ID_BITS};
use crate::commitment::CellPayload;
use crate::model::{Key, NodeId};
use crate::sim::NodeIdx;

/// How a DHT node reacts to requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    Honest,
    /// Silently drops every request, including forwarded ones.
    Unresponsive,
    /// Answers lookups with other Sybils only, discards stores and serves
    /// forged cells.
    Sybil,
    /// Like `Sybil`, but answers lookups with fabricated records whose ids
    /// sit next to the target and whose addresses are Sybils.
    Hijacker,
}

impl Behavior {
    pub fn is_malicious(self) -> bool {
        matches!(self, Behavior::Sybil | Behavior::Hijacker)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub subnet: u32,
    pub behavior: Behavior,
}

#[derive(Debug, Clone)]
pub struct DhtNode {
    pub node_id: NodeId,
    pub subnet: u32,
    pub behavior: Behavior,
    pub table: RoutingTable,
    pub store: HashMap<Key, CellPayload>,
}

/// All DHT nodes of one simulation, indexed by simulator address.
#[derive(Debug, Clone)]
pub struct DhtNetwork {
    nodes: Vec<DhtNode>,
    config: RoutingConfig,
    sorted: Vec<(NodeId, NodeIdx)>,
    sybils: Vec<NodeIdx>,
}

impl DhtNetwork {
    pub fn new(specs: Vec<NodeSpec>, config: RoutingConfig) -> Self {
        let nodes: Vec<DhtNode> = specs
            .into_iter()
            .map(|s| DhtNode {
                node_id: s.node_id,
                subnet: s.subnet,
                behavior: s.behavior,
                table: RoutingTable::new(s.node_id, config),
                store: HashMap::new(),
            })
            .collect();
        let mut sorted: Vec<(NodeId, NodeIdx)> =
            nodes.iter().enumerate().map(|(i, n)| (n.node_id, i as NodeIdx)).collect();
        sorted.sort_unstable();
        let sybils = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.behavior.is_malicious())
            .map(|(i, _)| i as NodeIdx)
            .collect();
        DhtNetwork {
            nodes,
            config,
            sorted,
            sybils,
        }
    }

    /// `n` honest nodes with random ids, each on its own random subnet.
    pub fn random_honest<R: RngCore + ?Sized>(n: usize, rng: &mut R, config: RoutingConfig) -> Self {
        let specs = (0..n)
            .map(|_| NodeSpec {
                node_id: NodeId::random(rng),
                subnet: rng.next_u32(),
                behavior: Behavior::Honest,
            })
            .collect();
        DhtNetwork::new(specs, config)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn node(&self, i: NodeIdx) -> &DhtNode {
        &self.nodes[i as usize]
    }

    pub fn node_mut(&mut self, i: NodeIdx) -> &mut DhtNode {
        &mut self.nodes[i as usize]
    }

    pub fn nodes(&self) -> &[DhtNode] {
        &self.nodes
    }

    pub fn sybils(&self) -> &[NodeIdx] {
        &self.sybils
    }

    pub fn record(&self, i: NodeIdx) -> NodeRecord {
        let n = &self.nodes[i as usize];
        NodeRecord {
            node_id: n.node_id,
            addr: i,
            last_seen_us: 0,
            subnet: n.subnet,
        }
    }

    pub fn index_of(&self, id: &NodeId) -> Option<NodeIdx> {
        self.sorted
            .binary_search_by(|(x, _)| x.cmp(id))
            .ok()
            .map(|p| self.sorted[p].1)
    }

    fn range_of(&self, lo: &NodeId, hi: &NodeId) -> std::ops::Range<usize> {
        let a = self.sorted.partition_point(|(x, _)| x < lo);
        let b = self.sorted.partition_point(|(x, _)| x <= hi);
        a..b
    }

    /// Fills every routing table as if the network had run long enough for
    /// all buckets to be populated: each bucket gets random admissible
    /// members of the keyspace range it covers.
    pub fn bootstrap_converged<R: RngCore + ?Sized>(&mut self, rng: &mut R) {
        let cap = self.config.bucket_capacity;
        for u in 0..self.nodes.len() {
            let id = self.nodes[u].node_id;
            for shared in 0..ID_BITS as u32 {
                let own = self.range_of(&with_suffix(&id, shared + 1, false), &with_suffix(&id, shared + 1, true));
                let sibling = id.with_bit_flipped(shared as usize);
                let range = self.range_of(&with_suffix(&sibling, shared + 1, false), &with_suffix(&sibling, shared + 1, true));
                if !range.is_empty() {
                    let picks: Vec<usize> = if range.len() <= 4 * cap {
                        index::sample(rng, range.len(), range.len()).into_vec()
                    } else {
                        index::sample(rng, range.len(), 4 * cap).into_vec()
                    };
                    for p in picks {
                        let addr = self.sorted[range.start + p].1;
                        let record = self.record(addr);
                        self.nodes[u].table.admit(record, 0, |_| true);
                        if self.nodes[u].table.bucket(ID_BITS - 1 - shared as usize).len() >= cap {
                            break;
                        }
                    }
                }
                if own.len() <= 1 {
                    break;
                }
            }
        }
    }

    /// Ground truth: the `n` nodes closest to `target` over the whole network.
    pub fn true_closest(&self, target: &NodeId, n: usize, pred: impl Fn(&DhtNode) -> bool) -> Vec<NodeIdx> {
        let mut all: Vec<(NodeId, NodeIdx)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, node)| pred(node))
            .map(|(i, node)| (node.node_id.xor(target), i as NodeIdx))
            .collect();
        all.sort_unstable();
        all.truncate(n);
        all.into_iter().map(|(_, i)| i).collect()
    }

    pub fn members_of(&self, region: &Region) -> Vec<NodeIdx> {
        let r = self.range_of(
            &with_suffix(region.prefix(), region.depth(), false),
            &with_suffix(region.prefix(), region.depth(), true),
        );
        self.sorted[r].iter().map(|(_, i)| *i).collect()
    }

    /// Sybil records closest to `target`, as a Sybil would return them.
    pub fn sybil_closest(&self, target: &NodeId, n: usize) -> Vec<NodeRecord> {
        let mut s: Vec<(NodeId, NodeIdx)> = self
            .sybils
            .iter()
            .map(|&i| (self.nodes[i as usize].node_id.xor(target), i))
            .collect();
        s.sort_unstable();
        s.truncate(n);
        s.into_iter().map(|(_, i)| self.record(i)).collect()
    }

    /// Records with made-up ids that share at least 200 bits with `target`,
    /// pointing at random Sybil addresses.
    pub fn fabricated_records<R: RngCore + ?Sized>(&self, target: &NodeId, n: usize, rng: &mut R) -> Vec<NodeRecord> {
        if self.sybils.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let mut id = *target;
                for i in 200..ID_BITS {
                    if rng.gen::<bool>() {
                        id = id.with_bit_flipped(i);
                    }
                }
                NodeRecord {
                    node_id: id,
                    addr: self.sybils[rng.gen_range(0..self.sybils.len())],
                    last_seen_us: 0,
                    subnet: rng.next_u32(),
                }
            })
            .collect()
    }

    pub fn audit(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            n.table.audit().map_err(|e| format!("node {i}: {e}"))?;
        }
        Ok(())
    }
}
