use serde::{Deserialize, Serialize};

use crate::model::NodeId;
use crate::sim::NodeIdx;

pub const ID_BITS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRecord {
    pub node_id: NodeId,
    /// Simulator address; stands in for IP and port.
    pub addr: NodeIdx,
    pub last_seen_us: u64,
    pub subnet: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub bucket_capacity: usize,
    pub subnet_limit: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            bucket_capacity: 16,
            subnet_limit: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    OwnId,
    BucketFull,
    SubnetLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    /// Already present; moved to the most-recently-seen end.
    Refreshed,
    /// Bucket was full and its least-recently-seen record failed the ping.
    Evicted(NodeRecord),
    Rejected(RejectReason),
}

impl Admission {
    /// True when the admission decision required pinging a resident.
    pub fn pinged(&self) -> bool {
        matches!(self, Admission::Evicted(_) | Admission::Rejected(RejectReason::BucketFull))
    }
}

/// Index of the highest set bit of `a ^ b`, counted from the least
/// significant end (255 = ids differ in the first bit). `None` if equal.
pub fn bucket_index(a: &NodeId, b: &NodeId) -> Option<usize> {
    let lz = a.xor(b).leading_zeros() as usize;
    (lz < ID_BITS).then(|| ID_BITS - 1 - lz)
}

/// k-buckets keyed by XOR distance; each bucket is ordered from least to most
/// recently seen.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    owner: NodeId,
    config: RoutingConfig,
    buckets: Vec<Vec<NodeRecord>>,
}

impl RoutingTable {
    pub fn new(owner: NodeId, config: RoutingConfig) -> Self {
        RoutingTable {
            owner,
            config,
            buckets: vec![Vec::new(); ID_BITS],
        }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn bucket(&self, i: usize) -> &[NodeRecord] {
        &self.buckets[i]
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeRecord> {
        self.buckets.iter().flatten()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        bucket_index(&self.owner, id).is_some_and(|b| self.buckets[b].iter().any(|r| r.node_id == *id))
    }

    /// Admission with the subnet cap and the Kademlia eviction rule: a full
    /// bucket replaces its least-recently-seen record only if `is_reachable`
    /// says that record no longer answers.
    pub fn admit(&mut self, mut record: NodeRecord, now_us: u64, is_reachable: impl Fn(&NodeRecord) -> bool) -> Admission {
        let Some(b) = bucket_index(&self.owner, &record.node_id) else {
            return Admission::Rejected(RejectReason::OwnId);
        };
        let cap = self.config.bucket_capacity;
        let limit = self.config.subnet_limit;
        let bucket = &mut self.buckets[b];
        record.last_seen_us = now_us;
        if let Some(pos) = bucket.iter().position(|r| r.node_id == record.node_id) {
            bucket.remove(pos);
            bucket.push(record);
            return Admission::Refreshed;
        }
        if bucket.iter().filter(|r| r.subnet == record.subnet).count() >= limit {
            return Admission::Rejected(RejectReason::SubnetLimit);
        }
        if bucket.len() < cap {
            bucket.push(record);
            return Admission::Admitted;
        }
        let lru = bucket[0];
        if is_reachable(&lru) {
            bucket.remove(0);
            bucket.push(NodeRecord {
                last_seen_us: now_us,
                ..lru
            });
            Admission::Rejected(RejectReason::BucketFull)
        } else {
            bucket.remove(0);
            bucket.push(record);
            Admission::Evicted(lru)
        }
    }

    pub fn remove(&mut self, id: &NodeId) -> Option<NodeRecord> {
        let b = bucket_index(&self.owner, id)?;
        let pos = self.buckets[b].iter().position(|r| r.node_id == *id)?;
        Some(self.buckets[b].remove(pos))
    }

    /// Up to `n` known records closest to `target`, nearest first.
    pub fn closest(&self, target: &NodeId, n: usize) -> Vec<NodeRecord> {
        let mut all: Vec<(NodeId, NodeRecord)> = self.iter().map(|r| (r.node_id.xor(target), *r)).collect();
        if all.len() > n && n > 0 {
            all.select_nth_unstable_by(n - 1, |a, b| a.0.cmp(&b.0));
            all.truncate(n);
        }
        all.sort_unstable_by_key(|a| a.0);
        all.truncate(n);
        all.into_iter().map(|(_, r)| r).collect()
    }

    /// Every known record whose first `depth` bits equal those of `prefix`.
    pub fn in_region(&self, prefix: &NodeId, depth: u32) -> Vec<NodeRecord> {
        self.iter().filter(|r| r.node_id.shares_prefix(prefix, depth)).copied().collect()
    }

    /// Checks capacity, subnet and bucket-placement invariants.
    pub fn audit(&self) -> Result<(), String> {
        for (i, bucket) in self.buckets.iter().enumerate() {
            if bucket.len() > self.config.bucket_capacity {
                return Err(format!("bucket {i} holds {} records", bucket.len()));
            }
            for r in bucket {
                if bucket_index(&self.owner, &r.node_id) != Some(i) {
                    return Err(format!("record {:?} misplaced in bucket {i}", r.node_id));
                }
                let same = bucket.iter().filter(|o| o.subnet == r.subnet).count();
                if same > self.config.subnet_limit {
                    return Err(format!("bucket {i} holds {same} records from subnet {}", r.subnet));
                }
            }
        }
        Ok(())
    }

    /// Fraction of records for which `pred` holds, over the whole table.
    pub fn fraction(&self, pred: impl Fn(&NodeRecord) -> bool) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.iter().filter(|r| pred(r)).count() as f64 / n as f64
    }

    /// Largest per-bucket fraction of records for which `pred` holds.
    pub fn max_bucket_fraction(&self, pred: impl Fn(&NodeRecord) -> bool) -> f64 {
        self.buckets
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| b.iter().filter(|r| pred(r)).count() as f64 / self.config.bucket_capacity as f64)
            .fold(0.0, f64::max)
    }
}
