//! Attack models: data withholding, network split, DHT Sybils and eclipse
//! pressure, and gossip late defection.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erasure::BlobMatrix;
use crate::kademlia::{cell_key, pow_node_id_where, Behavior, NodeRecord, NodeSpec, Region, RoutingTable, MAX_POW_DIFFICULTY};
use crate::model::{BlobGeometry, CellCoordinate, DeterministicRng, Key, NodeId, NodeProfile, Role};
use crate::sampling::{withheld_count, SampleAssignment};
use crate::sim::NodeIdx;

/// Bytes of one unsolicited contact (a ping) a Sybil sends to its target.
pub const CONTACT_PING_BYTES: u64 = 100;

/// Sybil budget as a fraction of the honest population.
pub const DEFAULT_SYBIL_BUDGET: f64 = 0.2;

pub const DEFAULT_ATTEMPT_BUDGET: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("withholding fraction {0} is outside [0, 1]")]
    Fraction(String),
    #[error("{requested} Sybils exceed the budget of {max}")]
    OverBudget { requested: usize, max: usize },
    #[error("Sybil placement infeasible after {attempts} attempts")]
    Infeasible { attempts: u64 },
    #[error("pow_difficulty {0} exceeds {MAX_POW_DIFFICULTY}")]
    Difficulty(u32),
}

/// Which requesters a split-attack producer ignores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPredicate {
    EvenId,
    OddId,
    Nodes { nodes: Vec<NodeIdx> },
    Nobody,
}

impl SplitPredicate {
    /// `origin` is what the producer observes: the requester's id, or a
    /// pseudonym when requests go through the unlinkability proxy.
    pub fn matches(&self, origin: &NodeId, addr: Option<NodeIdx>) -> bool {
        match self {
            SplitPredicate::EvenId => origin.0[31] & 1 == 0,
            SplitPredicate::OddId => origin.0[31] & 1 == 1,
            SplitPredicate::Nodes { nodes } => addr.is_some_and(|a| nodes.contains(&a)),
            SplitPredicate::Nobody => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SybilPlacement {
    UniformIds,
    /// Closer to the key of copy 0 of cell `(row, col)` than every honest node.
    NearKey { row: u32, col: u32 },
    /// Inside the depth-`depth` region of that key.
    InRegion { row: u32, col: u32, depth: u32 },
}

impl SybilPlacement {
    pub fn target_key(&self, slot: u64) -> Option<Key> {
        match *self {
            SybilPlacement::UniformIds => None,
            SybilPlacement::NearKey { row, col } | SybilPlacement::InRegion { row, col, .. } => {
                Some(cell_key(slot, CellCoordinate::new(row, col), 0))
            }
        }
    }
}

fn default_subnets() -> u32 {
    1
}

fn default_attempt_budget() -> u64 {
    DEFAULT_ATTEMPT_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum AdversarySpec {
    #[default]
    None,
    WithholdFraction {
        f: f64,
    },
    /// Withholds exactly the cells sampled by the listed regular nodes.
    WithholdRegularTargets {
        nodes: Vec<NodeIdx>,
    },
    SplitByIdentity {
        predicate: SplitPredicate,
    },
    SybilDht {
        count: usize,
        placement: SybilPlacement,
        #[serde(default)]
        pow_difficulty: u32,
        /// Distinct subnet tags the Sybils are spread over.
        #[serde(default = "default_subnets")]
        subnets: u32,
        #[serde(default = "default_attempt_budget")]
        attempt_budget: u64,
    },
    /// A random `fraction` of validators behaves until `defect_slot`, then
    /// drops everything.
    LateDefection {
        defect_slot: u64,
        fraction: f64,
    },
}


impl AdversarySpec {
    pub fn validate(&self, honest_nodes: usize) -> Result<(), AdversaryError> {
        match self {
            AdversarySpec::WithholdFraction { f } | AdversarySpec::LateDefection { fraction: f, .. } => {
                if !(0.0..=1.0).contains(f) {
                    return Err(AdversaryError::Fraction(f.to_string()));
                }
            }
            AdversarySpec::SybilDht {
                count, pow_difficulty, ..
            } => {
                let max = (honest_nodes as f64 * DEFAULT_SYBIL_BUDGET).ceil() as usize;
                if *count > max {
                    return Err(AdversaryError::OverBudget { requested: *count, max });
                }
                if *pow_difficulty > MAX_POW_DIFFICULTY {
                    return Err(AdversaryError::Difficulty(*pow_difficulty));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// What the adversary does in one slot, as the strategies consume it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotAdversary {
    /// Cells the producer never serves or pushes.
    pub withheld: BTreeSet<CellCoordinate>,
    pub split: Option<SplitPredicate>,
    /// Nodes that silently drop everything this slot.
    pub defecting: BTreeSet<NodeIdx>,
    pub sybils: Vec<NodeSpec>,
    pub sybil_attempts: u64,
}

impl SlotAdversary {
    pub fn is_quiet(&self) -> bool {
        self.withheld.is_empty() && self.split.is_none() && self.defecting.is_empty() && self.sybils.is_empty()
    }
}

/// Uniformly random `ceil(f * N)`-cell subset the producer keeps back.
pub fn withheld_cells<R: RngCore + ?Sized>(
    geometry: &BlobGeometry,
    f: f64,
    rng: &mut R,
) -> Result<BTreeSet<CellCoordinate>, AdversaryError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(AdversaryError::Fraction(f.to_string()));
    }
    let total = geometry.total_cells();
    let w = withheld_count(f, total) as usize;
    Ok(index::sample(rng, total as usize, w)
        .into_iter()
        .map(|i| geometry.coordinate_at(i as u64).expect("index in range"))
        .collect())
}

/// The part of `blob` the producer releases when withholding a fraction `f`.
pub fn apply_withholding<R: RngCore + ?Sized>(blob: &BlobMatrix, f: f64, rng: &mut R) -> Result<BlobMatrix, AdversaryError> {
    let withheld = withheld_cells(blob.geometry(), f, rng)?;
    Ok(blob.filtered(|c| !withheld.contains(&c)))
}

/// Producer-side split filter: keeps the requests whose observed origin does
/// not match `predicate`.
pub fn apply_split<T>(requests: Vec<(NodeId, Option<NodeIdx>, T)>, predicate: &SplitPredicate) -> Vec<(NodeId, Option<NodeIdx>, T)> {
    requests
        .into_iter()
        .filter(|(id, addr, _)| !predicate.matches(id, *addr))
        .collect()
}

/// Late defectors: a fixed random `fraction` of validators, drawn once per
/// scenario.
pub fn late_defectors(nodes: &[NodeProfile], fraction: f64, seed: u64) -> BTreeSet<NodeIdx> {
    let validators: Vec<NodeIdx> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.role == Role::Validator)
        .map(|(i, _)| i as NodeIdx)
        .collect();
    let take = ((validators.len() as f64) * fraction).round() as usize;
    let mut rng = DeterministicRng::derive(seed, "late-defectors", &[]);
    index::sample(&mut rng, validators.len(), take.min(validators.len()))
        .into_iter()
        .map(|i| validators[i])
        .collect()
}

/// Builds the per-slot adversary view for `spec`.
pub fn plan_slot(
    spec: &AdversarySpec,
    slot: u64,
    geometry: &BlobGeometry,
    nodes: &[NodeProfile],
    assignments: &[Option<SampleAssignment>],
    seed: u64,
) -> Result<SlotAdversary, AdversaryError> {
    let mut plan = SlotAdversary::default();
    match spec {
        AdversarySpec::None => {}
        AdversarySpec::WithholdFraction { f } => {
            let mut rng = DeterministicRng::derive(seed, "withhold", &[slot]);
            plan.withheld = withheld_cells(geometry, *f, &mut rng)?;
        }
        AdversarySpec::WithholdRegularTargets { nodes: targets } => {
            for &t in targets {
                if let Some(Some(a)) = assignments.get(t as usize) {
                    plan.withheld.extend(a.cells.iter().copied());
                }
            }
        }
        AdversarySpec::SplitByIdentity { predicate } => plan.split = Some(predicate.clone()),
        AdversarySpec::SybilDht {
            count,
            placement,
            pow_difficulty,
            subnets,
            attempt_budget,
        } => {
            let honest: Vec<NodeId> = nodes.iter().map(|n| n.node_id).collect();
            let mut rng = DeterministicRng::derive(seed, "sybils", &[slot]);
            let set = spawn_sybils(
                &SybilRequest {
                    count: *count,
                    placement: *placement,
                    pow_difficulty: *pow_difficulty,
                    subnets: *subnets,
                    attempt_budget: *attempt_budget,
                    slot,
                },
                &honest,
                &mut rng,
            )?;
            plan.sybil_attempts = set.attempts;
            plan.sybils = set.specs;
        }
        AdversarySpec::LateDefection { defect_slot, fraction } => {
            if slot >= *defect_slot {
                plan.defecting = late_defectors(nodes, *fraction, seed);
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SybilRequest {
    pub count: usize,
    pub placement: SybilPlacement,
    pub pow_difficulty: u32,
    pub subnets: u32,
    pub attempt_budget: u64,
    pub slot: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SybilSet {
    pub specs: Vec<NodeSpec>,
    /// Hash evaluations spent over all Sybils.
    pub attempts: u64,
}

/// Subnet tags used for Sybils; chosen outside the range honest nodes get
/// from the scenario builder.
pub fn sybil_subnet(i: usize, subnets: u32) -> u32 {
    0x00ff_0000 | (i as u32 % subnets.max(1))
}

/// Grinds Sybil identities. Each must satisfy the PoW difficulty and, for
/// `NearKey`, be closer to the key than every honest node; for `InRegion`,
/// lie inside the region. Fails with the attempts made once the budget runs
/// out.
pub fn spawn_sybils<R: RngCore + ?Sized>(req: &SybilRequest, honest: &[NodeId], rng: &mut R) -> Result<SybilSet, AdversaryError> {
    if req.pow_difficulty > MAX_POW_DIFFICULTY {
        return Err(AdversaryError::Difficulty(req.pow_difficulty));
    }
    let key = req.placement.target_key(req.slot);
    let honest_best = key.and_then(|k| honest.iter().map(|h| h.xor(&k)).min());
    let mut specs = Vec::with_capacity(req.count);
    let mut attempts = 0u64;
    for i in 0..req.count {
        let budget = req.attempt_budget.saturating_sub(attempts);
        let found = match req.placement {
            SybilPlacement::UniformIds => pow_node_id_where(rng, req.pow_difficulty, budget, |_| true),
            SybilPlacement::NearKey { .. } => {
                let (k, best) = (key.expect("keyed placement"), honest_best);
                pow_node_id_where(rng, req.pow_difficulty, budget, |id| best.is_none_or(|b| id.xor(&k) < b))
            }
            SybilPlacement::InRegion { depth, .. } => {
                let region = Region::of(&key.expect("keyed placement"), depth);
                pow_node_id_where(rng, req.pow_difficulty, budget, |id| region.contains(id))
            }
        };
        match found {
            Ok(p) => {
                attempts += p.attempts;
                specs.push(NodeSpec {
                    node_id: p.node_id,
                    subnet: sybil_subnet(i, req.subnets),
                    behavior: Behavior::Sybil,
                });
            }
            Err(spent) => {
                return Err(AdversaryError::Infeasible {
                    attempts: attempts + spent,
                })
            }
        }
    }
    Ok(SybilSet { specs, attempts })
}

/// Expected hash evaluations per `NearKey` Sybil when the closest honest
/// node sits at XOR distance `best`: `2^d` for the PoW times `2^256 / best`.
pub fn expected_near_key_attempts(pow_difficulty: u32, best: &NodeId) -> f64 {
    let b = best.as_bytes();
    let top = b[..16].iter().fold(0f64, |acc, &x| acc * 256.0 + x as f64) / 2f64.powi(128);
    2f64.powi(pow_difficulty as i32) / top.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EclipseReport {
    /// Sybil share of the target's table after each slot.
    pub pollution: Vec<f64>,
    /// Highest Sybil count in any bucket divided by the bucket capacity.
    pub max_bucket_pollution: f64,
    pub attempts: u64,
    pub ping_bytes: u64,
}

/// Every Sybil contacts `table`'s owner `attempts_per_slot` times per slot.
/// Honest entries always answer the liveness ping, so Sybils only take free
/// slots, subject to the subnet cap.
pub fn eclipse_pressure<R: RngCore + ?Sized>(
    table: &mut RoutingTable,
    sybils: &[NodeRecord],
    attempts_per_slot: u32,
    slots: u32,
    rng: &mut R,
) -> EclipseReport {
    let sybil_ids: BTreeSet<NodeId> = sybils.iter().map(|s| s.node_id).collect();
    let is_sybil = |r: &NodeRecord| sybil_ids.contains(&r.node_id);
    let mut report = EclipseReport {
        pollution: Vec::with_capacity(slots as usize),
        max_bucket_pollution: 0.0,
        attempts: 0,
        ping_bytes: 0,
    };
    let cap = table.config().bucket_capacity as f64;
    for slot in 0..slots {
        for _ in 0..attempts_per_slot {
            for _ in 0..sybils.len() {
                let s = sybils[rng.gen_range(0..sybils.len())];
                report.attempts += 1;
                report.ping_bytes += CONTACT_PING_BYTES;
                table.admit(s, slot as u64, |r| !is_sybil(r));
            }
        }
        report.pollution.push(table.fraction(is_sybil));
        let worst = (0..crate::kademlia::ID_BITS)
            .map(|b| table.bucket(b).iter().filter(|r| is_sybil(r)).count())
            .max()
            .unwrap_or(0);
        report.max_bucket_pollution = report.max_bucket_pollution.max(worst as f64 / cap);
    }
    report
}
