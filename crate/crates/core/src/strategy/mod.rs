//! Dissemination strategies. Each one takes the same slot input (nodes,
//! assignments, adversary view) and returns the same [`StrategyOutcome`].

mod centralized;
mod dht;
mod gossip;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use centralized::{run_centralized, REQUEST_BASE_BYTES, REQUEST_CELL_BYTES};
pub use dht::{default_region_depth, run_dht, DhtConfig};
pub use gossip::{
    build_meshes, build_overlay, run_gossip, select_peers_stake_preferred, subgraph_connected, subscriptions, topic_count, update_peer_score,
    GossipConfig, GossipState, PeerScore, ScoreEvent, TopicId, TopicMesh, CONTROL_BYTES, TOPIC_ENTRY_BYTES,
};

use crate::adversary::SlotAdversary;
use crate::model::{BlobGeometry, CellCoordinate, NodeProfile, Role, SlotParameters};
use crate::sampling::{evaluate, Line, SampleAssignment, SampleMode, SamplingVerdict};
use crate::sim::{BandwidthBudget, LatencyModel, MessageClass, NodeIdx, TrafficLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Centralized,
    GossipMesh,
    DhtCache,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Centralized, StrategyKind::GossipMesh, StrategyKind::DhtCache];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Centralized => "centralized",
            StrategyKind::GossipMesh => "gossip_mesh",
            StrategyKind::DhtCache => "dht_cache",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centralized" => Some(StrategyKind::Centralized),
            "gossip" | "gossip_mesh" => Some(StrategyKind::GossipMesh),
            "dht" | "dht_cache" => Some(StrategyKind::DhtCache),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("invalid strategy setting `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("node {0} has no profile")]
    UnknownNode(NodeIdx),
    #[error("simulation error: {0}")]
    Sim(String),
}

fn default_proxy_delay_ms() -> u64 {
    200
}

fn default_seed_copies() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub unlinkability_proxy: bool,
    #[serde(default = "default_proxy_delay_ms")]
    pub proxy_delay_ms: u64,
    /// Copies of each cell the producer pushes (gossip) or stores (DHT).
    #[serde(default = "default_seed_copies")]
    pub seed_copies: u32,
    #[serde(default)]
    pub gossip: GossipConfig,
    #[serde(default)]
    pub dht: DhtConfig,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            unlinkability_proxy: false,
            proxy_delay_ms: default_proxy_delay_ms(),
            seed_copies: 1,
            gossip: GossipConfig::default(),
            dht: DhtConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.seed_copies == 0 {
            return Err(StrategyError::Invalid {
                field: "seed_copies",
                reason: "must be at least 1".into(),
            });
        }
        self.gossip.validate()?;
        self.dht.validate()
    }
}

/// Everything a strategy needs to run one slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotInput<'a> {
    pub slot: u64,
    pub seed: u64,
    pub geometry: BlobGeometry,
    pub params: SlotParameters,
    pub nodes: &'a [NodeProfile],
    pub producer: NodeIdx,
    /// Indexed by node; `None` for nodes that do not sample.
    pub assignments: &'a [Option<SampleAssignment>],
    pub latency: &'a LatencyModel,
    pub bandwidth: &'a [(NodeIdx, BandwidthBudget)],
    pub adversary: &'a SlotAdversary,
}

impl SlotInput<'_> {
    pub fn deadline_us(&self, role: Role) -> u64 {
        match role {
            Role::Validator => self.params.validator_deadline_us(),
            _ => self.params.regular_deadline_us(),
        }
    }

    pub(crate) fn sampling_nodes(&self) -> impl Iterator<Item = (NodeIdx, &SampleAssignment)> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|a| (i as NodeIdx, a)))
    }

    /// Header bytes: one 48 B commitment per extended row plus a fixed part.
    pub fn header_bytes(&self) -> u64 {
        HEADER_BASE_BYTES + self.geometry.proof_bytes as u64 * self.geometry.extended_rows() as u64
    }
}

pub const HEADER_BASE_BYTES: u64 = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeResult {
    pub node: NodeIdx,
    pub role: Role,
    pub verdict: SamplingVerdict,
    /// When the success condition first held, if it did before slot end.
    pub completion_us: Option<u64>,
    /// Assigned cells not received before slot end.
    pub missing: Vec<CellCoordinate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub slot: u64,
    pub kind: StrategyKind,
    pub producer: NodeIdx,
    pub ledger: TrafficLedger,
    pub results: Vec<NodeResult>,
    /// Strategy-specific counters (topic counts, lookup stats, ...).
    pub stats: BTreeMap<String, f64>,
    pub trace_hash: u64,
}

impl StrategyOutcome {
    pub fn cell_bytes(&self) -> u64 {
        self.ledger.global().class(MessageClass::CellTransfer).bytes_sent
    }

    pub fn producer_cell_egress(&self) -> u64 {
        self.ledger.node(self.producer).class(MessageClass::CellTransfer).bytes_sent
    }

    pub fn result(&self, node: NodeIdx) -> Option<&NodeResult> {
        self.results.iter().find(|r| r.node == node)
    }
}

/// Earliest receipt time of every cell each node got.
#[derive(Debug, Clone, Default)]
pub(crate) struct Receipts {
    per_node: HashMap<NodeIdx, HashMap<CellCoordinate, u64>>,
}

impl Receipts {
    /// Records a receipt; returns true if the cell is new to `node`.
    pub fn record(&mut self, node: NodeIdx, cell: CellCoordinate, at_us: u64) -> bool {
        let m = self.per_node.entry(node).or_default();
        match m.get(&cell) {
            Some(&t) if t <= at_us => false,
            Some(_) => {
                m.insert(cell, at_us);
                false
            }
            None => {
                m.insert(cell, at_us);
                true
            }
        }
    }

    pub fn has(&self, node: NodeIdx, cell: &CellCoordinate) -> bool {
        self.per_node.get(&node).is_some_and(|m| m.contains_key(cell))
    }

    pub fn of(&self, node: NodeIdx) -> Option<&HashMap<CellCoordinate, u64>> {
        self.per_node.get(&node)
    }
}

/// First time the assignment's success condition held, given receipt times.
pub fn completion_time(assignment: &SampleAssignment, times: &HashMap<CellCoordinate, u64>, geometry: &BlobGeometry) -> Option<u64> {
    let mut got: Vec<(CellCoordinate, u64)> = assignment
        .cells
        .iter()
        .filter_map(|c| times.get(c).map(|&t| (*c, t)))
        .collect();
    match assignment.mode {
        SampleMode::RegularCells => (got.len() == assignment.cells.len()).then(|| got.iter().map(|x| x.1).max().unwrap_or(0)),
        SampleMode::KofN => {
            if got.len() < assignment.k_required {
                return None;
            }
            got.sort_unstable_by_key(|x| x.1);
            Some(got.get(assignment.k_required.checked_sub(1)?).map_or(0, |x| x.1))
        }
        SampleMode::ValidatorLines => {
            let mut done = 0;
            for line in assignment.lines() {
                let need = match line {
                    Line::Row(_) => geometry.extended_cols(),
                    Line::Col(_) => geometry.extended_rows(),
                }
                .div_ceil(2) as usize;
                let mut ts: Vec<u64> = got.iter().filter(|(c, _)| line.contains(*c)).map(|x| x.1).collect();
                if ts.len() < need {
                    return None;
                }
                ts.sort_unstable();
                done = done.max(ts[need - 1]);
            }
            for c in &assignment.extra_cells {
                done = done.max(*times.get(c)?);
            }
            Some(done)
        }
    }
}

/// Verdicts for every sampling node from cells received before slot end.
pub(crate) fn collect_results(input: &SlotInput<'_>, receipts: &Receipts) -> Vec<NodeResult> {
    let end = input.params.slot_duration_us();
    let empty = HashMap::new();
    input
        .sampling_nodes()
        .map(|(node, a)| {
            let times: HashMap<CellCoordinate, u64> = receipts
                .of(node)
                .unwrap_or(&empty)
                .iter()
                .filter(|(_, &t)| t < end)
                .map(|(c, t)| (*c, *t))
                .collect();
            let role = input.nodes[node as usize].role;
            let completion = completion_time(a, &times, &input.geometry);
            let verdict = evaluate(a, times.keys(), &input.geometry).with_completion(completion, input.deadline_us(role));
            NodeResult {
                node,
                role,
                verdict,
                completion_us: completion,
                missing: a.cells.iter().filter(|c| !times.contains_key(c)).copied().collect(),
            }
        })
        .collect()
}

/// Accounts the producer's header announcement to every sampling node.
pub(crate) fn account_header(ledger: &mut TrafficLedger, input: &SlotInput<'_>) {
    let bytes = input.header_bytes();
    for (node, _) in input.sampling_nodes() {
        if node != input.producer {
            ledger.record_send(input.producer, bytes, MessageClass::Header);
            ledger.record_receive(node, bytes, MessageClass::Header);
        }
    }
}

pub(crate) fn apply_bandwidth<M>(sim: &mut crate::sim::Simulator<M>, input: &SlotInput<'_>) -> Result<(), StrategyError> {
    for &(node, budget) in input.bandwidth {
        sim.set_bandwidth(node, budget).map_err(|e| StrategyError::Sim(e.to_string()))?;
    }
    Ok(())
}

/// Persistent per-strategy state carried from slot to slot.
#[derive(Debug, Clone, Default)]
pub struct StrategyState {
    pub gossip: GossipState,
}

/// Runs one slot with the strategy named in `config`.
pub fn run_strategy(input: &SlotInput<'_>, config: &StrategyConfig, state: &mut StrategyState) -> Result<StrategyOutcome, StrategyError> {
    config.validate()?;
    if input.producer as usize >= input.nodes.len() {
        return Err(StrategyError::UnknownNode(input.producer));
    }
    match config.kind {
        StrategyKind::Centralized => run_centralized(input, config),
        StrategyKind::GossipMesh => run_gossip(input, config, &mut state.gossip),
        StrategyKind::DhtCache => run_dht(input, config),
    }
}
