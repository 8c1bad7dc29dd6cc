use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{account_header, collect_results, Receipts, SlotInput, StrategyConfig, StrategyError, StrategyKind, StrategyOutcome};
use crate::commitment::{CellPayload, SlotBlob};
use crate::kademlia::{cell_key, Behavior, DhtNetwork, DhtSimulation, LookupConfig, NodeSpec, OpId, OpOutcome, RoutingConfig};
use crate::model::{CellCoordinate, DeterministicRng};
use crate::sim::NodeIdx;

fn default_get_start() -> u64 {
    1500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhtConfig {
    #[serde(default)]
    pub lookup: LookupConfig,
    /// Store on and read from a keyspace region instead of the k closest.
    #[serde(default)]
    pub region: bool,
    /// Region depth; defaults to [`default_region_depth`].
    #[serde(default)]
    pub region_depth: Option<u32>,
    /// When samplers start their gets, in ms after the slot starts.
    #[serde(default = "default_get_start")]
    pub get_start_ms: u64,
}

impl Default for DhtConfig {
    fn default() -> Self {
        DhtConfig {
            lookup: LookupConfig::default(),
            region: false,
            region_depth: None,
            get_start_ms: default_get_start(),
        }
    }
}

impl DhtConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        self.lookup.validate().map_err(|e| StrategyError::Invalid {
            field: "dht.lookup",
            reason: e.to_string(),
        })?;
        if self.region_depth.is_some_and(|d| d > crate::kademlia::MAX_REGION_DEPTH) {
            return Err(StrategyError::Invalid {
                field: "dht.region_depth",
                reason: format!("must be at most {}", crate::kademlia::MAX_REGION_DEPTH),
            });
        }
        Ok(())
    }
}

/// Deepest region expected to still hold about `k` of `nodes` nodes.
pub fn default_region_depth(nodes: usize, k: usize) -> u32 {
    let ratio = nodes as f64 / k.max(1) as f64;
    if ratio <= 1.0 {
        0
    } else {
        ratio.log2().floor() as u32
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    node: NodeIdx,
    cell: CellCoordinate,
    copy: u32,
}

/// The producer puts every released cell (`seed_copies` keys per cell) at
/// slot start; samplers get their cells from `get_start_ms` on, falling back
/// to the next copy when a get fails.
pub fn run_dht(input: &SlotInput<'_>, config: &StrategyConfig) -> Result<StrategyOutcome, StrategyError> {
    let dc = &config.dht;
    let producer = input.producer;
    let sim_err = |e: String| StrategyError::Sim(e);
    let mut specs: Vec<NodeSpec> = input
        .nodes
        .iter()
        .enumerate()
        .map(|(i, p)| NodeSpec {
            node_id: p.node_id,
            subnet: p.subnet,
            behavior: if input.adversary.defecting.contains(&(i as NodeIdx)) {
                Behavior::Unresponsive
            } else {
                Behavior::Honest
            },
        })
        .collect();
    specs.extend(input.adversary.sybils.iter().copied());
    let mut net = DhtNetwork::new(specs, RoutingConfig::default());
    net.bootstrap_converged(&mut DeterministicRng::derive(input.seed, "dht-bootstrap", &[input.slot]));
    let total_nodes = net.len();
    let mut dht = DhtSimulation::new(net, input.latency.clone(), input.seed)
        .map_err(|e| sim_err(e.to_string()))?
        .with_blob(Arc::new(SlotBlob::Virtual(input.geometry)));
    for &(node, budget) in input.bandwidth {
        dht.sim_mut().set_bandwidth(node, budget).map_err(|e| sim_err(e.to_string()))?;
    }
    let depth = dc.region_depth.unwrap_or_else(|| default_region_depth(total_nodes, dc.lookup.k_closest));
    let cfg = dc.lookup;
    let copies = config.seed_copies;

    for cell in input.geometry.coordinates() {
        if input.adversary.withheld.contains(&cell) {
            dht.register_key(cell_key(input.slot, cell, 0), cell);
            continue;
        }
        for copy in 0..copies {
            let key = cell_key(input.slot, cell, copy);
            let value = CellPayload::genuine(cell);
            let r = if dc.region {
                dht.start_region(producer, key, depth, Some(value), false, cfg, None)
            } else {
                dht.start_put(producer, key, value, cfg, None)
            };
            r.map_err(|e| sim_err(e.to_string()))?;
        }
    }

    let mut ops: BTreeMap<OpId, Pending> = BTreeMap::new();
    let start = |dht: &mut DhtSimulation, p: Pending, at: u64| {
        let key = cell_key(input.slot, p.cell, p.copy);
        if dc.region {
            dht.start_region(p.node, key, depth, None, true, cfg, Some(at))
        } else {
            dht.start_get(p.node, key, cfg, Some(at))
        }
    };
    let get_start = dc.get_start_ms * 1000;
    for (node, a) in input.sampling_nodes() {
        if node == producer || input.adversary.defecting.contains(&node) {
            continue;
        }
        for &cell in &a.cells {
            let p = Pending { node, cell, copy: 0 };
            let id = start(&mut dht, p, get_start).map_err(|e| sim_err(e.to_string()))?;
            ops.insert(id, p);
        }
    }

    let mut receipts = Receipts::default();
    let (mut gets, mut failed, mut hops, mut contacted, mut latency) = (0u64, 0u64, 0u64, 0u64, 0u64);
    while !ops.is_empty() {
        dht.run();
        let now = dht.now_us();
        let mut retry = Vec::new();
        for (id, p) in std::mem::take(&mut ops) {
            let outcome = dht.take_outcome(id).expect("operation finished");
            gets += 1;
            if let Some(t) = outcome.trace() {
                hops += t.hops as u64;
                contacted += t.contacted.len() as u64;
            }
            let ok = match &outcome {
                OpOutcome::Get(Ok(r)) => Some(r.trace.finished_us),
                OpOutcome::Region(Ok(r)) if r.verified.is_some() => Some(r.trace.finished_us),
                _ => None,
            };
            match ok {
                Some(t) => {
                    latency += t - outcome.trace().map_or(t, |tr| tr.started_us);
                    receipts.record(p.node, p.cell, t);
                }
                None => {
                    failed += 1;
                    if p.copy + 1 < copies {
                        retry.push(Pending { copy: p.copy + 1, ..p });
                    }
                }
            }
        }
        for p in retry {
            let id = start(&mut dht, p, now).map_err(|e| sim_err(e.to_string()))?;
            ops.insert(id, p);
        }
    }

    let trace_hash = dht.sim().trace_hash();
    let mut ledger = dht.sim_mut().finalize();
    account_header(&mut ledger, input);
    let mut stats = BTreeMap::new();
    let ok = (gets - failed).max(1) as f64;
    stats.insert("gets".into(), gets as f64);
    stats.insert("failed_gets".into(), failed as f64);
    stats.insert("mean_get_hops".into(), hops as f64 / gets.max(1) as f64);
    stats.insert("mean_get_contacted".into(), contacted as f64 / gets.max(1) as f64);
    stats.insert("mean_get_latency_us".into(), latency as f64 / ok);
    stats.insert("region_depth".into(), if dc.region { depth as f64 } else { -1.0 });
    stats.insert("sybils".into(), input.adversary.sybils.len() as f64);
    stats.insert("sybil_attempts".into(), input.adversary.sybil_attempts as f64);
    Ok(StrategyOutcome {
        slot: input.slot,
        kind: StrategyKind::DhtCache,
        producer,
        ledger,
        results: collect_results(input, &receipts),
        stats,
        trace_hash,
    })
}
