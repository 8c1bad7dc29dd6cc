use std::collections::BTreeMap;

use super::{account_header, apply_bandwidth, collect_results, Receipts, SlotInput, StrategyConfig, StrategyError, StrategyKind, StrategyOutcome};
use crate::model::{CellCoordinate, DeterministicRng, NodeId};
use crate::sim::{EventKind, MessageClass, NodeIdx, Simulator};

pub const REQUEST_BASE_BYTES: u64 = 64;
/// Bytes per requested coordinate.
pub const REQUEST_CELL_BYTES: u64 = 8;

#[derive(Debug, Clone)]
enum Msg {
    Request { pseudonym: Option<NodeId> },
    Response { cells: Vec<CellCoordinate> },
}

/// Every sampling node asks the producer for its cells; the producer answers
/// each request with one batch, minus withheld cells and split targets.
/// Through the proxy both legs take `proxy_delay_ms` longer and the producer
/// sees only a fresh pseudonym per request.
pub fn run_centralized(input: &SlotInput<'_>, config: &StrategyConfig) -> Result<StrategyOutcome, StrategyError> {
    let n = input.nodes.len();
    let producer = input.producer;
    let mut sim: Simulator<Msg> = Simulator::new(n, input.latency.clone(), input.seed).map_err(|e| StrategyError::Sim(e.to_string()))?;
    apply_bandwidth(&mut sim, input)?;
    let extra = if config.unlinkability_proxy {
        config.proxy_delay_ms * 1000
    } else {
        0
    };
    let mut pseudonyms = DeterministicRng::derive(input.seed, "proxy-pseudonyms", &[input.slot]);
    let sim_err = |e: crate::sim::SimError| StrategyError::Sim(e.to_string());
    for (node, a) in input.sampling_nodes() {
        if node == producer {
            continue;
        }
        let pseudonym = config.unlinkability_proxy.then(|| NodeId::random(&mut pseudonyms));
        let bytes = REQUEST_BASE_BYTES + REQUEST_CELL_BYTES * a.cells.len() as u64;
        sim.send_delayed(node, producer, bytes, MessageClass::Signaling, Msg::Request { pseudonym }, extra)
            .map_err(sim_err)?;
    }

    let mut receipts = Receipts::default();
    let mut ignored = 0u64;
    let end = input.params.slot_duration_us();
    while let Some(ev) = sim.next_event_until(end) {
        let EventKind::MessageDelivery { from, to, message, .. } = ev.kind else {
            continue;
        };
        match message {
            Msg::Request { pseudonym } => {
                let (observed, addr): (NodeId, Option<NodeIdx>) = match pseudonym {
                    Some(p) => (p, None),
                    None => (input.nodes[from as usize].node_id, Some(from)),
                };
                if input.adversary.split.as_ref().is_some_and(|p| p.matches(&observed, addr)) {
                    ignored += 1;
                    continue;
                }
                let cells: Vec<CellCoordinate> = input.assignments[from as usize]
                    .as_ref()
                    .map(|a| a.cells.iter().filter(|c| !input.adversary.withheld.contains(c)).copied().collect())
                    .unwrap_or_default();
                if cells.is_empty() {
                    continue;
                }
                let bytes = cells.len() as u64 * input.geometry.cell_wire_bytes();
                sim.send_delayed(to, from, bytes, MessageClass::CellTransfer, Msg::Response { cells }, extra)
                    .map_err(sim_err)?;
            }
            Msg::Response { cells } => {
                for c in cells {
                    receipts.record(to, c, ev.fire_time_us);
                }
            }
        }
    }
    let trace_hash = sim.trace_hash();
    let mut ledger = sim.finalize();
    account_header(&mut ledger, input);
    let mut stats = BTreeMap::new();
    stats.insert("ignored_requests".to_string(), ignored as f64);
    Ok(StrategyOutcome {
        slot: input.slot,
        kind: StrategyKind::Centralized,
        producer,
        ledger,
        results: collect_results(input, &receipts),
        stats,
        trace_hash,
    })
}
