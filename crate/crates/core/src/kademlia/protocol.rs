//! Event-driven DHT operations: iterative and recursive lookups, put/get,
//! and region enumeration, all running on the shared simulation kernel.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{Behavior, DhtNetwork};
use super::region::Region;
use super::routing::NodeRecord;
use crate::commitment::{CellPayload, SlotBlob};
use crate::model::{CellCoordinate, DeterministicRng, Key, NodeId};
use crate::sim::{EventKind, LatencyModel, MessageClass, NodeIdx, SimError, Simulator, TrafficLedger};

/// Fixed size of a request or control message.
pub const REQUEST_BYTES: u64 = 100;
/// Size of one contact in a response.
pub const CONTACT_BYTES: u64 = 40;
pub const RESPONSE_HEADER_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    Iterative,
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookupConfig {
    pub mode: LookupMode,
    pub alpha: usize,
    pub k_closest: usize,
    pub disjoint_paths: usize,
    pub timeout_us: u64,
}

impl Default for LookupConfig {
    fn default() -> Self {
        LookupConfig {
            mode: LookupMode::Iterative,
            alpha: 3,
            k_closest: 16,
            disjoint_paths: 1,
            timeout_us: 1_000_000,
        }
    }
}

impl LookupConfig {
    pub fn validate(&self) -> Result<(), DhtError> {
        if self.alpha == 0 || self.k_closest == 0 || self.disjoint_paths == 0 {
            return Err(DhtError::InvalidConfig("alpha, k_closest and disjoint_paths must be >= 1".into()));
        }
        if self.disjoint_paths > self.alpha * self.k_closest || self.disjoint_paths > u8::MAX as usize {
            return Err(DhtError::InvalidConfig("disjoint_paths exceeds alpha * k_closest".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTrace {
    /// Query rounds for iterative lookups; forwarding hops plus completion
    /// rounds for recursive ones.
    pub hops: u32,
    /// Distinct nodes the origin sent a query to, ascending.
    pub contacted: Vec<NodeIdx>,
    /// Nodes that did not answer before their timeout.
    pub failed: Vec<NodeIdx>,
    /// For recursive lookups: the intermediate that swallowed the query.
    pub dropped_by: Option<NodeIdx>,
    pub started_us: u64,
    pub finished_us: u64,
}

impl LookupTrace {
    pub fn contacted_count(&self) -> usize {
        self.contacted.len()
    }

    pub fn elapsed_us(&self) -> u64 {
        self.finished_us - self.started_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupResult {
    pub closest: Vec<NodeRecord>,
    /// Per-path results for disjoint lookups.
    pub paths: Vec<Vec<NodeRecord>>,
    pub trace: LookupTrace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutResult {
    pub stored_at: Vec<NodeIdx>,
    pub trace: LookupTrace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetResult {
    pub value: CellPayload,
    pub holder: NodeIdx,
    pub trace: LookupTrace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionResult {
    pub region: Region,
    pub members: Vec<NodeIdx>,
    /// Every value a member returned, verified or not.
    pub values: Vec<(NodeIdx, CellPayload)>,
    /// First value that passed verification.
    pub verified: Option<(NodeIdx, CellPayload)>,
    pub trace: LookupTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DhtError {
    #[error("origin has an empty routing table")]
    EmptyRoutingTable,
    #[error("lookup failed after contacting {} nodes", trace.contacted_count())]
    LookupFailed { trace: LookupTrace },
    #[error("no holder found")]
    NotFound { trace: LookupTrace },
    #[error("every returned value failed verification")]
    VerificationFailed { trace: LookupTrace },
    #[error("no region members found")]
    RegionEmpty { trace: LookupTrace },
    #[error("invalid lookup config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl DhtError {
    pub fn trace(&self) -> Option<&LookupTrace> {
        match self {
            DhtError::LookupFailed { trace }
            | DhtError::NotFound { trace }
            | DhtError::VerificationFailed { trace }
            | DhtError::RegionEmpty { trace } => Some(trace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpOutcome {
    Lookup(Result<LookupResult, DhtError>),
    Put(Result<PutResult, DhtError>),
    Get(Result<GetResult, DhtError>),
    Region(Result<RegionResult, DhtError>),
}

impl OpOutcome {
    pub fn is_success(&self) -> bool {
        match self {
            OpOutcome::Lookup(r) => r.is_ok(),
            OpOutcome::Put(r) => r.is_ok(),
            OpOutcome::Get(r) => r.is_ok(),
            OpOutcome::Region(r) => match r {
                Ok(res) => res.verified.is_some() || res.values.is_empty(),
                Err(_) => false,
            },
        }
    }

    pub fn trace(&self) -> Option<&LookupTrace> {
        match self {
            OpOutcome::Lookup(Ok(r)) => Some(&r.trace),
            OpOutcome::Put(Ok(r)) => Some(&r.trace),
            OpOutcome::Get(Ok(r)) => Some(&r.trace),
            OpOutcome::Region(Ok(r)) => Some(&r.trace),
            OpOutcome::Lookup(Err(e)) | OpOutcome::Put(Err(e)) | OpOutcome::Get(Err(e)) | OpOutcome::Region(Err(e)) => {
                e.trace()
            }
        }
    }

    pub fn finished_us(&self) -> Option<u64> {
        self.trace().map(|t| t.finished_us)
    }
}

pub type OpId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DhtMessage {
    Start {
        op: OpId,
    },
    FindNode {
        op: OpId,
        path: u8,
        queried: NodeId,
        target: Key,
        want_value: bool,
    },
    Nodes {
        op: OpId,
        path: u8,
        queried: NodeId,
        contacts: Vec<NodeRecord>,
    },
    Value {
        op: OpId,
        path: u8,
        queried: NodeId,
        value: CellPayload,
    },
    Store {
        key: Key,
        value: CellPayload,
    },
    Forward {
        op: OpId,
        origin: NodeIdx,
        target: Key,
        want_value: bool,
        hops: u32,
    },
    ForwardResult {
        op: OpId,
        hops: u32,
        contacts: Vec<NodeRecord>,
    },
    RegionQuery {
        op: OpId,
        region: Region,
        key: Key,
        probe: Option<NodeId>,
    },
    RegionReply {
        op: OpId,
        members: Vec<NodeRecord>,
        value: Option<CellPayload>,
    },
    QueryTimeout {
        op: OpId,
        path: u8,
        queried: NodeId,
    },
    RegionTimeout {
        op: OpId,
        addr: NodeIdx,
    },
    OpTimeout {
        op: OpId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CandState {
    Fresh,
    InFlight,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct Cand {
    rec: NodeRecord,
    state: CandState,
}

#[derive(Debug, Clone, Default)]
struct Path {
    /// Keyed by XOR distance to the target.
    shortlist: BTreeMap<NodeId, Cand>,
    inflight: usize,
    rounds: u32,
    done: bool,
}

#[derive(Debug, Clone)]
enum OpKind {
    Lookup,
    Put(CellPayload),
    Get,
    Region {
        region: Region,
        store: Option<CellPayload>,
        stop_on_value: bool,
    },
}

#[derive(Debug, Clone, Default)]
struct RegionState {
    members: BTreeMap<NodeIdx, NodeRecord>,
    gateways: Vec<NodeIdx>,
    queried: BTreeSet<NodeIdx>,
    pending: BTreeSet<NodeIdx>,
    found_this_round: bool,
    rounds: u32,
    idle_rounds: u32,
    values: Vec<(NodeIdx, CellPayload)>,
    verified: Option<(NodeIdx, CellPayload)>,
}

#[derive(Debug, Clone)]
struct Op {
    origin: NodeIdx,
    /// Where the search heads; differs from `key` only for region operations.
    target: Key,
    key: Key,
    cfg: LookupConfig,
    kind: OpKind,
    paths: Vec<Path>,
    visited: HashSet<NodeId>,
    contacted: BTreeSet<NodeIdx>,
    failed: BTreeSet<NodeIdx>,
    verification_failures: u32,
    forward_hops: u32,
    forwarding: bool,
    dropped_by: Option<NodeIdx>,
    started_us: u64,
    region: Option<RegionState>,
}

impl Op {
    fn want_value(&self) -> bool {
        matches!(self.kind, OpKind::Get)
    }

    fn trace(&self, now_us: u64) -> LookupTrace {
        LookupTrace {
            hops: self.forward_hops + self.paths.iter().map(|p| p.rounds).max().unwrap_or(0),
            contacted: self.contacted.iter().copied().collect(),
            failed: self.failed.iter().copied().collect(),
            dropped_by: self.dropped_by,
            started_us: self.started_us,
            finished_us: now_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DhtParams {
    /// Bytes of a stored value on the wire (a cell plus proof).
    pub value_bytes: u64,
}

impl Default for DhtParams {
    fn default() -> Self {
        DhtParams { value_bytes: 560 }
    }
}

/// Owns a [`DhtNetwork`] and the event loop its operations run on.
pub struct DhtSimulation {
    network: DhtNetwork,
    sim: Simulator<DhtMessage>,
    ops: Vec<Option<Op>>,
    pending_start: HashMap<OpId, Op>,
    outcomes: Vec<Option<OpOutcome>>,
    blob: Option<Arc<SlotBlob>>,
    key_coords: HashMap<Key, CellCoordinate>,
    params: DhtParams,
    rng: DeterministicRng,
    learning: bool,
}

impl DhtSimulation {
    pub fn new(network: DhtNetwork, latency: LatencyModel, seed: u64) -> Result<Self, DhtError> {
        let sim = Simulator::new(network.len(), latency, seed)?;
        Ok(DhtSimulation {
            network,
            sim,
            ops: Vec::new(),
            pending_start: HashMap::new(),
            outcomes: Vec::new(),
            blob: None,
            key_coords: HashMap::new(),
            params: DhtParams::default(),
            rng: DeterministicRng::derive(seed, "dht-sim", &[]),
            learning: false,
        })
    }

    /// Cells are checked against `blob` before a get accepts them.
    pub fn with_blob(mut self, blob: Arc<SlotBlob>) -> Self {
        self.params.value_bytes = blob.geometry().cell_wire_bytes();
        self.blob = Some(blob);
        self
    }

    pub fn with_params(mut self, params: DhtParams) -> Self {
        self.params = params;
        self
    }

    /// When on, honest nodes admit every peer that queries them and every
    /// peer that answers them.
    pub fn set_learning(&mut self, on: bool) {
        self.learning = on;
    }

    fn learn(&mut self, at: NodeIdx, peer: NodeIdx) {
        if !self.learning || self.network.node(at).behavior != Behavior::Honest {
            return;
        }
        let now = self.sim.now_us();
        let mut rec = self.network.record(peer);
        rec.last_seen_us = now;
        self.network.node_mut(at).table.admit(rec, now, |_| true);
    }

    /// Builds routing tables the way a live network does: nodes join one at
    /// a time through a random already-joined node and look up their own id,
    /// with learning switched on. Tables of early joiners end up fuller.
    pub fn join_all(&mut self, cfg: LookupConfig) -> Result<(), DhtError> {
        let was = self.learning;
        self.learning = true;
        let n = self.network.len() as NodeIdx;
        for u in 1..n {
            let via = self.rng.gen_range(0..u);
            let rec = self.network.record(via);
            self.network.node_mut(u).table.admit(rec, self.sim.now_us(), |_| true);
            let own = self.network.node(u).node_id;
            self.run_lookup(u, own, cfg)?;
        }
        self.learning = was;
        Ok(())
    }

    pub fn network(&self) -> &DhtNetwork {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut DhtNetwork {
        &mut self.network
    }

    pub fn sim(&self) -> &Simulator<DhtMessage> {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator<DhtMessage> {
        &mut self.sim
    }

    pub fn ledger(&self) -> &TrafficLedger {
        self.sim.ledger()
    }

    pub fn now_us(&self) -> u64 {
        self.sim.now_us()
    }

    fn verify(&self, p: &CellPayload) -> bool {
        match &self.blob {
            Some(b) => b.verify(p),
            None => p.genuine,
        }
    }

    fn new_op(&mut self, origin: NodeIdx, target: Key, cfg: LookupConfig, kind: OpKind) -> Result<Op, DhtError> {
        cfg.validate()?;
        if origin as usize >= self.network.len() {
            return Err(SimError::UnknownNode(origin).into());
        }
        Ok(Op {
            origin,
            target,
            key: target,
            cfg,
            kind,
            paths: vec![Path::default(); cfg.disjoint_paths],
            visited: HashSet::new(),
            contacted: BTreeSet::new(),
            failed: BTreeSet::new(),
            verification_failures: 0,
            forward_hops: 0,
            forwarding: false,
            dropped_by: None,
            started_us: 0,
            region: None,
        })
    }

    fn launch(&mut self, op: Op, at_us: Option<u64>) -> Result<OpId, DhtError> {
        let id = self.ops.len() as OpId;
        self.ops.push(None);
        self.outcomes.push(None);
        match at_us {
            None => {
                self.ops[id as usize] = Some(op);
                self.begin(id);
            }
            Some(t) => {
                let origin = op.origin;
                self.sim.schedule_timer(origin, t, DhtMessage::Start { op: id })?;
                self.pending_start.insert(id, op);
            }
        }
        Ok(id)
    }

    pub fn start_lookup(&mut self, origin: NodeIdx, target: Key, cfg: LookupConfig) -> Result<OpId, DhtError> {
        let op = self.new_op(origin, target, cfg, OpKind::Lookup)?;
        self.launch(op, None)
    }

    /// Stores `value` under `key` on the k closest nodes found by a lookup.
    pub fn start_put(&mut self, origin: NodeIdx, key: Key, value: CellPayload, cfg: LookupConfig, at_us: Option<u64>) -> Result<OpId, DhtError> {
        self.key_coords.insert(key, value.coord);
        let op = self.new_op(origin, key, cfg, OpKind::Put(value))?;
        self.launch(op, at_us)
    }

    pub fn start_get(&mut self, origin: NodeIdx, key: Key, cfg: LookupConfig, at_us: Option<u64>) -> Result<OpId, DhtError> {
        let op = self.new_op(origin, key, cfg, OpKind::Get)?;
        self.launch(op, at_us)
    }

    /// Enumerates the depth-`depth` region around `key`. With `store`, the
    /// value is put on every member found; with `stop_on_value`, the
    /// operation ends at the first verified value.
    pub fn start_region(
        &mut self,
        origin: NodeIdx,
        key: Key,
        depth: u32,
        store: Option<CellPayload>,
        stop_on_value: bool,
        cfg: LookupConfig,
        at_us: Option<u64>,
    ) -> Result<OpId, DhtError> {
        if let Some(v) = store {
            self.key_coords.insert(key, v.coord);
        }
        let region = Region::of(&key, depth);
        let entry = region.random_id(&mut self.rng);
        let mut op = self.new_op(
            origin,
            entry,
            LookupConfig {
                mode: LookupMode::Iterative,
                ..cfg
            },
            OpKind::Region {
                region,
                store,
                stop_on_value,
            },
        )?;
        op.key = key;
        self.launch(op, at_us)
    }

    /// Makes a key's cell coordinate public so Sybils can forge for it.
    pub fn register_key(&mut self, key: Key, coord: CellCoordinate) {
        self.key_coords.insert(key, coord);
    }

    pub fn outcome(&self, op: OpId) -> Option<&OpOutcome> {
        self.outcomes.get(op as usize)?.as_ref()
    }

    pub fn take_outcome(&mut self, op: OpId) -> Option<OpOutcome> {
        self.outcomes.get_mut(op as usize)?.take()
    }

    /// Processes events until the queue is empty.
    pub fn run(&mut self) {
        while let Some(ev) = self.sim.next_event() {
            self.handle(ev.kind);
        }
    }

    pub fn run_lookup(&mut self, origin: NodeIdx, target: Key, cfg: LookupConfig) -> Result<LookupResult, DhtError> {
        let op = self.start_lookup(origin, target, cfg)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Lookup(r)) => r,
            other => unreachable!("lookup produced {other:?}"),
        }
    }

    pub fn dht_put(&mut self, origin: NodeIdx, key: Key, value: CellPayload, cfg: LookupConfig) -> Result<PutResult, DhtError> {
        let op = self.start_put(origin, key, value, cfg, None)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Put(r)) => r,
            other => unreachable!("put produced {other:?}"),
        }
    }

    pub fn dht_get(&mut self, origin: NodeIdx, key: Key, cfg: LookupConfig) -> Result<GetResult, DhtError> {
        let op = self.start_get(origin, key, cfg, None)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Get(r)) => r,
            other => unreachable!("get produced {other:?}"),
        }
    }

    pub fn region_put(&mut self, origin: NodeIdx, key: Key, depth: u32, value: CellPayload, cfg: LookupConfig) -> Result<RegionResult, DhtError> {
        let op = self.start_region(origin, key, depth, Some(value), false, cfg, None)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Region(r)) => r,
            other => unreachable!("region put produced {other:?}"),
        }
    }

    /// Full enumeration of the region with every value members hold.
    pub fn region_lookup(&mut self, origin: NodeIdx, key: Key, depth: u32, cfg: LookupConfig) -> Result<RegionResult, DhtError> {
        let op = self.start_region(origin, key, depth, None, false, cfg, None)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Region(r)) => r,
            other => unreachable!("region lookup produced {other:?}"),
        }
    }

    /// Region retrieval that stops at the first verified value.
    pub fn region_get(&mut self, origin: NodeIdx, key: Key, depth: u32, cfg: LookupConfig) -> Result<RegionResult, DhtError> {
        let op = self.start_region(origin, key, depth, None, true, cfg, None)?;
        self.run();
        match self.take_outcome(op) {
            Some(OpOutcome::Region(Ok(r))) if r.verified.is_none() => Err(if r.values.is_empty() {
                DhtError::NotFound { trace: r.trace }
            } else {
                DhtError::VerificationFailed { trace: r.trace }
            }),
            Some(OpOutcome::Region(r)) => r,
            other => unreachable!("region get produced {other:?}"),
        }
    }

    fn send(&mut self, from: NodeIdx, to: NodeIdx, bytes: u64, class: MessageClass, msg: DhtMessage) {
        if from != to {
            self.sim.send(from, to, bytes, class, msg).expect("valid addresses");
        }
    }

    fn timer(&mut self, node: NodeIdx, delay_us: u64, msg: DhtMessage) {
        self.sim.schedule_after(node, delay_us, msg).expect("future timer");
    }

    fn finish(&mut self, id: OpId, outcome: OpOutcome) {
        self.ops[id as usize] = None;
        self.outcomes[id as usize] = Some(outcome);
    }

    fn begin(&mut self, id: OpId) {
        let now = self.sim.now_us();
        let mut op = self.ops[id as usize].take().expect("op exists");
        op.started_us = now;
        let origin = op.origin;
        let node = self.network.node(origin);
        if op.want_value() {
            if let Some(v) = node.store.get(&op.target).copied() {
                if self.verify(&v) {
                    let trace = op.trace(now);
                    self.finish(id, OpOutcome::Get(Ok(GetResult { value: v, holder: origin, trace })));
                    return;
                }
            }
        }
        if node.table.is_empty() {
            let err = DhtError::EmptyRoutingTable;
            let outcome = match op.kind {
                OpKind::Lookup => OpOutcome::Lookup(Err(err)),
                OpKind::Put(_) => OpOutcome::Put(Err(err)),
                OpKind::Get => OpOutcome::Get(Err(err)),
                OpKind::Region { .. } => OpOutcome::Region(Err(err)),
            };
            self.finish(id, outcome);
            return;
        }
        let k = op.cfg.k_closest;
        let seeds = node.table.closest(&op.target, k);
        let own_dist = node.node_id.xor(&op.target);
        if op.cfg.mode == LookupMode::Recursive && seeds[0].node_id.xor(&op.target) < own_dist {
            op.forwarding = true;
            let first = seeds[0];
            op.contacted.insert(first.addr);
            let (target, want_value, timeout) = (op.target, op.want_value(), op.cfg.timeout_us);
            self.ops[id as usize] = Some(op);
            self.send(
                origin,
                first.addr,
                REQUEST_BYTES,
                MessageClass::Signaling,
                DhtMessage::Forward {
                    op: id,
                    origin,
                    target,
                    want_value,
                    hops: 1,
                },
            );
            self.timer(origin, timeout, DhtMessage::OpTimeout { op: id });
            return;
        }
        let d = op.paths.len();
        for (i, rec) in seeds.into_iter().enumerate() {
            let dist = rec.node_id.xor(&op.target);
            op.paths[i % d].shortlist.insert(dist, Cand { rec, state: CandState::Fresh });
        }
        self.ops[id as usize] = Some(op);
        for p in 0..d {
            self.advance_path(id, p);
        }
        self.maybe_finish_search(id);
    }

    fn advance_path(&mut self, id: OpId, p: usize) {
        let Some(op) = self.ops[id as usize].as_mut() else {
            return;
        };
        let path = &mut op.paths[p];
        if path.done || path.inflight > 0 {
            return;
        }
        let alpha = op.cfg.alpha;
        let picks: Vec<NodeId> = path
            .shortlist
            .iter()
            .filter(|(_, c)| c.state != CandState::Failed)
            .take(op.cfg.k_closest)
            .filter(|(_, c)| c.state == CandState::Fresh && !op.visited.contains(&c.rec.node_id))
            .take(alpha)
            .map(|(d, _)| *d)
            .collect();
        if picks.is_empty() {
            path.done = true;
            return;
        }
        path.rounds += 1;
        let mut sends = Vec::with_capacity(picks.len());
        for d in picks {
            let c = path.shortlist.get_mut(&d).expect("picked");
            c.state = CandState::InFlight;
            path.inflight += 1;
            op.visited.insert(c.rec.node_id);
            op.contacted.insert(c.rec.addr);
            sends.push(c.rec);
        }
        let (origin, target, want_value, timeout) = (op.origin, op.target, op.want_value(), op.cfg.timeout_us);
        for rec in sends {
            self.send(
                origin,
                rec.addr,
                REQUEST_BYTES,
                MessageClass::Signaling,
                DhtMessage::FindNode {
                    op: id,
                    path: p as u8,
                    queried: rec.node_id,
                    target,
                    want_value,
                },
            );
            self.timer(
                origin,
                timeout,
                DhtMessage::QueryTimeout {
                    op: id,
                    path: p as u8,
                    queried: rec.node_id,
                },
            );
        }
    }

    /// Marks a queried candidate answered or failed and merges contacts.
    fn settle(&mut self, id: OpId, p: usize, queried: NodeId, state: CandState, contacts: &[NodeRecord]) -> bool {
        let Some(op) = self.ops[id as usize].as_mut() else {
            return false;
        };
        let Some(path) = op.paths.get_mut(p) else {
            return false;
        };
        let d = queried.xor(&op.target);
        let Some(c) = path.shortlist.get_mut(&d) else {
            return false;
        };
        if c.state != CandState::InFlight {
            return false;
        }
        c.state = state;
        path.inflight -= 1;
        if state == CandState::Failed {
            op.failed.insert(c.rec.addr);
        }
        let own = self.network.node(op.origin).node_id;
        for rec in contacts {
            if rec.node_id == own {
                continue;
            }
            let dist = rec.node_id.xor(&op.target);
            path.shortlist.entry(dist).or_insert(Cand {
                rec: *rec,
                state: CandState::Fresh,
            });
        }
        true
    }

    fn maybe_finish_search(&mut self, id: OpId) {
        let Some(op) = self.ops[id as usize].as_ref() else {
            return;
        };
        if op.forwarding || op.region.is_some() || !op.paths.iter().all(|p| p.done && p.inflight == 0) {
            return;
        }
        let now = self.sim.now_us();
        let k = op.cfg.k_closest;
        let responded = |p: &Path| -> Vec<NodeRecord> {
            p.shortlist
                .values()
                .filter(|c| c.state == CandState::Done)
                .take(k)
                .map(|c| c.rec)
                .collect()
        };
        let paths: Vec<Vec<NodeRecord>> = op.paths.iter().map(responded).collect();
        let mut merged: BTreeMap<NodeId, NodeRecord> = BTreeMap::new();
        for r in paths.iter().flatten() {
            merged.insert(r.node_id.xor(&op.target), *r);
        }
        let closest: Vec<NodeRecord> = merged.values().take(k).copied().collect();
        let trace = op.trace(now);
        match op.kind.clone() {
            OpKind::Lookup => {
                let r = if closest.is_empty() {
                    Err(DhtError::LookupFailed { trace })
                } else {
                    Ok(LookupResult { closest, paths, trace })
                };
                self.finish(id, OpOutcome::Lookup(r));
            }
            OpKind::Put(value) => {
                if closest.is_empty() {
                    self.finish(id, OpOutcome::Put(Err(DhtError::LookupFailed { trace })));
                    return;
                }
                let (origin, key) = (op.origin, op.target);
                let bytes = self.params.value_bytes;
                let stored_at: Vec<NodeIdx> = closest.iter().map(|r| r.addr).collect();
                for &to in &stored_at {
                    self.send(origin, to, bytes, MessageClass::CellTransfer, DhtMessage::Store { key, value });
                }
                self.finish(id, OpOutcome::Put(Ok(PutResult { stored_at, trace })));
            }
            OpKind::Get => {
                let err = if op.verification_failures > 0 {
                    DhtError::VerificationFailed { trace }
                } else if closest.is_empty() && !op.failed.is_empty() {
                    DhtError::LookupFailed { trace }
                } else {
                    DhtError::NotFound { trace }
                };
                self.finish(id, OpOutcome::Get(Err(err)));
            }
            OpKind::Region { region, .. } => {
                let mut st = RegionState::default();
                let op = self.ops[id as usize].as_ref().expect("live");
                let origin = op.origin;
                let mut outside: BTreeMap<NodeId, NodeRecord> = BTreeMap::new();
                for p in &op.paths {
                    for c in p.shortlist.values() {
                        if c.state == CandState::Failed {
                            continue;
                        }
                        if region.contains(&c.rec.node_id) {
                            st.members.insert(c.rec.addr, c.rec);
                        } else if c.rec.addr != origin {
                            outside.insert(c.rec.node_id.xor(&op.target), c.rec);
                        }
                    }
                }
                for r in self.network.node(origin).table.in_region(region.prefix(), region.depth()) {
                    st.members.insert(r.addr, r);
                }
                // the nearest non-members also get asked for the region
                // contacts they know, so a region crowded by Sybils that only
                // name each other is still entered through honest neighbours
                let mut seen = BTreeSet::new();
                st.gateways = outside
                    .values()
                    .filter(|r| !st.members.contains_key(&r.addr) && seen.insert(r.addr))
                    .take(op.cfg.k_closest)
                    .map(|r| r.addr)
                    .collect();
                if region.contains(&self.network.node(origin).node_id) {
                    st.members.insert(origin, self.network.record(origin));
                    st.queried.insert(origin);
                    if let Some(v) = self.network.node(origin).store.get(&op.key).copied() {
                        st.values.push((origin, v));
                        if self.verify(&v) {
                            st.verified = Some((origin, v));
                        }
                    }
                }
                let op = self.ops[id as usize].as_mut().expect("live");
                op.region = Some(st);
                self.region_round(id);
            }
        }
    }

    /// One enumeration round: query every member not yet asked; once none
    /// are left, probe random in-region targets. Ends after two consecutive
    /// rounds without new members.
    fn region_round(&mut self, id: OpId) {
        let Some(op) = self.ops[id as usize].as_mut() else {
            return;
        };
        let OpKind::Region { region, stop_on_value, .. } = op.kind else {
            unreachable!()
        };
        let st = op.region.as_mut().expect("region phase");
        if stop_on_value && st.verified.is_some() {
            self.finish_region(id);
            return;
        }
        if !st.pending.is_empty() {
            return;
        }
        if st.rounds > 0 {
            if st.found_this_round {
                st.idle_rounds = 0;
            } else {
                st.idle_rounds += 1;
            }
        }
        if st.idle_rounds >= 2 {
            self.finish_region(id);
            return;
        }
        st.found_this_round = false;
        let (origin, key, timeout) = (op.origin, op.key, op.cfg.timeout_us);
        let mut queries: Vec<(NodeIdx, Option<NodeId>)> = st
            .members
            .keys()
            .filter(|a| !st.queried.contains(a))
            .map(|a| (*a, None))
            .collect();
        if st.rounds == 0 {
            queries.extend(st.gateways.iter().filter(|a| !st.queried.contains(a)).map(|a| (*a, None)));
        }
        if queries.is_empty() {
            let mut answered: Vec<NodeIdx> =
                st.queried.iter().copied().filter(|a| *a != origin && !op.failed.contains(a)).collect();
            answered.shuffle(&mut self.rng);
            for addr in answered.into_iter().take(op.cfg.alpha) {
                queries.push((addr, Some(region.random_id(&mut self.rng))));
            }
            if queries.is_empty() {
                self.finish_region(id);
                return;
            }
        }
        st.rounds += 1;
        op.forward_hops += 1;
        for (addr, _) in &queries {
            st.queried.insert(*addr);
            st.pending.insert(*addr);
            op.contacted.insert(*addr);
        }
        for (addr, probe) in queries {
            self.send(
                origin,
                addr,
                REQUEST_BYTES,
                MessageClass::Signaling,
                DhtMessage::RegionQuery {
                    op: id,
                    region,
                    key,
                    probe,
                },
            );
            self.timer(origin, timeout, DhtMessage::RegionTimeout { op: id, addr });
        }
    }

    fn finish_region(&mut self, id: OpId) {
        let now = self.sim.now_us();
        let op = self.ops[id as usize].as_ref().expect("live");
        let OpKind::Region { region, store, .. } = op.kind else {
            unreachable!()
        };
        let st = op.region.as_ref().expect("region phase");
        let trace = op.trace(now);
        if st.members.is_empty() {
            self.finish(id, OpOutcome::Region(Err(DhtError::RegionEmpty { trace })));
            return;
        }
        let members: Vec<NodeIdx> = st.members.keys().copied().collect();
        let result = RegionResult {
            region,
            members: members.clone(),
            values: st.values.clone(),
            verified: st.verified,
            trace,
        };
        let (origin, key) = (op.origin, op.key);
        if let Some(value) = store {
            let bytes = self.params.value_bytes;
            for &m in &members {
                if m == origin {
                    self.network.node_mut(origin).store.insert(key, value);
                } else {
                    self.send(origin, m, bytes, MessageClass::CellTransfer, DhtMessage::Store { key, value });
                }
            }
        }
        self.finish(id, OpOutcome::Region(Ok(result)));
    }

    fn forged_for(&self, key: &Key) -> Option<CellPayload> {
        self.key_coords.get(key).map(|c| CellPayload::forged(*c))
    }

    fn malicious_contacts(&mut self, behavior: Behavior, target: &NodeId, k: usize) -> Vec<NodeRecord> {
        match behavior {
            Behavior::Hijacker => self.network.fabricated_records(target, k, &mut self.rng),
            _ => self.network.sybil_closest(target, k),
        }
    }

    fn handle(&mut self, kind: EventKind<DhtMessage>) {
        match kind {
            EventKind::MessageDelivery { from, to, message, .. } => self.on_message(from, to, message),
            EventKind::TimerExpiry { token, .. } => self.on_timer(token),
            EventKind::SlotBoundary { .. } => {}
        }
    }

    fn on_timer(&mut self, token: DhtMessage) {
        match token {
            DhtMessage::Start { op } => {
                if let Some(o) = self.pending_start.remove(&op) {
                    self.ops[op as usize] = Some(o);
                    self.begin(op);
                }
            }
            DhtMessage::QueryTimeout { op, path, queried } => {
                if self.settle(op, path as usize, queried, CandState::Failed, &[]) {
                    self.advance_path(op, path as usize);
                    self.maybe_finish_search(op);
                }
            }
            DhtMessage::RegionTimeout { op, addr } => {
                let Some(o) = self.ops[op as usize].as_mut() else {
                    return;
                };
                if let Some(st) = o.region.as_mut() {
                    if st.pending.remove(&addr) {
                        o.failed.insert(addr);
                        self.region_round(op);
                    }
                }
            }
            DhtMessage::OpTimeout { op } => {
                let now = self.sim.now_us();
                let Some(o) = self.ops[op as usize].as_ref() else {
                    return;
                };
                if o.forwarding {
                    let trace = o.trace(now);
                    let err = DhtError::LookupFailed { trace };
                    let outcome = match o.kind {
                        OpKind::Get => OpOutcome::Get(Err(err)),
                        OpKind::Put(_) => OpOutcome::Put(Err(err)),
                        _ => OpOutcome::Lookup(Err(err)),
                    };
                    self.finish(op, outcome);
                }
            }
            _ => {}
        }
    }

    fn on_message(&mut self, from: NodeIdx, to: NodeIdx, msg: DhtMessage) {
        let behavior = self.network.node(to).behavior;
        let k = self.network.config().bucket_capacity;
        match msg {
            DhtMessage::FindNode {
                op,
                path,
                queried,
                target,
                want_value,
            } => {
                if behavior == Behavior::Unresponsive {
                    return;
                }
                self.learn(to, from);
                if behavior.is_malicious() {
                    if want_value && behavior == Behavior::Sybil {
                        if let Some(value) = self.forged_for(&target) {
                            let bytes = self.params.value_bytes;
                            self.send(to, from, bytes, MessageClass::CellTransfer, DhtMessage::Value { op, path, queried, value });
                            return;
                        }
                    }
                    let contacts = self.malicious_contacts(behavior, &target, k);
                    let bytes = RESPONSE_HEADER_BYTES + CONTACT_BYTES * contacts.len() as u64;
                    self.send(to, from, bytes, MessageClass::Signaling, DhtMessage::Nodes { op, path, queried, contacts });
                    return;
                }
                let node = self.network.node(to);
                if want_value {
                    if let Some(value) = node.store.get(&target).copied() {
                        let bytes = self.params.value_bytes;
                        self.send(to, from, bytes, MessageClass::CellTransfer, DhtMessage::Value { op, path, queried, value });
                        return;
                    }
                }
                let contacts = node.table.closest(&target, k);
                let bytes = RESPONSE_HEADER_BYTES + CONTACT_BYTES * contacts.len() as u64;
                self.send(to, from, bytes, MessageClass::Signaling, DhtMessage::Nodes { op, path, queried, contacts });
            }
            DhtMessage::Nodes {
                op,
                path,
                queried,
                contacts,
            } => {
                self.learn(to, from);
                if self.settle(op, path as usize, queried, CandState::Done, &contacts) {
                    self.advance_path(op, path as usize);
                    self.maybe_finish_search(op);
                }
            }
            DhtMessage::Value { op, path, queried, value } => {
                let ok = self.verify(&value);
                if ok {
                    if let Some(o) = self.ops[op as usize].as_ref() {
                        if matches!(o.kind, OpKind::Get) {
                            let trace = o.trace(self.sim.now_us());
                            self.finish(op, OpOutcome::Get(Ok(GetResult { value, holder: from, trace })));
                        }
                    }
                    return;
                }
                if let Some(o) = self.ops[op as usize].as_mut() {
                    o.verification_failures += 1;
                }
                if self.settle(op, path as usize, queried, CandState::Done, &[]) {
                    self.advance_path(op, path as usize);
                    self.maybe_finish_search(op);
                }
            }
            DhtMessage::Store { key, value } => {
                if behavior == Behavior::Honest {
                    self.network.node_mut(to).store.insert(key, value);
                }
            }
            DhtMessage::Forward {
                op,
                origin,
                target,
                want_value,
                hops,
            } => {
                if behavior != Behavior::Honest {
                    if let Some(o) = self.ops[op as usize].as_mut() {
                        o.dropped_by.get_or_insert(to);
                    }
                    return;
                }
                let node = self.network.node(to);
                if want_value {
                    if let Some(value) = node.store.get(&target).copied() {
                        let bytes = self.params.value_bytes;
                        let queried = node.node_id;
                        if let Some(o) = self.ops[op as usize].as_mut() {
                            o.forward_hops = hops;
                        }
                        self.send(to, origin, bytes, MessageClass::CellTransfer, DhtMessage::Value { op, path: 0, queried, value });
                        return;
                    }
                }
                let own = node.node_id.xor(&target);
                let next = node.table.closest(&target, 1);
                match next.first() {
                    Some(n) if n.node_id.xor(&target) < own && n.addr != origin => {
                        let next_addr = n.addr;
                        if let Some(o) = self.ops[op as usize].as_mut() {
                            o.contacted.insert(next_addr);
                        }
                        self.send(
                            to,
                            next_addr,
                            REQUEST_BYTES,
                            MessageClass::Signaling,
                            DhtMessage::Forward {
                                op,
                                origin,
                                target,
                                want_value,
                                hops: hops + 1,
                            },
                        );
                    }
                    _ => {
                        let mut contacts = vec![self.network.record(to)];
                        contacts.extend(node.table.closest(&target, k - 1));
                        let bytes = RESPONSE_HEADER_BYTES + CONTACT_BYTES * contacts.len() as u64;
                        self.send(to, origin, bytes, MessageClass::Signaling, DhtMessage::ForwardResult { op, hops, contacts });
                    }
                }
            }
            DhtMessage::ForwardResult { op, hops, contacts } => {
                let Some(o) = self.ops[op as usize].as_mut() else {
                    return;
                };
                if !o.forwarding {
                    return;
                }
                o.forwarding = false;
                o.forward_hops = hops + 1;
                // the origin finishes with batched queries over the returned set
                o.cfg.alpha = o.cfg.k_closest;
                o.visited.insert(contacts[0].node_id);
                let own = self.network.node(o.origin).node_id;
                for (i, rec) in contacts.iter().enumerate() {
                    if rec.node_id == own {
                        continue;
                    }
                    let state = if i == 0 { CandState::Done } else { CandState::Fresh };
                    o.paths[0].shortlist.insert(rec.node_id.xor(&o.target), Cand { rec: *rec, state });
                }
                for p in 1..o.paths.len() {
                    o.paths[p].done = true;
                }
                self.advance_path(op, 0);
                self.maybe_finish_search(op);
            }
            DhtMessage::RegionQuery { op, region, key, probe } => {
                if behavior == Behavior::Unresponsive {
                    return;
                }
                let (members, value) = if behavior.is_malicious() {
                    let target = probe.unwrap_or(key);
                    let m: Vec<NodeRecord> = self
                        .network
                        .sybil_closest(&target, k)
                        .into_iter()
                        .filter(|r| region.contains(&r.node_id))
                        .collect();
                    (m, self.forged_for(&key))
                } else {
                    let node = self.network.node(to);
                    let m = match probe {
                        Some(t) => node.table.closest(&t, k).into_iter().filter(|r| region.contains(&r.node_id)).collect(),
                        None => node.table.in_region(region.prefix(), region.depth()),
                    };
                    (m, node.store.get(&key).copied())
                };
                let mut bytes = RESPONSE_HEADER_BYTES + CONTACT_BYTES * members.len() as u64;
                let mut class = MessageClass::Signaling;
                if value.is_some() {
                    bytes += self.params.value_bytes;
                    class = MessageClass::CellTransfer;
                }
                self.send(to, from, bytes, class, DhtMessage::RegionReply { op, members, value });
            }
            DhtMessage::RegionReply { op, members, value } => {
                let verified = value.map(|v| self.verify(&v));
                let Some(o) = self.ops[op as usize].as_mut() else {
                    return;
                };
                let Some(st) = o.region.as_mut() else {
                    return;
                };
                if !st.pending.remove(&from) {
                    return;
                }
                let OpKind::Region { region, .. } = o.kind else {
                    unreachable!()
                };
                for m in members {
                    if region.contains(&m.node_id) && !st.members.contains_key(&m.addr) {
                        st.members.insert(m.addr, m);
                        st.found_this_round = true;
                    }
                }
                if let Some(v) = value {
                    st.values.push((from, v));
                    if verified == Some(true) && st.verified.is_none() {
                        st.verified = Some((from, v));
                    }
                }
                self.region_round(op);
            }
            DhtMessage::Start { .. }
            | DhtMessage::QueryTimeout { .. }
            | DhtMessage::RegionTimeout { .. }
            | DhtMessage::OpTimeout { .. } => {}
        }
    }
}
