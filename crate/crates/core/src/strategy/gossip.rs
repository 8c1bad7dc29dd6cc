use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{account_header, apply_bandwidth, collect_results, Receipts, SlotInput, StrategyConfig, StrategyError, StrategyKind, StrategyOutcome};
use crate::model::{BlobGeometry, CellCoordinate, DeterministicRng, Role};
use crate::sampling::SampleMode;
use crate::sim::{EventKind, MessageClass, NodeIdx, SimError, Simulator};

/// GRAFT, PRUNE or heartbeat.
pub const CONTROL_BYTES: u64 = 40;
/// One topic in a subscription announcement.
pub const TOPIC_ENTRY_BYTES: u64 = 40;
const SIGNAL_HEADER_BYTES: u64 = 64;
const PULL_CELL_BYTES: u64 = 8;
const CONTACT_BYTES: u64 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopicId {
    Row(u32),
    Col(u32),
    Cell(CellCoordinate),
}

impl TopicId {
    pub fn contains(&self, c: CellCoordinate) -> bool {
        match *self {
            TopicId::Row(r) => c.row == r,
            TopicId::Col(col) => c.col == col,
            TopicId::Cell(x) => x == c,
        }
    }
}

/// Topics a blob needs: one per row and column, or one per cell.
pub fn topic_count(geometry: &BlobGeometry, per_cell_topics: bool) -> u64 {
    if per_cell_topics {
        geometry.total_cells()
    } else {
        geometry.extended_rows() as u64 + geometry.extended_cols() as u64
    }
}

fn default_degree() -> usize {
    8
}
fn default_epoch() -> u64 {
    1
}
fn default_connected() -> usize {
    50
}
fn default_pull_timeout() -> u64 {
    1000
}
fn default_candidates() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipConfig {
    #[serde(default = "default_degree")]
    pub mesh_degree: usize,
    /// Extra selection weight of staking peers: `1 + beta`.
    #[serde(default)]
    pub stake_bias: f64,
    #[serde(default)]
    pub per_cell_topics: bool,
    /// Slots a validator keeps its rows and columns.
    #[serde(default = "default_epoch")]
    pub membership_epoch: u64,
    /// Peers each node announces its subscriptions to.
    #[serde(default = "default_connected")]
    pub connected_peers: usize,
    #[serde(default = "default_pull_timeout")]
    pub pull_timeout_ms: u64,
    /// Members the directory returns per line.
    #[serde(default = "default_candidates")]
    pub pull_candidates: usize,
    #[serde(default)]
    pub score: PeerScore,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            mesh_degree: default_degree(),
            stake_bias: 0.0,
            per_cell_topics: false,
            membership_epoch: default_epoch(),
            connected_peers: default_connected(),
            pull_timeout_ms: default_pull_timeout(),
            pull_candidates: default_candidates(),
            score: PeerScore::default(),
        }
    }
}

impl GossipConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |field, reason: &str| {
            Err(StrategyError::Invalid {
                field,
                reason: reason.to_string(),
            })
        };
        if self.mesh_degree == 0 {
            return bad("gossip.mesh_degree", "must be at least 1");
        }
        if self.membership_epoch == 0 {
            return bad("gossip.membership_epoch", "must be at least 1");
        }
        if !(self.stake_bias >= 0.0 && self.stake_bias.is_finite()) {
            return bad("gossip.stake_bias", "must be a non-negative number");
        }
        if self.pull_candidates == 0 {
            return bad("gossip.pull_candidates", "must be at least 1");
        }
        Ok(())
    }
}

/// Score weights and the prune threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerScore {
    pub delivery_credit: i64,
    pub invalid_penalty: i64,
    pub timeout_penalty: i64,
    pub prune_threshold: i64,
}

impl Default for PeerScore {
    fn default() -> Self {
        PeerScore {
            delivery_credit: 1,
            invalid_penalty: -10,
            timeout_penalty: -1,
            prune_threshold: -5,
        }
    }
}

impl PeerScore {
    pub fn is_pruned(&self, score: i64) -> bool {
        score <= self.prune_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreEvent {
    /// First delivery of a valid cell.
    FirstDelivery,
    InvalidCell,
    Timeout,
}

pub fn update_peer_score(score: i64, event: ScoreEvent, weights: &PeerScore) -> i64 {
    score
        + match event {
            ScoreEvent::FirstDelivery => weights.delivery_credit,
            ScoreEvent::InvalidCell => weights.invalid_penalty,
            ScoreEvent::Timeout => weights.timeout_penalty,
        }
}

/// `degree` distinct candidates drawn with weight `1 + beta` for staking
/// ones and 1 otherwise. Returns every candidate when there are too few.
pub fn select_peers_stake_preferred<T: Copy, R: Rng + ?Sized>(candidates: &[(T, bool)], rng: &mut R, degree: usize, beta: f64) -> Vec<T> {
    if degree >= candidates.len() {
        return candidates.iter().map(|c| c.0).collect();
    }
    let picks = index::sample_weighted(rng, candidates.len(), |i| if candidates[i].1 { 1.0 + beta } else { 1.0 }, degree)
        .expect("positive finite weights");
    picks.into_iter().map(|i| candidates[i].0).collect()
}

/// One dissemination structure and its mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicMesh {
    pub topic: TopicId,
    pub members: Vec<NodeIdx>,
    pub adjacency: BTreeMap<NodeIdx, Vec<NodeIdx>>,
    pub mesh_degree: usize,
    pub membership_epoch: u64,
}

impl TopicMesh {
    pub fn neighbors(&self, node: NodeIdx) -> &[NodeIdx] {
        self.adjacency.get(&node).map_or(&[], |v| v.as_slice())
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.values().map(Vec::len).max().unwrap_or(0)
    }

    fn edges(&self) -> BTreeSet<(NodeIdx, NodeIdx)> {
        self.adjacency
            .iter()
            .flat_map(|(&u, vs)| vs.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }
}

/// Keeps the surviving edges of `old` (minus `excluded` pairs), then tops
/// every member up to `degree` neighbours, never exceeding it.
fn maintain_mesh<R: Rng + ?Sized>(
    topic: TopicId,
    members: &[NodeIdx],
    old: Option<&TopicMesh>,
    staking: &dyn Fn(NodeIdx) -> bool,
    excluded: &dyn Fn(NodeIdx, NodeIdx) -> bool,
    config: &GossipConfig,
    rng: &mut R,
) -> TopicMesh {
    let d = config.mesh_degree;
    let mut adj: BTreeMap<NodeIdx, BTreeSet<NodeIdx>> = members.iter().map(|&m| (m, BTreeSet::new())).collect();
    if let Some(old) = old {
        for (u, v) in old.edges() {
            if adj.contains_key(&u) && adj.contains_key(&v) && !excluded(u, v) && !excluded(v, u) {
                adj.get_mut(&u).expect("member").insert(v);
                adj.get_mut(&v).expect("member").insert(u);
            }
        }
    }
    let mut order = members.to_vec();
    order.shuffle(rng);
    for &u in &order {
        let need = d.saturating_sub(adj[&u].len());
        if need == 0 {
            continue;
        }
        let cands: Vec<(NodeIdx, bool)> = members
            .iter()
            .filter(|&&v| v != u && adj[&v].len() < d && !adj[&u].contains(&v) && !excluded(u, v) && !excluded(v, u))
            .map(|&v| (v, staking(v)))
            .collect();
        for v in select_peers_stake_preferred(&cands, rng, need, config.stake_bias) {
            adj.get_mut(&u).expect("member").insert(v);
            adj.get_mut(&v).expect("member").insert(u);
        }
    }
    TopicMesh {
        topic,
        members: members.to_vec(),
        adjacency: adj.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        mesh_degree: d,
        membership_epoch: config.membership_epoch,
    }
}

/// Topic memberships implied by the assignments: validators join the topics
/// of their rows and columns; with per-cell topics every sampler joins one
/// topic per assigned cell.
pub fn subscriptions(input: &SlotInput<'_>, per_cell: bool) -> Vec<BTreeSet<TopicId>> {
    let mut subs = vec![BTreeSet::new(); input.nodes.len()];
    for (node, a) in input.sampling_nodes() {
        let s = &mut subs[node as usize];
        if per_cell {
            s.extend(a.cells.iter().map(|&c| TopicId::Cell(c)));
        } else if a.mode == SampleMode::ValidatorLines {
            s.extend(a.rows.iter().map(|&r| TopicId::Row(r)));
            s.extend(a.cols.iter().map(|&c| TopicId::Col(c)));
        }
    }
    subs
}

fn members_by_topic(subs: &[BTreeSet<TopicId>]) -> BTreeMap<TopicId, Vec<NodeIdx>> {
    let mut m: BTreeMap<TopicId, Vec<NodeIdx>> = BTreeMap::new();
    for (u, s) in subs.iter().enumerate() {
        for t in s {
            m.entry(*t).or_default().push(u as NodeIdx);
        }
    }
    m
}

/// Fresh meshes for every subscribed topic.
pub fn build_meshes(input: &SlotInput<'_>, config: &GossipConfig) -> BTreeMap<TopicId, TopicMesh> {
    let subs = subscriptions(input, config.per_cell_topics);
    let mut rng = DeterministicRng::derive(input.seed, "mesh", &[input.slot]);
    let staking = |v: NodeIdx| input.nodes[v as usize].is_staking();
    members_by_topic(&subs)
        .into_iter()
        .map(|(t, m)| (t, maintain_mesh(t, &m, None, &staking, &|_, _| false, config, &mut rng)))
        .collect()
}

/// Random overlay where every node picks `degree` peers, staking peers
/// weighted by `1 + beta`; links are bidirectional.
pub fn build_overlay<R: Rng + ?Sized>(staking: &[bool], degree: usize, beta: f64, rng: &mut R) -> Vec<Vec<NodeIdx>> {
    let n = staking.len();
    let mut adj = vec![BTreeSet::new(); n];
    for u in 0..n {
        let cands: Vec<(NodeIdx, bool)> = (0..n).filter(|&v| v != u).map(|v| (v as NodeIdx, staking[v])).collect();
        for v in select_peers_stake_preferred(&cands, rng, degree, beta) {
            adj[u].insert(v);
            adj[v as usize].insert(u as NodeIdx);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Whether `subset` is connected using only edges inside it.
pub fn subgraph_connected(adj: &[Vec<NodeIdx>], subset: &[NodeIdx]) -> bool {
    let Some(&start) = subset.first() else {
        return true;
    };
    let inside: HashSet<NodeIdx> = subset.iter().copied().collect();
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u as usize] {
            if inside.contains(&v) && seen.insert(v) {
                queue.push_back(v);
            }
        }
    }
    seen.len() == inside.len()
}

/// Scores, meshes and subscriptions carried across slots.
#[derive(Debug, Clone, Default)]
pub struct GossipState {
    /// `(u, v)`: u's score of v.
    pub scores: HashMap<(NodeIdx, NodeIdx), i64>,
    pub meshes: BTreeMap<TopicId, TopicMesh>,
    pub subscriptions: Vec<BTreeSet<TopicId>>,
}

impl GossipState {
    pub fn score(&self, u: NodeIdx, v: NodeIdx) -> i64 {
        self.scores.get(&(u, v)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
enum Msg {
    Cells { cells: Vec<CellCoordinate>, pulled: bool },
    Subscribe,
    Graft,
    Prune,
    Heartbeat,
    DirectoryQuery,
    DirectoryReply { candidates: Vec<(CellCoordinate, Vec<NodeIdx>)> },
    Pull { cells: Vec<CellCoordinate> },
    DirectoryTimeout,
    PullTimeout,
}

#[derive(Debug, Default)]
struct PullState {
    candidates: BTreeMap<CellCoordinate, Vec<NodeIdx>>,
    attempt: usize,
    directory_tries: usize,
}

struct Run<'a, 'b> {
    input: &'a SlotInput<'b>,
    config: &'a GossipConfig,
    sim: Simulator<Msg>,
    subs: Vec<BTreeSet<TopicId>>,
    meshes: &'a BTreeMap<TopicId, TopicMesh>,
    members: BTreeMap<TopicId, Vec<NodeIdx>>,
    peers: Vec<Vec<NodeIdx>>,
    receipts: Receipts,
    mesh_receipts: HashMap<(NodeIdx, CellCoordinate), u32>,
    pending: HashMap<NodeIdx, BTreeMap<CellCoordinate, Vec<NodeIdx>>>,
    pulls: HashMap<NodeIdx, PullState>,
    heard: HashSet<(NodeIdx, NodeIdx)>,
    credit: HashMap<(NodeIdx, NodeIdx), i64>,
    timeouts: Vec<(NodeIdx, NodeIdx)>,
    rng: DeterministicRng,
}

impl Run<'_, '_> {
    fn defecting(&self, u: NodeIdx) -> bool {
        self.input.adversary.defecting.contains(&u)
    }

    fn send(&mut self, from: NodeIdx, to: NodeIdx, bytes: u64, class: MessageClass, msg: Msg) -> Result<(), SimError> {
        self.sim.send(from, to, bytes, class, msg).map(|_| ())
    }

    fn send_cells(&mut self, from: NodeIdx, to: NodeIdx, cells: Vec<CellCoordinate>, pulled: bool) -> Result<(), SimError> {
        let bytes = cells.len() as u64 * self.input.geometry.cell_wire_bytes();
        self.send(from, to, bytes, MessageClass::CellTransfer, Msg::Cells { cells, pulled })
    }

    fn holds(&self, u: NodeIdx, c: &CellCoordinate) -> bool {
        if u == self.input.producer {
            !self.input.adversary.withheld.contains(c)
        } else {
            self.receipts.has(u, c)
        }
    }

    fn mesh_neighbors(&self, u: NodeIdx) -> BTreeSet<NodeIdx> {
        self.subs[u as usize]
            .iter()
            .flat_map(|t| self.meshes[t].neighbors(u).iter().copied())
            .collect()
    }

    fn on_cells(&mut self, from: NodeIdx, to: NodeIdx, cells: Vec<CellCoordinate>, pulled: bool, now: u64) -> Result<(), SimError> {
        if self.defecting(to) {
            return Ok(());
        }
        self.heard.insert((to, from));
        let from_mesh = !pulled && from != self.input.producer;
        let mut fresh = Vec::new();
        for c in cells {
            if from_mesh {
                *self.mesh_receipts.entry((to, c)).or_insert(0) += 1;
            }
            if self.receipts.record(to, c, now) {
                fresh.push(c);
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        if from_mesh {
            *self.credit.entry((to, from)).or_insert(0) += fresh.len() as i64;
        }
        let mut out: BTreeMap<NodeIdx, BTreeSet<CellCoordinate>> = BTreeMap::new();
        for t in &self.subs[to as usize] {
            let nbrs = self.meshes[t].neighbors(to);
            if nbrs.is_empty() {
                continue;
            }
            for &c in fresh.iter().filter(|c| t.contains(**c)) {
                for &v in nbrs {
                    if v != from {
                        out.entry(v).or_default().insert(c);
                    }
                }
            }
        }
        for (v, cells) in out {
            self.send_cells(to, v, cells.into_iter().collect(), false)?;
        }
        if let Some(waiting) = self.pending.get_mut(&to) {
            let mut serve: BTreeMap<NodeIdx, Vec<CellCoordinate>> = BTreeMap::new();
            for c in &fresh {
                if let Some(reqs) = waiting.remove(c) {
                    for r in reqs {
                        serve.entry(r).or_default().push(*c);
                    }
                }
            }
            for (r, cells) in serve {
                self.send_cells(to, r, cells, true)?;
            }
        }
        Ok(())
    }

    fn on_pull(&mut self, from: NodeIdx, to: NodeIdx, cells: Vec<CellCoordinate>) -> Result<(), SimError> {
        if self.defecting(to) {
            return Ok(());
        }
        let (have, missing): (Vec<_>, Vec<_>) = cells.into_iter().partition(|c| self.holds(to, c));
        if !have.is_empty() {
            self.send_cells(to, from, have, true)?;
        }
        let waiting = self.pending.entry(to).or_default();
        for c in missing {
            waiting.entry(c).or_default().push(from);
        }
        Ok(())
    }

    fn directory_candidates(&mut self, cells: &[CellCoordinate]) -> Vec<(CellCoordinate, Vec<NodeIdx>)> {
        let k = self.config.pull_candidates;
        let mut by_line: BTreeMap<TopicId, Vec<NodeIdx>> = BTreeMap::new();
        let mut out = Vec::with_capacity(cells.len());
        for &c in cells {
            let mut cands = Vec::new();
            for t in [TopicId::Row(c.row), TopicId::Col(c.col)] {
                if let std::collections::btree_map::Entry::Vacant(e) = by_line.entry(t) {
                    let mut m = self.members.get(&t).cloned().unwrap_or_default();
                    m.shuffle(&mut self.rng);
                    m.truncate(k);
                    e.insert(m);
                }
                cands.extend(by_line[&t].iter().copied());
            }
            cands.push(self.input.producer);
            out.push((c, cands));
        }
        out
    }

    fn send_pulls(&mut self, u: NodeIdx) -> Result<bool, SimError> {
        let Some(state) = self.pulls.get(&u) else {
            return Ok(false);
        };
        let attempt = state.attempt;
        let mut by_target: BTreeMap<NodeIdx, Vec<CellCoordinate>> = BTreeMap::new();
        for (c, cands) in &state.candidates {
            if self.receipts.has(u, c) {
                continue;
            }
            if let Some(&t) = cands.get(attempt) {
                by_target.entry(t).or_default().push(*c);
            }
        }
        let any = !by_target.is_empty();
        for (t, cells) in by_target {
            let bytes = SIGNAL_HEADER_BYTES + PULL_CELL_BYTES * cells.len() as u64;
            if t == u {
                continue;
            }
            self.send(u, t, bytes, MessageClass::Signaling, Msg::Pull { cells })?;
        }
        Ok(any)
    }

    fn query_directory(&mut self, u: NodeIdx) -> Result<(), SimError> {
        let tries = self.pulls.entry(u).or_default().directory_tries;
        let Some(&peer) = self.peers[u as usize].get(tries) else {
            return Ok(());
        };
        self.pulls.get_mut(&u).expect("state").directory_tries += 1;
        let cells = self.input.assignments[u as usize].as_ref().map_or(0, |a| a.pull_cells().len()) as u64;
        self.send(u, peer, SIGNAL_HEADER_BYTES + PULL_CELL_BYTES * cells, MessageClass::Signaling, Msg::DirectoryQuery)?;
        self.sim
            .schedule_after(u, self.config.pull_timeout_ms * 1000, Msg::DirectoryTimeout)
            .map(|_| ())
    }

    fn on_timer(&mut self, u: NodeIdx, token: Msg) -> Result<(), SimError> {
        let Some(state) = self.pulls.get(&u) else {
            return Ok(());
        };
        match token {
            Msg::DirectoryTimeout if state.candidates.is_empty() => return self.query_directory(u),
            Msg::PullTimeout => {}
            _ => return Ok(()),
        }
        let attempt = state.attempt;
        let stale: BTreeSet<NodeIdx> = state
            .candidates
            .iter()
            .filter(|(c, _)| !self.receipts.has(u, c))
            .filter_map(|(_, cands)| cands.get(attempt).copied())
            .collect();
        if stale.is_empty() {
            return Ok(());
        }
        self.timeouts.extend(stale.into_iter().map(|v| (u, v)));
        self.pulls.get_mut(&u).expect("state").attempt += 1;
        self.pull_round(u)
    }

    fn pull_round(&mut self, u: NodeIdx) -> Result<(), SimError> {
        if self.send_pulls(u)? {
            self.sim.schedule_after(u, self.config.pull_timeout_ms * 1000, Msg::PullTimeout)?;
        }
        Ok(())
    }

    fn handle(&mut self, from: NodeIdx, to: NodeIdx, msg: Msg, now: u64) -> Result<(), SimError> {
        match msg {
            Msg::Cells { cells, pulled } => self.on_cells(from, to, cells, pulled, now),
            Msg::Heartbeat | Msg::Graft => {
                if !self.defecting(to) {
                    self.heard.insert((to, from));
                }
                Ok(())
            }
            Msg::Subscribe | Msg::Prune | Msg::DirectoryTimeout | Msg::PullTimeout => Ok(()),
            Msg::DirectoryQuery => {
                if self.defecting(to) {
                    return Ok(());
                }
                let cells: Vec<CellCoordinate> = self.input.assignments[from as usize]
                    .as_ref()
                    .map(|a| a.pull_cells().iter().copied().collect())
                    .unwrap_or_default();
                let candidates = self.directory_candidates(&cells);
                let distinct: BTreeSet<NodeIdx> = candidates.iter().flat_map(|(_, c)| c.iter().copied()).collect();
                let bytes = SIGNAL_HEADER_BYTES + CONTACT_BYTES * distinct.len() as u64 + PULL_CELL_BYTES * candidates.len() as u64;
                self.send(to, from, bytes, MessageClass::Signaling, Msg::DirectoryReply { candidates })
            }
            Msg::DirectoryReply { candidates } => {
                let state = self.pulls.entry(to).or_default();
                if !state.candidates.is_empty() {
                    return Ok(());
                }
                state.candidates = candidates.into_iter().collect();
                self.pull_round(to)
            }
            Msg::Pull { cells } => self.on_pull(from, to, cells),
        }
    }
}

fn connected_peers(n: usize, u: NodeIdx, count: usize, seed: u64) -> Vec<NodeIdx> {
    if n <= 1 {
        return Vec::new();
    }
    let mut rng = DeterministicRng::derive(seed, "connected-peers", &[u as u64]);
    index::sample(&mut rng, n - 1, count.min(n - 1))
        .into_iter()
        .map(|i| if i as NodeIdx >= u { i as NodeIdx + 1 } else { i as NodeIdx })
        .collect()
}

/// Producer seeding targets for one cell: members of the row topic, then the
/// column topic, then anyone, so each cell leaves the producer exactly
/// `copies` times.
fn seed_targets<R: RngCore + ?Sized>(
    cands: &[NodeIdx],
    everyone: &[NodeIdx],
    copies: usize,
    rng: &mut R,
) -> Vec<NodeIdx> {
    let mut out: Vec<NodeIdx> = index::sample(rng, cands.len(), copies.min(cands.len()))
        .into_iter()
        .map(|i| cands[i])
        .collect();
    while out.len() < copies.min(everyone.len()) {
        let v = everyone[rng.gen_range(0..everyone.len())];
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Row/column topic meshes with eager push. The producer seeds each cell into
/// `seed_copies` topic members in row-major order; members forward new cells
/// to their mesh neighbours in every topic the cell belongs to. Regular nodes
/// find a row or column member through a one-hop directory query and pull.
pub fn run_gossip(input: &SlotInput<'_>, config: &StrategyConfig, state: &mut GossipState) -> Result<StrategyOutcome, StrategyError> {
    let g = &config.gossip;
    let n = input.nodes.len();
    let producer = input.producer;
    let sim_err = |e: SimError| StrategyError::Sim(e.to_string());
    let mut sim: Simulator<Msg> = Simulator::new(n, input.latency.clone(), input.seed).map_err(sim_err)?;
    apply_bandwidth(&mut sim, input)?;

    let subs = subscriptions(input, g.per_cell_topics);
    let members = members_by_topic(&subs);
    let staking = |v: NodeIdx| input.nodes[v as usize].is_staking();
    let scores = &state.scores;
    let pruned = |u: NodeIdx, v: NodeIdx| g.score.is_pruned(scores.get(&(u, v)).copied().unwrap_or(0));
    let mut mesh_rng = DeterministicRng::derive(input.seed, "mesh", &[input.slot]);
    let mut meshes = BTreeMap::new();
    let (mut grafts, mut prunes) = (Vec::new(), Vec::new());
    for (t, m) in &members {
        let old = state.meshes.get(t).filter(|o| &o.members == m);
        let mesh = maintain_mesh(*t, m, old, &staking, &pruned, g, &mut mesh_rng);
        let new_edges = mesh.edges();
        let old_edges = old.map(TopicMesh::edges).unwrap_or_default();
        grafts.extend(new_edges.difference(&old_edges).copied());
        prunes.extend(old_edges.difference(&new_edges).copied());
        meshes.insert(*t, mesh);
    }
    let prev_subs = if state.subscriptions.len() == n {
        std::mem::take(&mut state.subscriptions)
    } else {
        vec![BTreeSet::new(); n]
    };
    let peers: Vec<Vec<NodeIdx>> = (0..n as NodeIdx).map(|u| connected_peers(n, u, g.connected_peers, input.seed)).collect();

    let mut run = Run {
        input,
        config: g,
        sim,
        subs,
        meshes: &meshes,
        members,
        peers,
        receipts: Receipts::default(),
        mesh_receipts: HashMap::new(),
        pending: HashMap::new(),
        pulls: HashMap::new(),
        heard: HashSet::new(),
        credit: HashMap::new(),
        timeouts: Vec::new(),
        rng: DeterministicRng::derive(input.seed, "gossip", &[input.slot]),
    };

    // control plane
    for u in 0..n as NodeIdx {
        if run.defecting(u) {
            continue;
        }
        let churn = run.subs[u as usize].symmetric_difference(&prev_subs[u as usize]).count() as u64;
        if churn > 0 {
            for i in 0..run.peers[u as usize].len() {
                let p = run.peers[u as usize][i];
                run.send(u, p, SIGNAL_HEADER_BYTES + TOPIC_ENTRY_BYTES * churn, MessageClass::Signaling, Msg::Subscribe)
                    .map_err(sim_err)?;
            }
        }
        for v in run.mesh_neighbors(u) {
            run.send(u, v, CONTROL_BYTES, MessageClass::Signaling, Msg::Heartbeat).map_err(sim_err)?;
        }
    }
    for &(u, v) in &grafts {
        if !run.defecting(u) {
            run.send(u, v, CONTROL_BYTES, MessageClass::Signaling, Msg::Graft).map_err(sim_err)?;
        }
    }
    for &(u, v) in &prunes {
        if !run.defecting(u) {
            run.send(u, v, CONTROL_BYTES, MessageClass::Signaling, Msg::Prune).map_err(sim_err)?;
        }
    }

    // producer seeding, row-major
    let everyone: Vec<NodeIdx> = (0..n as NodeIdx).filter(|&v| v != producer).collect();
    let copies = config.seed_copies as usize;
    let mut seed_rng = DeterministicRng::derive(input.seed, "seeding", &[input.slot]);
    let mut line_seeds: HashMap<TopicId, Vec<NodeIdx>> = HashMap::new();
    for r in 0..input.geometry.extended_rows() {
        let mut batch: BTreeMap<NodeIdx, Vec<CellCoordinate>> = BTreeMap::new();
        for c in 0..input.geometry.extended_cols() {
            let cell = CellCoordinate::new(r, c);
            if input.adversary.withheld.contains(&cell) {
                continue;
            }
            let topics = if g.per_cell_topics {
                vec![TopicId::Cell(cell)]
            } else {
                vec![TopicId::Row(r), TopicId::Col(c)]
            };
            let topic = topics.into_iter().find(|t| run.members.contains_key(t));
            let targets = match topic {
                Some(t) => line_seeds
                    .entry(t)
                    .or_insert_with(|| seed_targets(&run.members[&t], &everyone, copies, &mut seed_rng))
                    .clone(),
                None => seed_targets(&[], &everyone, copies, &mut seed_rng),
            };
            for t in targets {
                batch.entry(t).or_default().push(cell);
            }
        }
        for (t, cells) in batch {
            run.send_cells(producer, t, cells, false).map_err(sim_err)?;
        }
    }

    // individually sampled cells are pulled through the directory
    if !g.per_cell_topics {
        for (u, a) in input.sampling_nodes() {
            if !a.pull_cells().is_empty() && u != producer && !run.defecting(u) {
                run.query_directory(u).map_err(sim_err)?;
            }
        }
    }

    let end = input.params.slot_duration_us();
    while let Some(ev) = run.sim.next_event_until(end) {
        let now = ev.fire_time_us;
        match ev.kind {
            EventKind::MessageDelivery { from, to, message, .. } => run.handle(from, to, message, now).map_err(sim_err)?,
            EventKind::TimerExpiry { node, token } => run.on_timer(node, token).map_err(sim_err)?,
            EventKind::SlotBoundary { .. } => {}
        }
    }

    // scoring: delivery credit, then one timeout per silent mesh neighbour
    let mut timeouts = std::mem::take(&mut run.timeouts);
    for u in 0..n as NodeIdx {
        if run.defecting(u) {
            continue;
        }
        for v in run.mesh_neighbors(u) {
            if !run.heard.contains(&(u, v)) {
                timeouts.push((u, v));
            }
        }
    }
    let trace_hash = run.sim.trace_hash();
    let max_mesh_receipts = run.mesh_receipts.values().copied().max().unwrap_or(0);
    let results = collect_results(input, &run.receipts);
    let credit = std::mem::take(&mut run.credit);
    let mut ledger = run.sim.finalize();
    account_header(&mut ledger, input);
    for ((u, v), c) in credit {
        let s = state.scores.entry((u, v)).or_insert(0);
        *s += c * g.score.delivery_credit;
    }
    for (u, v) in timeouts {
        let s = state.scores.entry((u, v)).or_insert(0);
        *s = update_peer_score(*s, ScoreEvent::Timeout, &g.score);
    }
    let max_degree = meshes.values().map(TopicMesh::max_degree).max().unwrap_or(0);
    let pruned_pairs = state.scores.values().filter(|&&s| g.score.is_pruned(s)).count();
    state.subscriptions = run.subs;
    state.meshes = meshes;

    let mut stats = BTreeMap::new();
    stats.insert("topic_count".into(), topic_count(&input.geometry, g.per_cell_topics) as f64);
    stats.insert("active_topics".into(), state.meshes.len() as f64);
    stats.insert("max_mesh_receipts".into(), max_mesh_receipts as f64);
    stats.insert("max_mesh_degree".into(), max_degree as f64);
    stats.insert("grafts".into(), grafts.len() as f64);
    stats.insert("pruned_pairs".into(), pruned_pairs as f64);
    stats.insert(
        "defecting_validators".into(),
        input
            .adversary
            .defecting
            .iter()
            .filter(|&&d| input.nodes[d as usize].role == Role::Validator)
            .count() as f64,
    );
    Ok(StrategyOutcome {
        slot: input.slot,
        kind: StrategyKind::GossipMesh,
        producer,
        ledger,
        results,
        stats,
        trace_hash,
    })
}
