//! Scenario files: a TOML document describing population, geometry, timing,
//! network, strategy and adversary, plus the runner that turns one into a
//! series of slot reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{plan_slot, AdversarySpec};
use crate::metrics::{write_csv, CostModel, SlotReport, SlotRow};
use crate::model::{BlobGeometry, DeterministicRng, NodeId, NodeProfile, Role, SlotParameters, VALIDATOR_MIN_STAKE};
use crate::sampling::{
    select_k_of_n_sample, select_regular_sample, select_validator_sample, SampleAssignment, REGULAR_SAMPLE_COUNT,
};
use crate::sim::{BandwidthBudget, LatencyModel, NodeIdx};
use crate::strategy::{run_strategy, NodeResult, SlotInput, StrategyConfig, StrategyError, StrategyKind, StrategyState};

/// Index of the block producer in every scenario population.
pub const PRODUCER: NodeIdx = 0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("slot {slot}: {source}")]
    Run { slot: u64, source: StrategyError },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn invalid(field: impl Into<String>, reason: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.to_string(),
    }
}

fn default_stake() -> u64 {
    VALIDATOR_MIN_STAKE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub validators: usize,
    pub regulars: usize,
    #[serde(default = "default_stake")]
    pub validator_stake: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum GeometrySpec {
    #[default]
    Mainnet,
    Custom {
        source_rows: u32,
        source_cols: u32,
        #[serde(default = "default_payload")]
        cell_payload_bytes: u32,
        #[serde(default = "default_proof")]
        proof_bytes: u32,
    },
}

fn default_payload() -> u32 {
    BlobGeometry::MAINNET.cell_payload_bytes
}

fn default_proof() -> u32 {
    BlobGeometry::MAINNET.proof_bytes
}


impl GeometrySpec {
    pub fn resolve(&self) -> BlobGeometry {
        match *self {
            GeometrySpec::Mainnet => BlobGeometry::MAINNET,
            GeometrySpec::Custom {
                source_rows,
                source_cols,
                cell_payload_bytes,
                proof_bytes,
            } => BlobGeometry {
                source_rows,
                source_cols,
                cell_payload_bytes,
                proof_bytes,
            },
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KofN {
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    /// Validators run a regular sample on top of their lines.
    #[serde(default = "yes")]
    pub validators_also_regular: bool,
    /// Regular nodes request `n` cells and need `k` instead of all 75.
    #[serde(default)]
    pub k_of_n: Option<KofN>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            validators_also_regular: true,
            k_of_n: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthSpec {
    #[serde(default)]
    pub producer: Option<BandwidthBudget>,
    /// Applied to every other node.
    #[serde(default)]
    pub nodes: Option<BandwidthBudget>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Directory for the CSV (and plots); the CLI's `--out` overrides it.
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub slots: u64,
    pub population: Population,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub slot: SlotParameters,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub bandwidth: BandwidthSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn geometry(&self) -> BlobGeometry {
        self.geometry.resolve()
    }

    pub fn node_count(&self) -> usize {
        1 + self.population.validators + self.population.regulars
    }

    pub fn is_honest(&self) -> bool {
        self.adversary == AdversarySpec::None
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.population.validators + self.population.regulars == 0 {
            return Err(invalid("population", "needs at least one sampling node"));
        }
        if self.population.validator_stake < VALIDATOR_MIN_STAKE {
            return Err(invalid(
                "population.validator_stake",
                format!("must be at least {VALIDATOR_MIN_STAKE}"),
            ));
        }
        let g = self.geometry();
        g.validate().map_err(|e| invalid("geometry", e))?;
        let p = &self.slot;
        if !(p.validator_deadline > 0.0) {
            return Err(invalid("slot.validator_deadline", "must be positive"));
        }
        if p.validator_deadline > p.slot_duration {
            return Err(invalid("slot.validator_deadline", "exceeds slot.slot_duration"));
        }
        if p.regular_deadline > p.slot_duration {
            return Err(invalid("slot.regular_deadline", "exceeds slot.slot_duration"));
        }
        p.validate().map_err(|e| invalid("slot", e))?;
        self.latency.validate().map_err(|e| invalid("latency", e))?;
        if let Some(kn) = self.sampling.k_of_n {
            if kn.n <= REGULAR_SAMPLE_COUNT || kn.k > kn.n || kn.k == 0 {
                return Err(invalid(
                    "sampling.k_of_n",
                    format!("need {REGULAR_SAMPLE_COUNT} < n and 0 < k <= n"),
                ));
            }
            if kn.n as u64 > g.total_cells() {
                return Err(invalid("sampling.k_of_n.n", "exceeds the extended cell count"));
            }
        }
        if (REGULAR_SAMPLE_COUNT as u64) > g.total_cells() {
            return Err(invalid("geometry", "too small for a regular sample"));
        }
        self.strategy.validate().map_err(|e| match e {
            StrategyError::Invalid { field, reason } => invalid(format!("strategy.{field}"), reason),
            other => invalid("strategy", other),
        })?;
        self.adversary
            .validate(self.node_count())
            .map_err(|e| invalid("adversary", e))?;
        self.cost.validate().map_err(|e| invalid("cost", e))?;
        Ok(())
    }

    /// Producer at index 0, then validators, then regular nodes.
    pub fn population(&self) -> Vec<NodeProfile> {
        let mut rng = DeterministicRng::derive(self.seed, "node-ids", &[]);
        (0..self.node_count())
            .map(|i| {
                let role = if i == 0 {
                    Role::Producer
                } else if i <= self.population.validators {
                    Role::Validator
                } else {
                    Role::Regular
                };
                NodeProfile {
                    node_id: NodeId::random(&mut rng),
                    role,
                    stake: if role == Role::Regular { 0 } else { self.population.validator_stake },
                    subnet: i as u32 & 0x00ff_ffff,
                    honest: true,
                }
            })
            .collect()
    }

    /// Sample assignments for `slot`. Validator lines are redrawn once per
    /// gossip membership epoch; cell samples every slot.
    pub fn assignments(&self, nodes: &[NodeProfile], slot: u64) -> Vec<Option<SampleAssignment>> {
        let g = self.geometry();
        let epoch = slot / self.strategy.gossip.membership_epoch.max(1);
        let regular = |i: usize, id: NodeId| {
            let mut rng = DeterministicRng::derive(self.seed, "regular-sample", &[i as u64, slot]);
            match self.sampling.k_of_n {
                Some(KofN { n, k }) => select_k_of_n_sample(&mut rng, &g, n, k, id),
                None => select_regular_sample(&mut rng, &g, REGULAR_SAMPLE_COUNT, id),
            }
            .expect("validated geometry")
        };
        nodes
            .iter()
            .enumerate()
            .map(|(i, p)| match p.role {
                Role::Producer => None,
                Role::Validator => {
                    let mut rng = DeterministicRng::derive(self.seed, "validator-lines", &[i as u64, epoch]);
                    let lines = select_validator_sample(&mut rng, &g, p.node_id).expect("validated geometry");
                    Some(if self.sampling.validators_also_regular {
                        let r = select_regular_sample(
                            &mut DeterministicRng::derive(self.seed, "regular-sample", &[i as u64, slot]),
                            &g,
                            REGULAR_SAMPLE_COUNT,
                            p.node_id,
                        )
                        .expect("validated geometry");
                        lines.with_regular_sample(&r)
                    } else {
                        lines
                    })
                }
                Role::Regular => Some(regular(i, p.node_id)),
            })
            .collect()
    }

    fn bandwidth(&self) -> Vec<(NodeIdx, BandwidthBudget)> {
        let mut out = Vec::new();
        if let Some(b) = self.bandwidth.nodes {
            out.extend((1..self.node_count()).map(|i| (i as NodeIdx, b)));
        }
        if let Some(b) = self.bandwidth.producer {
            out.push((PRODUCER, b));
        }
        out
    }
}

/// Bytes if every assigned cell crossed the network exactly once.
pub fn assignment_floor(assignments: &[Option<SampleAssignment>], geometry: &BlobGeometry) -> u64 {
    assignments.iter().flatten().map(|a| a.bytes(geometry)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub report: SlotReport,
    /// [`assignment_floor`] for this slot's assignments.
    pub floor_bytes: u64,
    pub results: Vec<NodeResult>,
    pub stats: BTreeMap<String, f64>,
    pub trace_hash: u64,
    /// Nodes the adversary targeted or turned this slot.
    pub defecting: Vec<NodeIdx>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub name: String,
    pub strategy: StrategyKind,
    pub nodes: Vec<NodeProfile>,
    pub slots: Vec<SlotRecord>,
}

impl ScenarioRun {
    pub fn rows(&self) -> Vec<SlotRow> {
        self.slots.iter().map(|s| s.report.row()).collect()
    }

    pub fn csv(&self) -> Result<String, ScenarioError> {
        Ok(write_csv(&self.rows())?)
    }
}

/// Runs every slot of `scenario` with its configured strategy.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioRun, ScenarioError> {
    scenario.validate()?;
    let nodes = scenario.population();
    let g = scenario.geometry();
    let bandwidth = scenario.bandwidth();
    let mut state = StrategyState::default();
    let mut slots = Vec::with_capacity(scenario.slots as usize);
    for slot in 0..scenario.slots {
        let assignments = scenario.assignments(&nodes, slot);
        let adversary = plan_slot(&scenario.adversary, slot, &g, &nodes, &assignments, scenario.seed)
            .map_err(|e| invalid("adversary", e))?;
        let input = SlotInput {
            slot,
            seed: scenario.seed ^ slot.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            geometry: g,
            params: scenario.slot,
            nodes: &nodes,
            producer: PRODUCER,
            assignments: &assignments,
            latency: &scenario.latency,
            bandwidth: &bandwidth,
            adversary: &adversary,
        };
        let outcome =
            run_strategy(&input, &scenario.strategy, &mut state).map_err(|source| ScenarioError::Run { slot, source })?;
        slots.push(SlotRecord {
            report: SlotReport::from_outcome(&outcome, &scenario.cost),
            floor_bytes: assignment_floor(&assignments, &g),
            results: outcome.results,
            stats: outcome.stats,
            trace_hash: outcome.trace_hash,
            defecting: adversary.defecting.iter().copied().collect(),
        });
    }
    Ok(ScenarioRun {
        name: scenario.name.clone(),
        strategy: scenario.strategy.kind,
        nodes,
        slots,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<ScenarioRun>,
}

impl Comparison {
    /// Rows ordered by slot, then by the requested strategy order.
    pub fn rows(&self) -> Vec<SlotRow> {
        let slots = self.runs.iter().map(|r| r.slots.len()).max().unwrap_or(0);
        (0..slots)
            .flat_map(|i| self.runs.iter().filter_map(move |r| r.slots.get(i)).map(|s| s.report.row()))
            .collect()
    }

    pub fn csv(&self) -> Result<String, ScenarioError> {
        Ok(write_csv(&self.rows())?)
    }
}

/// Runs the scenario once per strategy, in parallel, on the same population,
/// assignments and seed.
pub fn compare_strategies(scenario: &Scenario, kinds: &[StrategyKind]) -> Result<Comparison, ScenarioError> {
    if kinds.is_empty() {
        return Err(invalid("strategies", "list is empty"));
    }
    let variants: Vec<Scenario> = kinds
        .iter()
        .map(|&k| {
            let mut s = scenario.clone();
            s.strategy.kind = k;
            s
        })
        .collect();
    let results: Vec<Result<ScenarioRun, ScenarioError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants.iter().map(|s| scope.spawn(move || run_scenario(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("strategy worker panicked"))
            .collect()
    });
    Ok(Comparison {
        runs: results.into_iter().collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "tiny"
seed = 7
slots = 2

[population]
validators = 10
regulars = 20

[geometry]
preset = "custom"
source_rows = 8
source_cols = 8

[strategy]
kind = "centralized"
"#;

    #[test]
    fn parses_with_defaults() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.geometry().extended_rows(), 16);
        assert_eq!(s.slot, SlotParameters::MAINNET);
        assert_eq!(s.latency, LatencyModel::default());
        assert!(s.sampling.validators_also_regular);
        assert_eq!(s.node_count(), 31);
    }

    #[test]
    fn config_round_trip_is_fixpoint() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let text = s.to_toml();
        let again = Scenario::from_toml(&text).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.to_toml(), text);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 7\n", "");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(m)) if m.contains("seed")));
    }

    #[test]
    fn errors_name_the_field() {
        let field = |extra: &str| match Scenario::from_toml(&format!("{MINIMAL}{extra}")) {
            Err(ScenarioError::Invalid { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            field("[slot]\nslot_duration = 12.0\nvalidator_deadline = 13.0\nregular_deadline = 10.0\nslots_per_epoch = 32\n"),
            "slot.validator_deadline"
        );
        let text = MINIMAL.replace("kind = \"centralized\"", "kind = \"centralized\"\nseed_copies = 0");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Invalid { field, .. }) if field == "strategy.seed_copies"));
        assert_eq!(field("[adversary]\nkind = \"withhold_fraction\"\nf = 1.5\n"), "adversary");
        assert_eq!(field("[sampling]\nk_of_n = { n = 70, k = 60 }\n"), "sampling.k_of_n");
    }

    #[test]
    fn validator_lines_stable_within_epoch() {
        let mut s = Scenario::from_toml(MINIMAL).unwrap();
        s.strategy.gossip.membership_epoch = 4;
        let nodes = s.population();
        let a0 = s.assignments(&nodes, 0);
        let a3 = s.assignments(&nodes, 3);
        let a4 = s.assignments(&nodes, 4);
        let v = a0[1].as_ref().unwrap();
        assert_eq!(v.rows, a3[1].as_ref().unwrap().rows);
        assert_eq!(v.cols, a3[1].as_ref().unwrap().cols);
        assert_ne!(v.extra_cells, a3[1].as_ref().unwrap().extra_cells);
        let moved = (1..=10).any(|i| a0[i].as_ref().unwrap().rows != a4[i].as_ref().unwrap().rows);
        assert!(moved);
        assert_ne!(a0[20].as_ref().unwrap().cells, a3[20].as_ref().unwrap().cells);
        assert!(a0[0].is_none());
    }

    #[test]
    fn floor_counts_distinct_cells() {
        let mut s = Scenario::from_toml(MINIMAL).unwrap();
        s.sampling.validators_also_regular = false;
        let nodes = s.population();
        let g = s.geometry();
        let per_validator = crate::sampling::validator_cell_count(&g) * g.cell_wire_bytes();
        let per_regular = REGULAR_SAMPLE_COUNT as u64 * g.cell_wire_bytes();
        assert_eq!(
            assignment_floor(&s.assignments(&nodes, 0), &g),
            10 * per_validator + 20 * per_regular
        );
        assert_eq!(
            crate::metrics::efficiency_floor(10, 20, &g),
            assignment_floor(&s.assignments(&nodes, 0), &g)
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.csv().unwrap(), b.csv().unwrap());
        assert_eq!(a.slots.len(), 2);
        let one = compare_strategies(&s, &[StrategyKind::Centralized]).unwrap();
        assert_eq!(one.csv().unwrap(), a.csv().unwrap());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_holds_for_arbitrary_values(
            seed in 0u64..=i64::MAX as u64,
            validators in 0usize..1000,
            regulars in 1usize..1000,
            kind in 0usize..3,
            proxy in proptest::prelude::any::<bool>(),
            min_us in 1u64..100_000,
        ) {
            let mut s = Scenario::from_toml(MINIMAL).unwrap();
            s.seed = seed;
            s.population.validators = validators;
            s.population.regulars = regulars;
            s.strategy.kind = StrategyKind::ALL[kind];
            s.strategy.unlinkability_proxy = proxy;
            s.latency = LatencyModel::UniformRange { min_us, max_us: min_us * 2 };
            let again = Scenario::from_toml(&s.to_toml()).unwrap();
            proptest::prop_assert_eq!(again, s);
        }
    }
}
