use criterion::{criterion_group, criterion_main, Criterion};
use dasim_core::scenario::{run_scenario, Scenario};

const SCENARIO: &str = r#"
name = "bench-gossip"
seed = 5
slots = 1

[population]
validators = 270
regulars = 30

[geometry]
preset = "custom"
source_rows = 16
source_cols = 16

[strategy]
kind = "gossip_mesh"
"#;

fn gossip_slot(c: &mut Criterion) {
    let scenario = Scenario::from_toml(SCENARIO).unwrap();
    let mut group = c.benchmark_group("gossip_slot");
    group.sample_size(10);
    group.bench_function("300_nodes_32x32", |b| b.iter(|| run_scenario(&scenario).unwrap()));
    group.finish();
}

criterion_group!(benches, gossip_slot);
criterion_main!(benches);
