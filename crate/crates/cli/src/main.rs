use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dasim_core::metrics::{arithmetic_checks, arithmetic_table, read_csv, SlotRow};
use dasim_core::scenario::{compare_strategies, run_scenario, Scenario};
use dasim_core::strategy::StrategyKind;

mod plot;

#[derive(Parser)]
#[command(name = "dasim", version, about = "Deterministic data availability sampling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's output.dir, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render an SVG traffic chart next to the CSV.
    #[arg(long)]
    plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario with its configured strategy.
    Run(RunOpts),
    /// Run a scenario once per strategy and merge the reports.
    Compare {
        #[command(flatten)]
        opts: RunOpts,
        /// Comma-separated: centralized, gossip, dht.
        #[arg(long, value_delimiter = ',', default_value = "centralized,gossip,dht")]
        strategies: Vec<String>,
    },
    /// Print the mainnet size and cost table and verify its exact figures.
    Check,
}

fn load(opts: &RunOpts) -> Result<Scenario> {
    let text = fs::read_to_string(&opts.scenario).with_context(|| format!("reading {}", opts.scenario.display()))?;
    let mut scenario = Scenario::from_toml(&text).with_context(|| format!("invalid scenario {}", opts.scenario.display()))?;
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn out_dir(opts: &RunOpts, scenario: &Scenario) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| scenario.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_outputs(dir: &Path, stem: &str, title: &str, csv: &str, plot: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{stem}.csv"));
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    if plot {
        let rows = read_csv(csv).context("re-reading CSV")?;
        let svg_path = dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, plot::traffic_svg(title, &rows)).with_context(|| format!("writing {}", svg_path.display()))?;
        println!("wrote {}", svg_path.display());
    }
    Ok(())
}

fn rate(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn print_rows(rows: &[SlotRow]) {
    println!(
        "{:>4} {:<12} {:>15} {:>13} {:>11} {:>15} {:>7} {:>7} {:>9} {:>10}",
        "slot", "strategy", "cell B", "signaling B", "header B", "producer B", "v ok", "r ok", "p50 ms", "cost USD"
    );
    for r in rows {
        println!(
            "{:>4} {:<12} {:>15} {:>13} {:>11} {:>15} {:>7} {:>7} {:>9} {:>10.4}",
            r.slot,
            r.strategy,
            r.bytes_cell,
            r.bytes_signaling,
            r.bytes_header,
            r.producer_egress,
            rate(r.v_deadline_rate),
            rate(r.r_deadline_rate),
            r.p50_ms.map_or_else(|| "-".into(), |v| format!("{v:.1}")),
            r.cost_usd
        );
    }
}

fn print_table(scenario: &Scenario) {
    println!("{:<40} {:>20} {:>14} {:>7}", "figure", "computed", "reference", "");
    for row in arithmetic_table(&scenario.geometry()) {
        println!(
            "{:<40} {:>20} {:>14} {:>7}  {}",
            row.label,
            format!("{:.6}", row.computed).trim_end_matches('0').trim_end_matches('.'),
            row.reference.map_or_else(|| "-".into(), |r| format!("{r}")),
            row.unit,
            if row.flagged { "differs" } else { "" }
        );
    }
}

fn run(opts: &RunOpts) -> Result<()> {
    let scenario = load(opts)?;
    if scenario.slots == 0 {
        print_table(&scenario);
    }
    let result = run_scenario(&scenario).context("scenario run failed")?;
    let rows = result.rows();
    if !rows.is_empty() {
        print_rows(&rows);
    }
    let csv = result.csv()?;
    write_outputs(&out_dir(opts, &scenario), &scenario.name, &scenario.name, &csv, opts.plot)
}

fn compare(opts: &RunOpts, strategies: &[String]) -> Result<()> {
    let scenario = load(opts)?;
    let mut kinds = Vec::new();
    for s in strategies {
        match StrategyKind::parse(s) {
            Some(k) => kinds.push(k),
            None => bail!("unknown strategy `{s}` (expected centralized, gossip or dht)"),
        }
    }
    let comparison = compare_strategies(&scenario, &kinds).context("comparison failed")?;
    print_rows(&comparison.rows());
    let csv = comparison.csv()?;
    let title = format!("{} comparison", scenario.name);
    write_outputs(&out_dir(opts, &scenario), &format!("{}-compare", scenario.name), &title, &csv, opts.plot)
}

fn check() -> Result<bool> {
    let mut ok = true;
    for c in arithmetic_checks() {
        println!("{:<22} {}  {}", c.label, if c.pass { "PASS" } else { "FAIL" }, c.detail);
        ok &= c.pass;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(opts) => run(opts).map(|()| true),
        Command::Compare { opts, strategies } => compare(opts, strategies).map(|()| true),
        Command::Check => check(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
