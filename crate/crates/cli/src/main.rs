//! Command-line front end: scenario runs, variant comparison, churn
//! analytics and PVSS timings.
//!
//! Output files go to `--out` or `$PVSS_BFT_OUT`. Without either, results
//! are printed and nothing is written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use pvss_bft::analysis::churn_table;
use pvss_bft::group::{Group, SecurityLevel};
use pvss_bft::metrics::{summarize, write_csv, write_csv_file, write_json_file, CsvRow, Summary, Variant};
use pvss_bft::pvss::bench::bench_pvss;
use pvss_bft::simnet::{run, ExperimentConfig, RunResult, RunSpec};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pvss-bft", version, about = "PVSS-BFT sleepy-model consensus simulator")]
struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, env = "PVSS_BFT_OUT")]
    out: Option<PathBuf>,
    /// Replaces the seed list of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Group profile: test64 or std256.
    #[arg(long, global = true)]
    profile: Option<SecurityLevel>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs every scenario of a config and writes per-view, per-node,
    /// per-tick and per-transaction CSVs plus a JSON summary.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Runs two single-variant configs over the same schedule and writes a
    /// joint per-tick CSV.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"], required = true)]
        config: Vec<PathBuf>,
    },
    /// Times split, verification of all shares and reconstruction.
    BenchPvss {
        #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32, 64])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        samples: usize,
    },
    /// Evaluates the churn analytics over a grid of flip probabilities and sizes.
    AnalyzeChurn {
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.15, 0.2, 0.21, 0.25, 0.3])]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [20, 40, 80])]
        n: Vec<usize>,
    },
}

/// Exit code when a PVSS-BFT run forked.
const SAFETY_FAILURE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(SAFETY_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every safety assertion held.
fn execute(cli: &Cli) -> Result<bool> {
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match &cli.command {
        Command::Run { config } => run_config(cli, config),
        Command::Compare { config } => compare(cli, &config[0], &config[1]),
        Command::BenchPvss { sizes, samples } => bench(cli, sizes, *samples),
        Command::AnalyzeChurn { p, n } => analyze(cli, p, n),
    }
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(profile) = cli.profile {
        cfg.profile = profile;
    }
    Ok(cfg)
}

fn execute_runs(specs: &[RunSpec]) -> Result<Vec<RunResult>> {
    specs.par_iter().map(|s| run(s).with_context(|| format!("run {} seed {}", s.scenario, s.seed))).collect()
}

/// A PVSS-BFT run that forked violates safety.
fn safe(r: &RunResult) -> bool {
    r.spec.variant != Variant::PvssBft || r.forks == 0
}

#[derive(Serialize)]
struct RunSummary {
    scenario: String,
    variant: Variant,
    seed: u64,
    strategy: String,
    malicious: usize,
    #[serde(flatten)]
    summary: Summary,
    mean_tx_latency_ticks: Option<f64>,
    evidence: usize,
    unsafe_ticks: u64,
    safe: bool,
}

fn mean(xs: impl Iterator<Item = u64>) -> Option<f64> {
    let (sum, n) = xs.fold((0u64, 0u64), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

fn run_summary(r: &RunResult) -> RunSummary {
    RunSummary {
        scenario: r.spec.scenario.clone(),
        variant: r.spec.variant,
        seed: r.spec.seed,
        strategy: r.spec.strategy.to_string(),
        malicious: r.spec.malicious,
        summary: summarize(&r.views),
        mean_tx_latency_ticks: mean(r.txs.iter().filter_map(|t| t.latency_ticks)),
        evidence: r.evidence.len(),
        unsafe_ticks: r.unsafe_ticks,
        safe: safe(r),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

fn collect<T: Clone>(results: &[RunResult], f: impl Fn(&RunResult) -> &[T]) -> Vec<T> {
    results.iter().flat_map(|r| f(r).iter().cloned()).collect()
}

fn write_out<T: CsvRow>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    Ok(write_csv_file(&dir.join(name), rows)?)
}

fn run_config(cli: &Cli, path: &Path) -> Result<bool> {
    let cfg = load(cli, path)?;
    let results = execute_runs(&cfg.runs())?;
    let summaries: Vec<RunSummary> = results.iter().map(run_summary).collect();
    println!("{:<28} {:<14} {:>5} {:>6} {:>8} {:>6} {:>9} {:>9}", "scenario", "variant", "seed", "views", "decided", "forks", "latency", "tx_lat");
    for s in &summaries {
        println!(
            "{:<28} {:<14} {:>5} {:>6} {:>8} {:>6} {:>9} {:>9}",
            s.scenario,
            s.variant.name(),
            s.seed,
            s.summary.views,
            s.summary.decided,
            s.summary.forks,
            fmt_opt(s.summary.mean_latency_ticks),
            fmt_opt(s.mean_tx_latency_ticks)
        );
    }
    let mut forks: BTreeMap<(usize, &str), Vec<u64>> = BTreeMap::new();
    for r in &results {
        forks.entry((r.spec.malicious, r.spec.variant.name())).or_default().push(r.forks);
    }
    if cfg.seeds.len() > 1 || cfg.adversary.malicious.len() > 1 {
        println!("mean forks over seeds:");
        for ((m, variant), f) in &forks {
            println!("  malicious={m:<3} {variant:<14} {:.1}", mean(f.iter().copied()).unwrap_or(0.0));
        }
    }
    if let Some(dir) = &cli.out {
        let stem = &cfg.name;
        write_out(dir, &format!("{stem}-views.csv"), &collect(&results, |r| &r.views))?;
        write_out(dir, &format!("{stem}-nodes.csv"), &collect(&results, |r| &r.nodes))?;
        write_out(dir, &format!("{stem}-ticks.csv"), &collect(&results, |r| &r.ticks))?;
        write_out(dir, &format!("{stem}-txs.csv"), &collect(&results, |r| &r.txs))?;
        write_json_file(&dir.join(format!("{stem}-summary.json")), &summaries)?;
    }
    let ok = results.iter().all(safe);
    if !ok {
        eprintln!("safety violated: PVSS-BFT forked");
    }
    Ok(ok)
}

/// One tick of two runs side by side. Latency is the mean over
/// transactions confirmed at that tick.
#[derive(Serialize)]
struct CompareRow {
    seed: u64,
    malicious: usize,
    tick: u64,
    stage: usize,
    awake: u32,
    variant_a: Variant,
    height_a: u64,
    latency_a: Option<f64>,
    variant_b: Variant,
    height_b: u64,
    latency_b: Option<f64>,
}

impl CsvRow for CompareRow {
    const COLUMNS: &'static [&'static str] = &[
        "seed",
        "malicious",
        "tick",
        "stage",
        "awake",
        "variant_a",
        "height_a",
        "latency_a",
        "variant_b",
        "height_b",
        "latency_b",
    ];
}

fn single_variant(cfg: &ExperimentConfig, path: &Path) -> Result<Variant> {
    match cfg.variants.as_slice() {
        [v] => Ok(*v),
        _ => bail!("{}: compare needs exactly one variant per config", path.display()),
    }
}

fn latency_by_tick(r: &RunResult) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for t in &r.txs {
        if let (Some(c), Some(l)) = (t.confirmed, t.latency_ticks) {
            let e = acc.entry(c).or_default();
            e.0 += l;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
}

fn compare(cli: &Cli, path_a: &Path, path_b: &Path) -> Result<bool> {
    let (a, b) = (load(cli, path_a)?, load(cli, path_b)?);
    let (va, vb) = (single_variant(&a, path_a)?, single_variant(&b, path_b)?);
    ensure!(a.churn == b.churn, "churn schedules differ between {} and {}", path_a.display(), path_b.display());
    ensure!(
        (a.nodes, a.views, &a.seeds, &a.adversary.malicious) == (b.nodes, b.views, &b.seeds, &b.adversary.malicious),
        "configs must agree on nodes, views, seeds and malicious counts"
    );
    let (ra, rb) = (execute_runs(&a.runs())?, execute_runs(&b.runs())?);
    let mut rows = Vec::new();
    for (x, y) in ra.iter().zip(&rb) {
        let (la, lb) = (latency_by_tick(x), latency_by_tick(y));
        for (ta, tb) in x.ticks.iter().zip(&y.ticks) {
            rows.push(CompareRow {
                seed: x.spec.seed,
                malicious: x.spec.malicious,
                tick: ta.tick,
                stage: ta.stage,
                awake: ta.awake,
                variant_a: va,
                height_a: ta.height_max,
                latency_a: la.get(&ta.tick).copied(),
                variant_b: vb,
                height_b: tb.height_max,
                latency_b: lb.get(&tb.tick).copied(),
            });
        }
    }
    for (label, results) in [(&a.name, &ra), (&b.name, &rb)] {
        for r in results.iter() {
            let s = run_summary(r);
            println!(
                "{label} ({}) seed {}: decided {}/{} forks {} tx latency {}",
                s.variant.name(),
                s.seed,
                s.summary.decided,
                s.summary.views,
                s.summary.forks,
                fmt_opt(s.mean_tx_latency_ticks)
            );
            let stages = r.ticks.iter().map(|t| t.stage).max().map_or(0, |m| m + 1);
            for stage in 0..stages {
                let lat = mean(r.txs.iter().filter(|t| stage_of(r, t.submitted) == stage).filter_map(|t| t.latency_ticks));
                println!("  stage {}: tx latency {}", stage + 1, lat.map_or_else(|| "stalled".into(), |v| format!("{v:.1}")));
            }
        }
    }
    if let Some(dir) = &cli.out {
        write_out(dir, &format!("{}-vs-{}.csv", a.name, b.name), &rows)?;
    }
    let ok = ra.iter().chain(&rb).all(safe);
    if !ok {
        eprintln!("safety violated: PVSS-BFT forked");
    }
    Ok(ok)
}

fn stage_of(r: &RunResult, tick: u64) -> usize {
    r.ticks.get(tick as usize).map_or(0, |t| t.stage)
}

fn bench(cli: &Cli, sizes: &[usize], samples: usize) -> Result<bool> {
    ensure!(samples > 0, "samples must be positive");
    ensure!(sizes.iter().all(|&n| n > 0), "sizes must be positive");
    let group = Group::new(cli.profile.unwrap_or(SecurityLevel::Std256));
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(1));
    let rows: Vec<_> = sizes.iter().map(|&n| bench_pvss(&group, n, samples, &mut rng)).collect();
    write_csv(std::io::stdout().lock(), &rows)?;
    if let Some(dir) = &cli.out {
        write_out(dir, &format!("bench-pvss-{}.csv", group.level().name()), &rows)?;
    }
    Ok(true)
}

fn analyze(cli: &Cli, ps: &[f64], ns: &[usize]) -> Result<bool> {
    let rows = churn_table(ps, ns)?;
    write_csv(std::io::stdout().lock(), &rows)?;
    if let Some(dir) = &cli.out {
        write_out(dir, "churn.csv", &rows)?;
    }
    Ok(true)
}
