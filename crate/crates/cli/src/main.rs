//! `gdalloc`: plan, serve, simulate and score guaranteed-delivery allocations.
//!
//! Data goes to files only; diagnostics go to stderr. Exit code 0 means no errors.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gdalloc::dual::{self, DualCandidate, DualObjectiveSpec};
use gdalloc::hwm::{self, Candidate};
use gdalloc::io::{self, JsonlReader, JsonlWriter, PlanFile};
use gdalloc::metrics::{self, Population, SmoothnessSeries};
use gdalloc::simulator::{self, ImpressionEvent, ScenarioSpec, ServingMode, SimulationConfig, SimulationReport};
use gdalloc::{targeting, Contract};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gdalloc", version, about = "Compact allocation plans for guaranteed display advertising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanAlgorithm {
    Hwm,
    Dual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Expected,
    Sampled,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an allocation plan from a supply forecast and contracts.
    Plan {
        #[arg(long)]
        supply: PathBuf,
        #[arg(long)]
        contracts: PathBuf,
        /// Explicit eligibility edges; derived from targeting when omitted.
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "hwm")]
        algorithm: PlanAlgorithm,
        #[arg(long, default_value_t = dual::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = dual::DEFAULT_MAX_SWEEPS)]
        max_sweeps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve an impression stream against a plan, one decision per impression.
    Serve {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        contracts: PathBuf,
        #[arg(long)]
        impressions: PathBuf,
        #[arg(long, env = "GD_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a scenario directory through periodic re-optimization.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory with supply.jsonl, contracts.jsonl, impressions.jsonl and optionally edges.jsonl.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, env = "GD_SEED")]
        seed: Option<u64>,
        /// Output directory for report.json and delivery_timeseries.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Smoothness quantiles from a delivery time series, and optionally the improvement over a baseline.
    Metrics {
        #[arg(long)]
        timeseries: PathBuf,
        /// Report of the run being scored; needed with --baseline.
        #[arg(long, requires = "baseline")]
        report: Option<PathBuf>,
        #[arg(long, requires = "report")]
        baseline: Option<PathBuf>,
        /// Count only delivery ahead of the linear goal.
        #[arg(long)]
        positive_part: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scenario directory from a spec.
    Scenario {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan {
            supply,
            contracts,
            edges,
            algorithm,
            tol,
            max_sweeps,
            out,
        } => plan(&supply, &contracts, edges.as_deref(), algorithm, tol, max_sweeps, &out),
        Command::Serve {
            plan,
            contracts,
            impressions,
            seed,
            out,
        } => serve(&plan, &contracts, &impressions, seed, &out),
        Command::Simulate {
            config,
            scenario,
            mode,
            seed,
            out,
        } => simulate(&config, &scenario, mode, seed, &out),
        Command::Metrics {
            timeseries,
            report,
            baseline,
            positive_part,
            out,
        } => score(&timeseries, report.zip(baseline), positive_part, out.as_deref()),
        Command::Scenario { spec, out } => scenario(&spec, &out),
    }
}

fn plan(
    supply: &Path,
    contracts: &Path,
    edges: Option<&Path>,
    algorithm: PlanAlgorithm,
    tol: f64,
    max_sweeps: usize,
    out: &Path,
) -> Result<()> {
    let graph = io::load_graph(supply, contracts, edges)?;
    for (j, c) in graph.contracts().iter().enumerate() {
        let supply = graph.eligible_supply(j);
        if supply <= 0.0 {
            eprintln!("warning: contract {} has no eligible supply", c.id);
        } else if supply < c.demand {
            eprintln!("warning: contract {} demands {} but only {supply} is eligible", c.id, c.demand);
        }
    }
    match algorithm {
        PlanAlgorithm::Hwm => {
            let plan = hwm::generate_hwm_plan(&graph)?;
            for d in &plan.diagnostics {
                eprintln!("warning: {d}");
            }
            io::write_hwm_plan(out, &plan)?;
        }
        PlanAlgorithm::Dual => {
            let spec = DualObjectiveSpec::from_graph(&graph);
            let plan = dual::solve_dual_offline(&graph, &spec, tol, max_sweeps)?;
            for id in &plan.excluded {
                eprintln!("warning: contract {id} left out of the plan");
            }
            eprintln!("dual solver converged in {} sweeps", plan.sweeps);
            io::write_dual_plan(out, &plan)?;
        }
    }
    Ok(())
}

/// Contracts an impression may be served to, with their position in the plan.
enum Serving {
    Hwm(Vec<(Contract, usize, f64)>),
    Dual(Vec<(Contract, f64, f64)>),
}

fn serve(plan: &Path, contracts: &Path, impressions: &Path, seed: u64, out: &Path) -> Result<()> {
    let contracts: HashMap<String, Contract> = io::read_contracts(contracts)?
        .into_iter()
        .map(|c| (c.id.clone(), c))
        .collect();
    let lookup = |id: &str| -> Result<Contract> {
        contracts
            .get(id)
            .cloned()
            .with_context(|| format!("plan references contract {id}, which is not in the contracts file"))
    };
    let serving = match io::read_plan(plan)? {
        PlanFile::Hwm(p) => Serving::Hwm(
            p.entries
                .iter()
                .enumerate()
                .map(|(order, e)| Ok((lookup(&e.contract_id)?, order, e.alpha)))
                .collect::<Result<_>>()?,
        ),
        PlanFile::Dual(p) => Serving::Dual(
            p.entries
                .iter()
                .map(|e| Ok((lookup(&e.contract_id)?, e.theta, e.alpha)))
                .collect::<Result<_>>()?,
        ),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = JsonlWriter::create(out)?;
    let eligible = |c: &Contract, imp: &ImpressionEvent| c.is_live_at(imp.ts) && targeting::eligible(&imp.attributes, &c.targeting);
    for imp in JsonlReader::<ImpressionEvent>::open(impressions)? {
        let imp = imp?;
        let decision = match &serving {
            Serving::Hwm(entries) => {
                let candidates: Vec<Candidate> = entries
                    .iter()
                    .filter(|(c, ..)| eligible(c, &imp))
                    .map(|(c, order, alpha)| Candidate {
                        contract_id: c.id.clone(),
                        order: *order,
                        alpha: *alpha,
                    })
                    .collect();
                hwm::serve_hwm(imp.id, &candidates, &mut rng)
            }
            Serving::Dual(entries) => {
                let candidates: Vec<DualCandidate> = entries
                    .iter()
                    .filter(|(c, ..)| eligible(c, &imp))
                    .map(|(c, theta, alpha)| DualCandidate {
                        contract_id: c.id.clone(),
                        theta: *theta,
                        alpha: *alpha,
                    })
                    .collect();
                dual::serve_dual(imp.id, &candidates, &mut rng)
            }
        };
        writer.write(&decision)?;
    }
    writer.finish()?;
    Ok(())
}

fn simulate(config: &Path, dir: &Path, mode: Option<Mode>, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg: SimulationConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(mode) = mode {
        cfg.mode = match mode {
            Mode::Expected => ServingMode::Expected,
            Mode::Sampled => ServingMode::Sampled,
        };
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let edges = dir.join("edges.jsonl");
    let graph = io::load_graph(
        dir.join("supply.jsonl"),
        dir.join("contracts.jsonl"),
        edges.exists().then_some(edges.as_path()),
    )?;
    let impressions: Vec<ImpressionEvent> = io::read_jsonl(dir.join("impressions.jsonl"))?;
    let report = simulator::run_simulation(&graph, &impressions, &cfg)?;
    for d in &report.diagnostics {
        eprintln!("warning: {d}");
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    io::write_timeseries(out.join("delivery_timeseries.csv"), &report.timeseries())?;
    eprintln!(
        "underdelivery {:.4}% over {} contracts",
        100.0 * report.underdelivery(),
        report.contracts.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct Scores {
    sigma75_finished: Option<f64>,
    sigma95_finished: Option<f64>,
    sigma75_unfinished: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delivery_improvement: Option<f64>,
}

fn score(timeseries: &Path, reports: Option<(PathBuf, PathBuf)>, positive: bool, out: Option<&Path>) -> Result<()> {
    let series = SmoothnessSeries::from_rows(&io::read_timeseries(timeseries)?);
    // A population with no samples has no quantile.
    let quantile = |f, population| metrics::smoothness_quantile(&series, f, population, positive).ok();
    let delivery_improvement = match reports {
        None => None,
        Some((report, baseline)) => {
            let test: SimulationReport = read_json(&report)?;
            let base: SimulationReport = read_json(&baseline)?;
            Some(metrics::delivery_improvement(&test, &base)?)
        }
    };
    let scores = Scores {
        sigma75_finished: quantile(75.0, Population::Finished),
        sigma95_finished: quantile(95.0, Population::Finished),
        sigma75_unfinished: quantile(75.0, Population::Unfinished),
        delivery_improvement,
    };
    match out {
        Some(path) => write_json(path, &scores),
        None => {
            println!("{}", serde_json::to_string_pretty(&scores)?);
            Ok(())
        }
    }
}

fn scenario(spec: &Path, out: &Path) -> Result<()> {
    let spec: ScenarioSpec = read_json(spec)?;
    let scenario = match simulator::generate_scenario(&spec) {
        Ok(s) => s,
        Err(e) => bail!("invalid scenario spec: {e}"),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_jsonl(out.join("supply.jsonl"), scenario.graph.supply())?;
    io::write_jsonl(out.join("contracts.jsonl"), scenario.graph.contracts())?;
    io::write_jsonl(out.join("impressions.jsonl"), &scenario.impressions)?;
    eprintln!(
        "{} supply nodes, {} contracts, {} impressions",
        scenario.graph.supply().len(),
        scenario.graph.contracts().len(),
        scenario.impressions.len()
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
