use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cts_core::bench::{self, emit_report, run_benchmark, BenchConfig, PolicyKind};
use cts_core::rl_agent::{train_with_progress, Checkpoint, QNetwork, TrainConfig};
use cts_core::simulator::{run_episode, ScenarioConfig};

#[derive(Parser)]
#[command(name = "cts", version, about = "Cost-to-serve sourcing simulator and policy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario file with default settings.
    Scenario {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Run one episode and export its trace as JSON lines.
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        time_limit_ms: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the DQN agent and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode training curve, JSON lines.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Mean episode cost of one policy over the test seeds.
    Evaluate {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long)]
        time_limit_ms: Option<u64>,
    },
    /// Paired comparison of several policies across customer counts.
    Bench {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "pi1,pi2,pip1,pip2,milp")]
        policies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,10,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        time_limit_ms: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training configuration file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    scenario: ScenarioConfig,
    train: TrainConfig,
}

fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading scenario {}", p.display()))?;
            Ok(ScenarioConfig::from_json(&text).with_context(|| format!("parsing scenario {}", p.display()))?)
        }
        None => Ok(ScenarioConfig::default()),
    }
}

fn load_net(path: Option<&Path>) -> Result<Option<Arc<QNetwork>>> {
    let Some(p) = path else { return Ok(None) };
    let text = fs::read_to_string(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
    let ckpt = Checkpoint::from_json(&text).with_context(|| format!("parsing checkpoint {}", p.display()))?;
    Ok(Some(Arc::new(QNetwork::from_checkpoint(&ckpt, TrainConfig::default().learning_rate)?)))
}

fn policy_kind(name: &str, ckpt: Option<&Path>, time_limit_ms: Option<u64>) -> Result<PolicyKind> {
    let net = load_net(ckpt)?;
    Ok(PolicyKind::parse(name, net.as_ref(), time_limit_ms.map(Duration::from_millis))?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scenario { out, seed, k } => {
            let cfg = ScenarioConfig::default().with_seed(seed).with_customers(k);
            fs::write(&out, cfg.to_json()?)?;
        }
        Command::Simulate { scenario, policy, ckpt, time_limit_ms, seed, out } => {
            let mut cfg = load_scenario(scenario.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let kind = policy_kind(&policy, ckpt.as_deref(), time_limit_ms)?;
            let trace = run_episode(&cfg, kind.build().as_mut())?;
            let mut w = BufWriter::new(File::create(&out)?);
            trace.write_jsonl(&mut w)?;
            w.flush()?;
            println!("{}", serde_json::to_string(&trace.totals)?);
        }
        Command::Train { config, out, curve, episodes } => {
            let mut file: TrainFile = match &config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .with_context(|| format!("parsing training config {}", p.display()))?,
                None => TrainFile::default(),
            };
            if let Some(e) = episodes {
                file.train.episodes = e;
            }
            let outcome = train_with_progress(&file.train, &file.scenario, |s| {
                if (s.episode + 1) % 100 == 0 {
                    eprintln!("episode {:>5}  cost {:>10.1}  epsilon {:.3}", s.episode + 1, s.total_cost, s.epsilon);
                }
            })?;
            let ckpt = outcome.net.to_checkpoint(file.scenario.n_warehouses, file.scenario.n_products);
            fs::write(&out, ckpt.to_json()?)?;
            if let Some(p) = curve {
                let mut w = BufWriter::new(File::create(p)?);
                for s in &outcome.curve {
                    serde_json::to_writer(&mut w, s)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            eprintln!("trained {} episodes in {:.1} s", outcome.curve.len(), outcome.elapsed.as_secs_f64());
        }
        Command::Evaluate { policy, ckpt, scenario, k, episodes, time_limit_ms } => {
            let kind = policy_kind(&policy, ckpt.as_deref(), time_limit_ms)?;
            let cfg = BenchConfig {
                scenario: load_scenario(scenario.as_deref())?,
                ks: vec![k],
                episodes,
                seeds: None,
                workers: bench::default_workers(),
            };
            let report = run_benchmark(&cfg, &[kind])?;
            println!("{}", serde_json::to_string_pretty(&report.cells[0])?);
        }
        Command::Bench { scenario, policies, k, episodes, ckpt, time_limit_ms, out } => {
            if policies.is_empty() {
                bail!("no policies given");
            }
            let net = load_net(ckpt.as_deref())?;
            let kinds = policies
                .iter()
                .map(|p| PolicyKind::parse(p.trim(), net.as_ref(), Some(Duration::from_millis(time_limit_ms))))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = BenchConfig {
                scenario: load_scenario(scenario.as_deref())?,
                ks: k,
                episodes,
                seeds: None,
                workers: bench::default_workers(),
            };
            let report = run_benchmark(&cfg, &kinds)?;
            emit_report(&report, &out)?;
            for c in &report.cells {
                println!(
                    "k={:<4} {:<5} cost {:>12.1}  no-penalty {:>12.1}  unfulfilled {:>9.1}  {:.2e} s/step",
                    c.k, c.policy, c.mean_total_cost, c.mean_service_cost, c.mean_unfulfilled, c.median_decision_seconds
                );
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
