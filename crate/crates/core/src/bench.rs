//! Paired policy comparison over fixed test seeds.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtsError, Result};
use crate::exact_solver::ExactPolicy;
use crate::heuristics::{Pi1, Pi2, PiP1, PiP2};
use crate::rl_agent::{DqnPolicy, QNetwork};
use crate::simulator::{generate_scenario, run_scenario, Policy, ScenarioConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Desk-scale customer counts run by default.
pub const DEFAULT_KS: [usize; 4] = [1, 4, 10, 20];
/// Customer counts of the original study; supported, but slow for `milp`.
pub const PAPER_KS: [usize; 6] = [1, 4, 10, 40, 80, 100];
const TEST_SEED_BASE: u64 = 7_000_000_000;

/// Evaluation seeds for `k` customers per step. Disjoint from the small
/// seeds used for training runs.
pub fn test_seeds(k: usize, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|e| TEST_SEED_BASE + 1_000 * k as u64 + e).collect()
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    Pi1,
    Pi2,
    PiP1,
    PiP2,
    Milp { time_limit: Option<Duration> },
    Rl(Arc<QNetwork>),
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pi1 => "pi1",
            Self::Pi2 => "pi2",
            Self::PiP1 => "pip1",
            Self::PiP2 => "pip2",
            Self::Milp { .. } => "milp",
            Self::Rl(_) => "rl",
        }
    }

    pub fn heuristics() -> Vec<Self> {
        vec![Self::Pi1, Self::Pi2, Self::PiP1, Self::PiP2]
    }

    /// Parses a policy name. `rl` needs a network, `milp` takes the limit.
    pub fn parse(name: &str, net: Option<&Arc<QNetwork>>, time_limit: Option<Duration>) -> Result<Self> {
        Ok(match name {
            "pi1" => Self::Pi1,
            "pi2" => Self::Pi2,
            "pip1" => Self::PiP1,
            "pip2" => Self::PiP2,
            "milp" => Self::Milp { time_limit },
            "rl" => Self::Rl(
                net.cloned()
                    .ok_or_else(|| CtsError::InvalidArgument("policy rl needs a checkpoint".into()))?,
            ),
            other => return Err(CtsError::InvalidArgument(format!("unknown policy {other:?}"))),
        })
    }

    pub fn build(&self) -> Box<dyn Policy + Send> {
        match self {
            Self::Pi1 => Box::new(Pi1),
            Self::Pi2 => Box::new(Pi2),
            Self::PiP1 => Box::new(PiP1),
            Self::PiP2 => Box::new(PiP2),
            Self::Milp { time_limit } => Box::new(ExactPolicy { time_limit: *time_limit }),
            Self::Rl(net) => Box::new(DqnPolicy::new(QNetwork::clone(net))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenario: ScenarioConfig,
    pub ks: Vec<usize>,
    pub episodes: usize,
    /// Overrides [`test_seeds`] when set; used for every `k`.
    pub seeds: Option<Vec<u64>>,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { scenario: ScenarioConfig::default(), ks: DEFAULT_KS.to_vec(), episodes: 30, seeds: None, workers: default_workers() }
    }
}

/// Worker threads from `CTS_WORKERS`, else 1 so timings stay clean.
pub fn default_workers() -> usize {
    std::env::var("CTS_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

impl BenchConfig {
    pub fn seeds_for(&self, k: usize) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| test_seeds(k, self.episodes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub policy: String,
    pub k: usize,
    pub seed: u64,
    pub total_cost: f64,
    pub service_cost: f64,
    pub unfulfilled: u64,
    pub mean_decision_seconds: f64,
    /// Steps the policy certified optimal, if it certifies at all.
    pub proven_optimal_steps: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub policy: String,
    pub k: usize,
    pub episodes: usize,
    pub mean_total_cost: f64,
    pub se_total_cost: f64,
    pub mean_service_cost: f64,
    pub se_service_cost: f64,
    pub mean_unfulfilled: f64,
    pub se_unfulfilled: f64,
    /// Median over episodes of the mean per-step decision time.
    pub median_decision_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    pub cells: Vec<BenchCell>,
    pub episodes: Vec<EpisodeResult>,
}

impl BenchReport {
    pub fn cell(&self, policy: &str, k: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.policy == policy && c.k == k)
    }

    /// Episode results of `policy` at `k`, in seed order.
    pub fn episodes_of(&self, policy: &str, k: usize) -> Vec<&EpisodeResult> {
        self.episodes.iter().filter(|e| e.policy == policy && e.k == k).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(CtsError::Config(format!("unsupported report schema_version {}", r.schema_version)));
        }
        Ok(r)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean; 0 for fewer than two samples.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn run_seed(config: &ScenarioConfig, policies: &[PolicyKind], k: usize, seed: u64) -> Result<Vec<EpisodeResult>> {
    let (scenario, _) = generate_scenario(&config.with_customers(k).with_seed(seed))?;
    policies
        .iter()
        .map(|kind| {
            let mut policy = kind.build();
            let trace = run_scenario(&scenario, policy.as_mut())?;
            let certified = trace.steps.iter().filter_map(|s| s.proven_optimal).collect::<Vec<_>>();
            Ok(EpisodeResult {
                policy: kind.name().to_string(),
                k,
                seed,
                total_cost: trace.totals.total,
                service_cost: trace.totals.service_cost(),
                unfulfilled: trace.totals.unfulfilled_count,
                mean_decision_seconds: trace.mean_decision_seconds(),
                proven_optimal_steps: (!certified.is_empty()).then(|| certified.iter().filter(|&&o| o).count()),
                steps: trace.steps.len(),
            })
        })
        .collect()
}

/// Runs every policy on the same scenarios, per `k` and seed.
pub fn run_benchmark(config: &BenchConfig, policies: &[PolicyKind]) -> Result<BenchReport> {
    config.scenario.validate()?;
    if policies.is_empty() || config.ks.is_empty() {
        return Err(CtsError::InvalidArgument("benchmark needs at least one policy and one k".into()));
    }
    let jobs: Vec<(usize, u64)> = config.ks.iter().flat_map(|&k| config.seeds_for(k).into_iter().map(move |s| (k, s))).collect();
    let results: Vec<Vec<EpisodeResult>> = if config.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| CtsError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(|&(k, s)| run_seed(&config.scenario, policies, k, s)).collect::<Result<_>>())?
    } else {
        jobs.iter().map(|&(k, s)| run_seed(&config.scenario, policies, k, s)).collect::<Result<_>>()?
    };
    let episodes: Vec<EpisodeResult> = results.into_iter().flatten().collect();

    let mut cells = Vec::new();
    for &k in &config.ks {
        for kind in policies {
            let eps: Vec<&EpisodeResult> = episodes.iter().filter(|e| e.k == k && e.policy == kind.name()).collect();
            let tt: Vec<f64> = eps.iter().map(|e| e.total_cost).collect();
            let sc: Vec<f64> = eps.iter().map(|e| e.service_cost).collect();
            let up: Vec<f64> = eps.iter().map(|e| e.unfulfilled as f64).collect();
            let dt: Vec<f64> = eps.iter().map(|e| e.mean_decision_seconds).collect();
            cells.push(BenchCell {
                policy: kind.name().to_string(),
                k,
                episodes: eps.len(),
                mean_total_cost: mean(&tt),
                se_total_cost: standard_error(&tt),
                mean_service_cost: mean(&sc),
                se_service_cost: standard_error(&sc),
                mean_unfulfilled: mean(&up),
                se_unfulfilled: standard_error(&up),
                median_decision_seconds: median(&dt),
            });
        }
    }
    Ok(BenchReport { schema_version: REPORT_SCHEMA_VERSION, scenario: config.scenario.clone(), cells, episodes })
}

#[derive(Debug, Serialize)]
struct MetricRow<'a> {
    k: usize,
    metric: &'a str,
    policy: &'a str,
    value: f64,
}

#[derive(Debug, Serialize)]
struct CostRow<'a> {
    k: usize,
    policy: &'a str,
    episodes: usize,
    mean_total_cost: f64,
    se_total_cost: f64,
    mean_service_cost: f64,
    se_service_cost: f64,
    mean_unfulfilled: f64,
    se_unfulfilled: f64,
}

/// Long-format metrics table: `tt` is mean total cost without penalty,
/// `up` mean unfulfilled lines per episode.
pub fn metrics_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &report.cells {
        w.serialize(MetricRow { k: c.k, metric: "tt", policy: &c.policy, value: c.mean_service_cost })?;
        w.serialize(MetricRow { k: c.k, metric: "up", policy: &c.policy, value: c.mean_unfulfilled })?;
    }
    into_string(w)
}

pub fn cost_by_k_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &report.cells {
        w.serialize(CostRow {
            k: c.k,
            policy: &c.policy,
            episodes: c.episodes,
            mean_total_cost: c.mean_total_cost,
            se_total_cost: c.se_total_cost,
            mean_service_cost: c.mean_service_cost,
            se_service_cost: c.se_service_cost,
            mean_unfulfilled: c.mean_unfulfilled,
            se_unfulfilled: c.se_unfulfilled,
        })?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| CtsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report.json`, `metrics.csv` and `cost_by_k.csv` into `dir`.
/// The CSVs hold no timings and are byte-stable for a fixed report.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report)?)?;
    fs::write(dir.join("cost_by_k.csv"), cost_by_k_csv(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(ks: Vec<usize>, episodes: usize) -> BenchConfig {
        BenchConfig {
            scenario: ScenarioConfig { episode_length: 8, ..ScenarioConfig::default() },
            ks,
            episodes,
            seeds: None,
            workers: 1,
        }
    }

    #[test]
    fn stats_examples() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert!((standard_error(&[1.0, 2.0, 6.0]) - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(standard_error(&[4.0]), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(test_seeds(10, 3), test_seeds(10, 3));
        let a = test_seeds(1, 200);
        let b = test_seeds(4, 200);
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    #[test]
    fn parse_policies() {
        assert_eq!(PolicyKind::parse("pip2", None, None).unwrap().name(), "pip2");
        assert!(PolicyKind::parse("rl", None, None).is_err());
        assert!(PolicyKind::parse("best", None, None).is_err());
        let net = Arc::new(QNetwork::for_world(4, 10, 0.001, 0));
        assert_eq!(PolicyKind::parse("rl", Some(&net), None).unwrap().name(), "rl");
    }

    #[test]
    fn cells_are_consistent_with_episodes() {
        let report = run_benchmark(&small_config(vec![1, 3], 3), &PolicyKind::heuristics()).unwrap();
        assert_eq!(report.cells.len(), 8);
        assert_eq!(report.episodes.len(), 24);
        for c in &report.cells {
            let eps = report.episodes_of(&c.policy, c.k);
            assert_eq!(eps.len(), 3);
            let tt: Vec<f64> = eps.iter().map(|e| e.total_cost).collect();
            assert!((c.mean_total_cost - mean(&tt)).abs() < 1e-9);
            assert!(c.mean_service_cost <= c.mean_total_cost + 1e-9);
        }
        // k = 1: prioritized variants coincide with the plain ones
        let a = report.cell("pi1", 1).unwrap();
        let b = report.cell("pip1", 1).unwrap();
        assert_eq!(a.mean_total_cost, b.mean_total_cost);
    }

    #[test]
    fn reports_round_trip_and_csvs_are_stable() {
        let cfg = small_config(vec![2], 2);
        let r1 = run_benchmark(&cfg, &[PolicyKind::Pi1, PolicyKind::PiP2]).unwrap();
        let r2 = run_benchmark(&cfg, &[PolicyKind::Pi1, PolicyKind::PiP2]).unwrap();
        assert_eq!(metrics_csv(&r1).unwrap(), metrics_csv(&r2).unwrap());
        assert_eq!(cost_by_k_csv(&r1).unwrap(), cost_by_k_csv(&r2).unwrap());
        let back = BenchReport::from_json(&r1.to_json().unwrap()).unwrap();
        assert_eq!(back, r1);
        let csv = metrics_csv(&r1).unwrap();
        assert!(csv.starts_with("k,metric,policy,value\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);

        let dir = tempfile::tempdir().unwrap();
        emit_report(&r1, dir.path()).unwrap();
        for f in ["report.json", "metrics.csv", "cost_by_k.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn parallel_run_matches_sequential_costs() {
        let mut cfg = small_config(vec![2, 4], 2);
        let seq = run_benchmark(&cfg, &PolicyKind::heuristics()).unwrap();
        cfg.workers = 2;
        let par = run_benchmark(&cfg, &PolicyKind::heuristics()).unwrap();
        assert_eq!(cost_by_k_csv(&seq).unwrap(), cost_by_k_csv(&par).unwrap());
    }

    #[test]
    fn exact_policy_reports_certified_steps() {
        let cfg = small_config(vec![2], 1);
        let r = run_benchmark(&cfg, &[PolicyKind::Milp { time_limit: None }, PolicyKind::Pi1]).unwrap();
        let milp = &r.episodes_of("milp", 2)[0];
        assert_eq!(milp.proven_optimal_steps, Some(milp.steps));
        assert_eq!(r.episodes_of("pi1", 2)[0].proven_optimal_steps, None);
        assert!(milp.total_cost <= r.episodes_of("pi1", 2)[0].total_cost + 1e-6);
    }
}
