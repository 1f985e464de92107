//! Episode generation and inventory dynamics.
//!
//! A [`ScenarioConfig`] is expanded by [`generate_scenario`] into a frozen
//! [`Scenario`]: warehouse layout, product catalog and per-product demand
//! distributions. Randomness is split into independent sub-streams derived
//! from the master seed (catalog, layout, per-step demand, per-step
//! arrivals), so arrivals never depend on the decisions a policy makes and
//! changing `k` leaves the demand of the first customers of each step alone.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{
    CostBreakdown, CostWeights, CustomerOrder, Inventory, PlanArea, Point, ProductSpec, SourcingPlan, Warehouse, World,
};
use crate::error::{CtsError, Result};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const TRACE_SCHEMA_VERSION: u32 = 1;

const STREAM_CATALOG: u64 = 1;
const STREAM_LAYOUT: u64 = 2;
const STREAM_DEMAND: u64 = 3;
const STREAM_ARRIVALS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandFamily {
    Uniform,
    Gamma,
    Exponential,
    Normal,
    Poisson,
}

impl DemandFamily {
    pub const ALL: [DemandFamily; 5] = [
        DemandFamily::Uniform,
        DemandFamily::Gamma,
        DemandFamily::Exponential,
        DemandFamily::Normal,
        DemandFamily::Poisson,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Exactly `k` customers every step.
    #[default]
    Exact,
    /// Uniformly between 1 and `k` customers every step.
    UpTo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandSpec {
    /// Fixed family per product; drawn uniformly per product when absent.
    pub families: Option<Vec<DemandFamily>>,
    /// Each product's mean demand is uniform in
    /// `[min_mean, max(min_mean, mean_fraction * mean max level)]`.
    pub mean_fraction: f64,
    pub min_mean: f64,
    /// Samples are clipped to `[0, clip_multiple * mean]` before rounding.
    pub clip_multiple: f64,
}

impl Default for DemandSpec {
    fn default() -> Self {
        Self {
            families: None,
            mean_fraction: 0.15,
            min_mean: 1.0,
            clip_multiple: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub n_warehouses: usize,
    pub n_products: usize,
    pub replenishment_period: usize,
    pub max_customers_per_step: usize,
    pub arrival_mode: ArrivalMode,
    pub area: PlanArea,
    pub demand: DemandSpec,
    /// Inclusive integer range for each (product, warehouse) maximum level.
    pub max_level_range: [u32; 2],
    /// Multiply every drawn maximum level by `max_customers_per_step`, so
    /// stock keeps pace with the number of orders per step.
    pub stock_scales_with_customers: bool,
    /// Inclusive integer range for each product's items-per-carton.
    pub quantization_range: [u32; 2],
    pub weights: CostWeights,
    /// Per-warehouse activation costs; `weights.warehouse_weight` for all
    /// warehouses when absent.
    pub activation_costs: Option<Vec<f64>>,
    pub episode_length: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            n_warehouses: 4,
            n_products: 10,
            replenishment_period: 50,
            max_customers_per_step: 1,
            arrival_mode: ArrivalMode::Exact,
            area: PlanArea::default(),
            demand: DemandSpec::default(),
            max_level_range: [20, 100],
            stock_scales_with_customers: true,
            quantization_range: [2, 10],
            weights: CostWeights::default(),
            activation_costs: None,
            episode_length: 50,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_customers(&self, k: usize) -> Self {
        Self { max_customers_per_step: k, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CtsError::Config(msg.to_string()));
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(CtsError::Config(format!(
                "unsupported scenario schema_version {} (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_warehouses == 0
            || self.n_products == 0
            || self.replenishment_period == 0
            || self.max_customers_per_step == 0
            || self.episode_length == 0
        {
            return bad("n_warehouses, n_products, replenishment_period, max_customers_per_step and episode_length must be >= 1");
        }
        if self.max_level_range[0] > self.max_level_range[1] {
            return bad("max_level_range must be [low, high] with low <= high");
        }
        let [qlo, qhi] = self.quantization_range;
        if qlo == 0 || qlo > qhi {
            return bad("quantization_range must be [low, high] with 1 <= low <= high");
        }
        if !(self.area.width > 0.0 && self.area.height > 0.0) {
            return bad("plan area must have positive extent");
        }
        let d = &self.demand;
        if !(d.mean_fraction >= 0.0 && d.min_mean > 0.0 && d.clip_multiple > 0.0) {
            return bad("demand parameters must be positive");
        }
        if let Some(f) = &d.families {
            if f.len() != self.n_products {
                return bad("demand.families must list one family per product");
            }
        }
        if let Some(a) = &self.activation_costs {
            if a.len() != self.n_warehouses || a.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return bad("activation_costs must hold one non-negative value per warehouse");
            }
        }
        self.weights.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Frozen demand distribution of one product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductDemand {
    pub family: DemandFamily,
    pub mean: f64,
    pub clip_multiple: f64,
}

impl ProductDemand {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let mu = self.mean;
        let raw: f64 = match self.family {
            DemandFamily::Uniform => rng.random_range(0.0..=2.0 * mu),
            DemandFamily::Gamma => Gamma::new(2.0, mu / 2.0).expect("mean > 0").sample(rng),
            DemandFamily::Exponential => Exp::new(1.0 / mu).expect("mean > 0").sample(rng),
            DemandFamily::Normal => Normal::new(mu, mu / 2.0).expect("mean > 0").sample(rng),
            DemandFamily::Poisson => Poisson::new(mu).expect("mean > 0").sample(rng),
        };
        raw.clamp(0.0, self.clip_multiple * mu).round() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub products: Vec<ProductDemand>,
}

impl DemandModel {
    /// One customer's demand vector. Redraws until at least one line is
    /// positive.
    pub fn sample_order_demand<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        loop {
            let d: Vec<u32> = self.products.iter().map(|p| p.sample(rng)).collect();
            if d.iter().any(|&x| x > 0) {
                return d;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: usize,
    pub inventory: Inventory,
    pub current_orders: Vec<CustomerOrder>,
}

/// A fully expanded scenario: static world plus frozen demand model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub world: World,
    pub demand: DemandModel,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (concern, index) pair of a master seed.
pub(crate) fn sub_stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}

/// Warehouse sites: cell centers of a regular grid when `n` is a perfect
/// square (quadrant centers for four), uniform random otherwise.
fn warehouse_layout(n: usize, area: PlanArea, seed: u64) -> Vec<Point> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        let mut out = Vec::with_capacity(n);
        for cx in 0..side {
            for cy in 0..side {
                out.push(Point::new(
                    area.width * (cx as f64 + 0.5) / side as f64,
                    area.height * (cy as f64 + 0.5) / side as f64,
                ));
            }
        }
        out
    } else {
        let mut rng = sub_stream(seed, STREAM_LAYOUT, 0);
        (0..n)
            .map(|_| Point::new(rng.random_range(0.0..=area.width), rng.random_range(0.0..=area.height)))
            .collect()
    }
}

/// Expands a config into its world, frozen demand model and initial state.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<(Scenario, WorldState)> {
    config.validate()?;
    let n = config.n_warehouses;
    let m = config.n_products;
    let mut rng = sub_stream(config.seed, STREAM_CATALOG, 0);

    let [lo, hi] = config.max_level_range;
    let [qlo, qhi] = config.quantization_range;
    let mut products = Vec::with_capacity(m);
    let mut demand = Vec::with_capacity(m);
    for i in 0..m {
        let max_levels: Vec<u32> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let quantization = rng.random_range(qlo..=qhi);
        let family = match &config.demand.families {
            Some(f) => {
                // keep the stream aligned with the random-family case
                let _: usize = rng.random_range(0..DemandFamily::ALL.len());
                f[i]
            }
            None => DemandFamily::ALL[rng.random_range(0..DemandFamily::ALL.len())],
        };
        let avg_level = max_levels.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
        let upper = (config.demand.mean_fraction * avg_level).max(config.demand.min_mean);
        let mean = rng.random_range(config.demand.min_mean..=upper);
        let max_levels = if config.stock_scales_with_customers {
            let k = u32::try_from(config.max_customers_per_step).unwrap_or(u32::MAX);
            max_levels.into_iter().map(|x| x.saturating_mul(k)).collect()
        } else {
            max_levels
        };
        products.push(ProductSpec { id: i, quantization, max_levels });
        demand.push(ProductDemand { family, mean, clip_multiple: config.demand.clip_multiple });
    }

    let warehouses = warehouse_layout(n, config.area, config.seed)
        .into_iter()
        .enumerate()
        .map(|(id, location)| Warehouse {
            id,
            location,
            activation_cost: config
                .activation_costs
                .as_ref()
                .map_or(config.weights.warehouse_weight, |a| a[id]),
        })
        .collect();

    let scenario = Scenario {
        config: config.clone(),
        world: World { area: config.area, warehouses, products, weights: config.weights },
        demand: DemandModel { products: demand },
    };
    let state = WorldState {
        t: 0,
        inventory: Inventory::full(&scenario.world.products, n),
        current_orders: scenario.sample_arrivals(0, config.max_customers_per_step),
    };
    Ok((scenario, state))
}

impl Scenario {
    /// Orders arriving at step `t` with at most `k` customers. Locations and
    /// counts come from the arrivals stream, demands from the demand stream,
    /// both keyed by `t` only.
    pub fn sample_arrivals(&self, t: usize, k: usize) -> Vec<CustomerOrder> {
        let k = k.max(1);
        let mut arrivals = sub_stream(self.config.seed, STREAM_ARRIVALS, t as u64);
        let mut demand = sub_stream(self.config.seed, STREAM_DEMAND, t as u64);
        let count = match self.config.arrival_mode {
            ArrivalMode::Exact => k,
            ArrivalMode::UpTo => arrivals.random_range(1..=k),
        };
        let area = self.config.area;
        (0..count)
            .map(|c| CustomerOrder {
                customer_id: ((t as u64) << 32) | c as u64,
                location: Point::new(
                    arrivals.random_range(0.0..=area.width),
                    arrivals.random_range(0.0..=area.height),
                ),
                demand: self.demand.sample_order_demand(&mut demand),
            })
            .collect()
    }

    pub fn initial_state(&self) -> WorldState {
        WorldState {
            t: 0,
            inventory: Inventory::full(&self.world.products, self.world.n_warehouses()),
            current_orders: self.sample_arrivals(0, self.config.max_customers_per_step),
        }
    }

    pub fn replenish(&self, inventory: &mut Inventory) {
        *inventory = Inventory::full(&self.world.products, self.world.n_warehouses());
    }

    /// Executes `plan` against `state`: deducts shipped stock, scores the
    /// plan, advances the clock and replenishes on period boundaries. The
    /// next state's orders are the arrivals of the new step (none once the
    /// episode is over).
    pub fn apply_plan(&self, state: &WorldState, plan: &SourcingPlan) -> Result<(WorldState, CostBreakdown)> {
        let cost = self.world.plan_cost(plan, &state.current_orders)?;
        let mut inventory = state.inventory.clone();
        inventory.apply(plan, &state.current_orders)?;
        let t = state.t + 1;
        if t.is_multiple_of(self.config.replenishment_period) {
            self.replenish(&mut inventory);
        }
        let current_orders = if t < self.config.episode_length {
            self.sample_arrivals(t, self.config.max_customers_per_step)
        } else {
            Vec::new()
        };
        Ok((WorldState { t, inventory, current_orders }, cost))
    }
}

/// What a policy returns for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub plan: SourcingPlan,
    /// Set by policies that can certify optimality of their plan.
    pub proven_optimal: Option<bool>,
}

impl From<SourcingPlan> for Decision {
    fn from(plan: SourcingPlan) -> Self {
        Self { plan, proven_optimal: None }
    }
}

pub trait Policy {
    fn name(&self) -> String;

    fn decide(&mut self, world: &World, state: &WorldState) -> Result<Decision>;
}

/// Drops every line.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullPolicy;

impl Policy for NullPolicy {
    fn name(&self) -> String {
        "null".into()
    }

    fn decide(&mut self, _world: &World, state: &WorldState) -> Result<Decision> {
        Ok(SourcingPlan::drop_all(&state.current_orders).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema_version: u32,
    pub t: usize,
    /// Inventory seen by the policy, before the plan is applied.
    pub inventory: Inventory,
    pub orders: Vec<CustomerOrder>,
    pub plan: SourcingPlan,
    pub cost: CostBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proven_optimal: Option<bool>,
    /// Wall-clock seconds spent inside the policy. Not exported.
    #[serde(skip)]
    pub decision_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub policy: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub totals: CostBreakdown,
}

impl EpisodeTrace {
    /// Mean seconds per decision, skipping the first step as warm-up when
    /// there is more than one.
    pub fn mean_decision_seconds(&self) -> f64 {
        let skip = usize::from(self.steps.len() > 1);
        let timed = &self.steps[skip..];
        if timed.is_empty() {
            return 0.0;
        }
        timed.iter().map(|s| s.decision_seconds).sum::<f64>() / timed.len() as f64
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    /// Reads step records back; totals are recomputed from the steps.
    pub fn read_jsonl<R: BufRead>(input: R, policy: &str, seed: u64) -> Result<Self> {
        let mut steps = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line)?;
            if rec.schema_version != TRACE_SCHEMA_VERSION {
                return Err(CtsError::Config(format!("unsupported trace schema_version {}", rec.schema_version)));
            }
            steps.push(rec);
        }
        let mut totals = CostBreakdown::default();
        for s in &steps {
            totals += &s.cost;
        }
        Ok(Self { policy: policy.to_string(), seed, steps, totals })
    }
}

/// Runs one episode of `scenario` under `policy`.
pub fn run_scenario(scenario: &Scenario, policy: &mut dyn Policy) -> Result<EpisodeTrace> {
    let mut state = scenario.initial_state();
    let mut steps = Vec::with_capacity(scenario.config.episode_length);
    let mut totals = CostBreakdown::default();
    let name = policy.name();
    for step in 0..scenario.config.episode_length {
        let started = Instant::now();
        let decision = policy
            .decide(&scenario.world, &state)
            .map_err(|e| CtsError::Policy { policy: name.clone(), step, source: Box::new(e) })?;
        let decision_seconds = started.elapsed().as_secs_f64();
        let (next, cost) = scenario
            .apply_plan(&state, &decision.plan)
            .map_err(|e| CtsError::Policy { policy: name.clone(), step, source: Box::new(e) })?;
        totals += &cost;
        steps.push(StepRecord {
            schema_version: TRACE_SCHEMA_VERSION,
            t: state.t,
            inventory: state.inventory,
            orders: state.current_orders,
            plan: decision.plan,
            cost,
            proven_optimal: decision.proven_optimal,
            decision_seconds,
        });
        state = next;
    }
    Ok(EpisodeTrace { policy: name, seed: scenario.config.seed, steps, totals })
}

pub fn run_episode(config: &ScenarioConfig, policy: &mut dyn Policy) -> Result<EpisodeTrace> {
    let (scenario, _) = generate_scenario(config)?;
    run_scenario(&scenario, policy)
}
