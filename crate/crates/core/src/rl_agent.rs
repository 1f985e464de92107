//! Deep Q-learning agent that sources one product line at a time.
//!
//! A single small MLP scores the warehouses for each product of an order;
//! the same parameters serve every product, and the product is identified
//! to the network only through its features (a one-hot position plus the
//! availability matrix of the whole order). Warehouses that cannot cover a
//! line are masked out both for greedy and for exploratory choices, so the
//! agent never over-draws stock.

use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{distance, CustomerOrder, Inventory, LineAssignment, SourcingPlan, World};
use crate::error::{CtsError, Result};
use crate::heuristics::CustomerPriorityOrder;
use crate::simulator::{generate_scenario, Decision, Policy, ScenarioConfig, WorldState};

pub const HIDDEN_LAYERS: [usize; 4] = [40, 20, 20, 20];
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Input width for `n` warehouses and `m` products:
/// distances, availabilities, demand, one-hot product, availability matrix.
pub fn feature_len(n: usize, m: usize) -> usize {
    2 * n + 1 + m + n * m
}

/// Feature vector of one product line, laid out as
/// `[distance; N] [availability; N] [demand] [one-hot; M] [A; M x N]`, with
/// `A` flattened product-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductStateVector(pub Vec<f64>);

impl ProductStateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Bit `j` set iff warehouse `j` can cover the line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionMask(pub u64);

impl ActionMask {
    pub fn for_line(inventory: &Inventory, product: usize, demand: u32) -> Self {
        let mut bits = 0u64;
        for j in 0..inventory.n_warehouses() {
            if inventory.can_supply(j, product, demand) {
                bits |= 1 << j;
            }
        }
        Self(bits)
    }

    pub fn allows(self, j: usize) -> bool {
        self.0 >> j & 1 == 1
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&j| self.allows(j))
    }
}

/// Builds the state vector of `product` for `customer` against `inventory`.
/// Distances are scaled by the plan-area diagonal, quantities by the
/// product's largest maximum level.
pub fn featurize(world: &World, inventory: &Inventory, customer: &CustomerOrder, product: usize) -> ProductStateVector {
    let n = world.n_warehouses();
    let m = world.n_products();
    let mut x = Vec::with_capacity(feature_len(n, m));
    let diag = world.area.diagonal();
    for w in &world.warehouses {
        x.push(distance(w.location, customer.location) / diag);
    }
    let scale = f64::from(world.products[product].max_level().max(1));
    for j in 0..n {
        x.push(f64::from(inventory.get(j, product)) / scale);
    }
    x.push(f64::from(customer.demand[product]) / scale);
    x.extend((0..m).map(|i| if i == product { 1.0 } else { 0.0 }));
    for i in 0..m {
        let d = customer.demand[i];
        x.extend((0..n).map(|j| if inventory.can_supply(j, i, d) { 1.0 } else { 0.0 }));
    }
    ProductStateVector(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// MLP with tanh hidden layers and a linear output, parameters stored flat:
/// for each layer the `out x in` weight matrix (row-major) then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    sizes: Vec<usize>,
    params: Vec<f64>,
    pub optimizer: AdamState,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl QNetwork {
    /// Xavier-uniform weights, zero biases.
    pub fn new(sizes: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(CtsError::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let optimizer = AdamState::new(params.len(), learning_rate);
        Ok(Self { sizes: sizes.to_vec(), params, optimizer })
    }

    /// Network sized for a world with the standard hidden layers.
    pub fn for_world(n_warehouses: usize, n_products: usize, learning_rate: f64, seed: u64) -> Self {
        let mut sizes = vec![feature_len(n_warehouses, n_products)];
        sizes.extend(HIDDEN_LAYERS);
        sizes.push(n_warehouses);
        Self::new(&sizes, learning_rate, seed).expect("valid sizes")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(CtsError::Shape { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(CtsError::Shape { expected: self.input_len(), got: x.len() });
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output (input first).
    fn forward_cached(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize_with(self.sizes.len(), Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for l in 0..self.sizes.len() - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (prev, rest) = acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l == last { z } else { z.tanh() });
            }
        }
    }

    /// Accumulates `d(output . dout)/d(params)` into `grad`.
    fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[base + o * n_in..base + (o + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[base + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[base..base + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            // input of layer l is a tanh output
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        self.forward_cached(x, &mut acts);
        Ok(acts.pop().expect("output layer"))
    }

    /// Evaluates the shared network on every product vector of a step.
    pub fn forward_batch(&self, xs: &[ProductStateVector]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.forward(x.as_slice())).collect()
    }

    /// Gradient of the sum of all outputs with respect to every parameter.
    pub fn output_sum_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        self.forward_cached(x, &mut acts);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&acts, &vec![1.0; self.output_len()], &mut grad);
        Ok(grad)
    }

    /// Squared TD error `(Q(x)[action] - target)^2` and its gradient.
    pub fn td_loss_gradient(&self, x: &[f64], action: usize, target: f64) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if action >= self.output_len() {
            return Err(CtsError::Shape { expected: self.output_len(), got: action + 1 });
        }
        let mut acts = Vec::new();
        self.forward_cached(x, &mut acts);
        let err = acts.last().expect("output")[action] - target;
        let mut dout = vec![0.0; self.output_len()];
        dout[action] = 2.0 * err;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&acts, &dout, &mut grad);
        Ok((err * err, grad))
    }

    pub fn apply_gradient(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(CtsError::Shape { expected: self.params.len(), got: grad.len() });
        }
        self.optimizer.update(&mut self.params, grad);
        Ok(())
    }

    pub fn to_checkpoint(&self, n_warehouses: usize, n_products: usize) -> Checkpoint {
        let mut layers = Vec::new();
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            layers.push(LayerParams {
                inputs: n_in,
                outputs: n_out,
                weights: self.params[off..off + n_in * n_out].to_vec(),
                bias: self.params[off + n_in * n_out..off + n_in * n_out + n_out].to_vec(),
            });
            off += n_in * n_out + n_out;
        }
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            n_warehouses,
            n_products,
            layer_sizes: self.sizes.clone(),
            layers,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, learning_rate: f64) -> Result<Self> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CtsError::Config(format!("unsupported checkpoint schema_version {}", ckpt.schema_version)));
        }
        let sizes = &ckpt.layer_sizes;
        if sizes.len() != ckpt.layers.len() + 1
            || sizes[0] != feature_len(ckpt.n_warehouses, ckpt.n_products)
            || *sizes.last().unwrap_or(&0) != ckpt.n_warehouses
        {
            return Err(CtsError::Config("checkpoint layer sizes do not match its world dimensions".into()));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for (l, layer) in ckpt.layers.iter().enumerate() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            if layer.inputs != n_in || layer.outputs != n_out || layer.weights.len() != n_in * n_out || layer.bias.len() != n_out {
                return Err(CtsError::Config(format!("checkpoint layer {l} has inconsistent shape")));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        let optimizer = AdamState::new(params.len(), learning_rate);
        Ok(Self { sizes: sizes.clone(), params, optimizer })
    }
}

/// Portable network snapshot: shapes plus flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub n_warehouses: usize,
    pub n_products: usize,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn q_forward(net: &QNetwork, x: &ProductStateVector) -> Result<Vec<f64>> {
    net.forward(x.as_slice())
}

/// Highest Q among allowed actions, lowest index on ties.
pub fn masked_argmax(q: &[f64], mask: ActionMask) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in mask.iter().take_while(|&j| j < q.len()) {
        if best.is_none_or(|b| q[j] > q[b]) {
            best = Some(j);
        }
    }
    best
}

/// Largest Q among allowed actions.
pub fn masked_max(q: &[f64], mask: ActionMask) -> Option<f64> {
    masked_argmax(q, mask).map(|j| q[j])
}

/// One product line decided by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDecision {
    pub product: usize,
    pub features: ProductStateVector,
    pub mask: ActionMask,
    pub choice: LineAssignment,
}

/// Decides every positive line of `order` against `inventory`, which is
/// not modified. With probability `epsilon` a line picks uniformly among its
/// feasible warehouses, otherwise the masked argmax; lines with no feasible
/// warehouse are dropped.
pub fn decide_lines<R: Rng + ?Sized>(
    net: &QNetwork,
    world: &World,
    inventory: &Inventory,
    order: &CustomerOrder,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<LineDecision>> {
    let mut out = Vec::new();
    for (i, d) in order.positive_lines() {
        let features = featurize(world, inventory, order, i);
        let mask = ActionMask::for_line(inventory, i, d);
        let choice = if mask.is_empty() {
            LineAssignment::Dropped
        } else if epsilon > 0.0 && rng.random_bool(epsilon.min(1.0)) {
            let pick = rng.random_range(0..mask.count() as usize);
            LineAssignment::Warehouse(mask.iter().nth(pick).expect("pick < count"))
        } else {
            let q = net.forward(features.as_slice())?;
            LineAssignment::Warehouse(masked_argmax(&q, mask).expect("mask non-empty"))
        };
        out.push(LineDecision { product: i, features, mask, choice });
    }
    Ok(out)
}

/// Per-product assignment vector for one customer.
pub fn select_actions<R: Rng + ?Sized>(
    net: &QNetwork,
    world: &World,
    inventory: &Inventory,
    order: &CustomerOrder,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<LineAssignment>> {
    let mut row = vec![LineAssignment::Unassigned; order.demand.len()];
    for d in decide_lines(net, world, inventory, order, epsilon, rng)? {
        row[d.product] = d.choice;
    }
    Ok(row)
}

/// Decides a whole step: customers in nearest-warehouse priority order,
/// each seeing the stock left by the ones before. Returns the plan and the
/// line decisions indexed by customer.
pub fn plan_step<R: Rng + ?Sized>(
    net: &QNetwork,
    world: &World,
    state: &WorldState,
    epsilon: f64,
    rng: &mut R,
) -> Result<(SourcingPlan, Vec<Vec<LineDecision>>)> {
    let orders = &state.current_orders;
    let mut plan = SourcingPlan::drop_all(orders);
    let mut decisions = vec![Vec::new(); orders.len()];
    let mut inventory = state.inventory.clone();
    for &k in CustomerPriorityOrder::nearest_first(world, orders).as_slice() {
        let lines = decide_lines(net, world, &inventory, &orders[k], epsilon, rng)?;
        for d in &lines {
            plan.set(k, d.product, d.choice);
            if let LineAssignment::Warehouse(j) = d.choice {
                inventory.take(j, d.product, orders[k].demand[d.product])?;
            }
        }
        decisions[k] = lines;
    }
    Ok((plan, decisions))
}

/// Per-product rewards for one served customer: the negated distance of the
/// product's own warehouse plus the order's full carton, activation and
/// penalty costs. Zero-demand products get 0.
pub fn compute_rewards(world: &World, order: &CustomerOrder, row: &[LineAssignment]) -> Result<Vec<f64>> {
    let plan = SourcingPlan { lines: vec![row.to_vec()] };
    let cost = world.plan_cost(&plan, std::slice::from_ref(order))?;
    let shared = cost.carton_cost + cost.warehouse_cost + cost.penalty_cost;
    Ok(row
        .iter()
        .map(|a| match a {
            LineAssignment::Unassigned => 0.0,
            LineAssignment::Dropped => -shared,
            LineAssignment::Warehouse(j) => {
                -(world.weights.distance_weight * distance(world.warehouses[*j].location, order.location) + shared)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Feasible actions at the next decision point.
    pub next_mask: ActionMask,
    pub terminal: bool,
    /// Decision step the transition was recorded at.
    pub group: u64,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `batch` distinct transitions, uniformly; `None` if too few stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(index::sample(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientAveraging {
    /// Every sampled line transition weighs the same.
    #[default]
    Batch,
    /// Gradients are first averaged within each decision step present in
    /// the batch, then across steps.
    DecisionStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all decision steps over which epsilon anneals linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    /// Hard target-network sync period, in updates.
    pub target_sync_every: usize,
    pub episodes: usize,
    /// Decision steps between gradient updates.
    pub train_every: usize,
    /// Multiplier applied to rewards before they enter TD targets.
    pub reward_scale: f64,
    pub gradient_averaging: GradientAveraging,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            gamma: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            replay_capacity: 50_000,
            target_sync_every: 500,
            episodes: 2_000,
            train_every: 1,
            reward_scale: 0.01,
            gradient_averaging: GradientAveraging::Batch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.epsilon_start)
            && (0.0..=1.0).contains(&self.epsilon_end)
            && (0.0..=1.0).contains(&self.epsilon_decay_fraction)
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.replay_capacity >= self.batch_size
            && self.target_sync_every > 0
            && self.train_every > 0
            && self.reward_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CtsError::Config(format!("invalid training configuration: {self:?}")))
        }
    }

    /// Exploration rate after `step` of `total_steps` decision steps.
    pub fn epsilon_at(&self, step: usize, total_steps: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * total_steps as f64;
        if horizon <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// One gradient update from a replay sample. `None` when the buffer holds
/// fewer than `batch_size` transitions.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut QNetwork,
    target: &QNetwork,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let Some(batch) = buffer.sample(config.batch_size, rng) else {
        return Ok(None);
    };
    let weights: Vec<f64> = match config.gradient_averaging {
        GradientAveraging::Batch => vec![1.0 / batch.len() as f64; batch.len()],
        GradientAveraging::DecisionStep => {
            let mut groups: Vec<u64> = batch.iter().map(|t| t.group).collect();
            groups.sort_unstable();
            groups.dedup();
            batch
                .iter()
                .map(|t| {
                    let size = batch.iter().filter(|u| u.group == t.group).count();
                    1.0 / (groups.len() * size) as f64
                })
                .collect()
        }
    };
    let mut grad = vec![0.0; net.params.len()];
    let mut loss = 0.0;
    let mut acts = Vec::new();
    let mut dout = vec![0.0; net.output_len()];
    for (t, w) in batch.iter().zip(&weights) {
        let bootstrap = if t.terminal {
            0.0
        } else {
            masked_max(&target.forward(&t.next_state)?, t.next_mask).unwrap_or(0.0)
        };
        let y = t.reward + config.gamma * bootstrap;
        net.check_input(&t.state)?;
        net.forward_cached(&t.state, &mut acts);
        let err = acts.last().expect("output")[t.action] - y;
        loss += w * err * err;
        dout.iter_mut().for_each(|d| *d = 0.0);
        dout[t.action] = 2.0 * w * err;
        net.backward(&acts, &dout, &mut grad);
    }
    net.apply_gradient(&grad)?;
    Ok(Some(loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub episode: usize,
    /// Total cost including the unfulfilment penalty.
    pub total_cost: f64,
    pub unfulfilled: u64,
    pub epsilon: f64,
    pub mean_loss: Option<f64>,
}

/// Safety counters gathered while acting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyStats {
    pub decision_steps: u64,
    pub line_decisions: u64,
    pub infeasible_selections: u64,
    pub negative_inventory_events: u64,
}

impl SafetyStats {
    /// Checks each decided line against the stock it was decided on.
    pub fn record(&mut self, decisions: &[LineDecision], order: &CustomerOrder, inventory_seen: &Inventory) {
        for d in decisions {
            self.line_decisions += 1;
            if let LineAssignment::Warehouse(j) = d.choice {
                if !d.mask.allows(j) || !inventory_seen.can_supply(j, d.product, order.demand[d.product]) {
                    self.infeasible_selections += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: QNetwork,
    pub curve: Vec<EpisodeStat>,
    pub safety: SafetyStats,
    pub updates: u64,
    pub elapsed: Duration,
}

/// Last (state, action, scaled reward) of a line awaiting its successor.
type Pending = (Vec<f64>, usize, f64);

/// Trains a network on episodes of `scenario`; episode `e` uses seed
/// `scenario.seed + e`.
pub fn train(config: &TrainConfig, scenario: &ScenarioConfig) -> Result<TrainOutcome> {
    train_with_progress(config, scenario, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    scenario: &ScenarioConfig,
    mut progress: impl FnMut(&EpisodeStat),
) -> Result<TrainOutcome> {
    config.validate()?;
    scenario.validate()?;
    let started = Instant::now();
    let n = scenario.n_warehouses;
    let m = scenario.n_products;
    let mut net = QNetwork::for_world(n, m, config.learning_rate, config.seed);
    let mut target = net.clone();
    let mut last_good = net.clone();
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_EDD0_u64);
    let total_steps = config.episodes * scenario.episode_length;
    let mut step = 0usize;
    let mut updates = 0u64;
    let mut curve = Vec::with_capacity(config.episodes);
    let mut safety = SafetyStats::default();

    for episode in 0..config.episodes {
        let (scen, _) = generate_scenario(&scenario.with_seed(scenario.seed.wrapping_add(episode as u64)))?;
        let world = &scen.world;
        let mut state = scen.initial_state();
        // per (customer slot, product): last (state, action, reward) awaiting its successor
        let mut pending: Vec<Vec<Option<Pending>>> = Vec::new();
        let mut episode_cost = 0.0;
        let mut unfulfilled = 0;
        let mut losses = Vec::new();
        let mut epsilon = config.epsilon_at(step, total_steps);

        for _ in 0..scenario.episode_length {
            epsilon = config.epsilon_at(step, total_steps);
            let (plan, decisions) = plan_step(&net, world, &state, epsilon, &mut rng)?;
            // replay the priority order to audit each customer's view of stock
            let mut seen = state.inventory.clone();
            for &k in CustomerPriorityOrder::nearest_first(world, &state.current_orders).as_slice() {
                safety.record(&decisions[k], &state.current_orders[k], &seen);
                for d in &decisions[k] {
                    if let LineAssignment::Warehouse(j) = d.choice {
                        let qty = state.current_orders[k].demand[d.product];
                        if seen.take(j, d.product, qty).is_err() {
                            safety.negative_inventory_events += 1;
                        }
                    }
                }
            }
            let (next, cost) = scen.apply_plan(&state, &plan)?;
            safety.decision_steps += 1;
            episode_cost += cost.total;
            unfulfilled += cost.unfulfilled_count;

            if pending.len() < state.current_orders.len() {
                pending.resize_with(state.current_orders.len(), || vec![None; m]);
            }
            for (k, order) in state.current_orders.iter().enumerate() {
                let rewards = compute_rewards(world, order, &plan.lines[k])?;
                for d in &decisions[k] {
                    let LineAssignment::Warehouse(j) = d.choice else { continue };
                    if let Some((s, a, r)) = pending[k][d.product].take() {
                        buffer.push(Transition {
                            state: s,
                            action: a,
                            reward: r,
                            next_state: d.features.0.clone(),
                            next_mask: d.mask,
                            terminal: false,
                            group: step as u64 - 1,
                        });
                    }
                    pending[k][d.product] = Some((d.features.0.clone(), j, rewards[d.product] * config.reward_scale));
                }
            }

            state = next;
            step += 1;
            if step.is_multiple_of(config.train_every) {
                if let Some(loss) = train_step(&mut net, &target, &buffer, config, &mut rng)? {
                    if !loss.is_finite() || !net.is_finite() {
                        return Err(CtsError::Diverged { episode, last_good: Box::new(last_good) });
                    }
                    losses.push(loss);
                    updates += 1;
                    if updates.is_multiple_of(config.target_sync_every as u64) {
                        target.params.copy_from_slice(&net.params);
                    }
                }
            }
        }
        let width = feature_len(n, m);
        for slot in pending.iter_mut() {
            for p in slot.iter_mut() {
                if let Some((s, a, r)) = p.take() {
                    buffer.push(Transition {
                        state: s,
                        action: a,
                        reward: r,
                        next_state: vec![0.0; width],
                        next_mask: ActionMask::default(),
                        terminal: true,
                        group: step as u64 - 1,
                    });
                }
            }
        }
        last_good = net.clone();
        let stat = EpisodeStat {
            episode,
            total_cost: episode_cost,
            unfulfilled,
            epsilon,
            mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        };
        progress(&stat);
        curve.push(stat);
    }
    Ok(TrainOutcome { net, curve, safety, updates, elapsed: started.elapsed() })
}

/// Trained network as a policy (`rl`). Greedy unless `epsilon > 0`.
#[derive(Debug, Clone)]
pub struct DqnPolicy {
    pub net: QNetwork,
    pub epsilon: f64,
    rng: ChaCha8Rng,
    pub safety: SafetyStats,
}

impl DqnPolicy {
    pub fn new(net: QNetwork) -> Self {
        Self::with_epsilon(net, 0.0, 0)
    }

    pub fn with_epsilon(net: QNetwork, epsilon: f64, seed: u64) -> Self {
        Self { net, epsilon, rng: ChaCha8Rng::seed_from_u64(seed), safety: SafetyStats::default() }
    }
}

impl Policy for DqnPolicy {
    fn name(&self) -> String {
        "rl".into()
    }

    fn decide(&mut self, world: &World, state: &WorldState) -> Result<Decision> {
        if self.net.input_len() != feature_len(world.n_warehouses(), world.n_products())
            || self.net.output_len() != world.n_warehouses()
        {
            return Err(CtsError::Shape {
                expected: feature_len(world.n_warehouses(), world.n_products()),
                got: self.net.input_len(),
            });
        }
        let (plan, decisions) = plan_step(&self.net, world, state, self.epsilon, &mut self.rng)?;
        let mut seen = state.inventory.clone();
        for &k in CustomerPriorityOrder::nearest_first(world, &state.current_orders).as_slice() {
            self.safety.record(&decisions[k], &state.current_orders[k], &seen);
            for d in &decisions[k] {
                if let LineAssignment::Warehouse(j) = d.choice {
                    if seen.take(j, d.product, state.current_orders[k].demand[d.product]).is_err() {
                        self.safety.negative_inventory_events += 1;
                    }
                }
            }
        }
        self.safety.decision_steps += 1;
        Ok(plan.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CostWeights, PlanArea, Point, ProductSpec, Warehouse};
    use proptest::prelude::*;
    use rand::Rng;

    fn quad_world(m: usize) -> World {
        World {
            area: PlanArea::default(),
            warehouses: [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
                .iter()
                .enumerate()
                .map(|(id, &(x, y))| Warehouse { id, location: Point::new(x, y), activation_cost: 40.0 })
                .collect(),
            products: (0..m).map(|id| ProductSpec { id, quantization: 4, max_levels: vec![50; 4] }).collect(),
            weights: CostWeights::default(),
        }
    }

    fn order(demand: Vec<u32>) -> CustomerOrder {
        CustomerOrder { customer_id: 0, location: Point::new(0.3, 0.2), demand }
    }

    #[test]
    fn feature_layout() {
        let w = quad_world(10);
        let inv = Inventory::full(&w.products, 4);
        let mut demand = vec![5; 10];
        demand[4] = 0;
        let x = featurize(&w, &inv, &order(demand), 2);
        assert_eq!(x.0.len(), 59);
        assert_eq!(feature_len(4, 10), 59);
        let onehot = &x.0[9..19];
        assert_eq!(onehot.iter().sum::<f64>(), 1.0);
        assert_eq!(onehot[2], 1.0);
        // every product is coverable everywhere: matrix all ones
        assert!(x.0[19..].iter().all(|&a| a == 1.0));
        assert!((x.0[8] - 5.0 / 50.0).abs() < 1e-12);
        assert!((x.0[4] - 1.0).abs() < 1e-12);
        let d0 = distance(Point::new(0.25, 0.25), Point::new(0.3, 0.2)) / 2f64.sqrt();
        assert!((x.0[0] - d0).abs() < 1e-12);
    }

    #[test]
    fn availability_rows_follow_stock() {
        let w = quad_world(3);
        let mut inv = Inventory::full(&w.products, 4);
        inv.set(1, 0, 2);
        let o = order(vec![3, 0, 1]);
        let x = featurize(&w, &inv, &o, 1);
        let a = &x.0[2 * 4 + 1 + 3..];
        assert_eq!(&a[0..4], &[1.0, 0.0, 1.0, 1.0]);
        // zero demand is coverable everywhere
        assert_eq!(&a[4..8], &[1.0; 4]);
        assert_eq!(&a[8..12], &[1.0; 4]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = QNetwork::for_world(4, 10, 0.001, 1);
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = ProductStateVector((0..59).map(|i| i as f64 * 0.1).collect());
        assert_eq!(q_forward(&net, &x).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn forward_is_pure_and_checks_shape() {
        let net = QNetwork::for_world(4, 10, 0.001, 3);
        let x = ProductStateVector(vec![0.3; 59]);
        assert_eq!(q_forward(&net, &x).unwrap(), q_forward(&net, &x).unwrap());
        assert!(matches!(net.forward(&[0.0; 58]), Err(CtsError::Shape { expected: 59, got: 58 })));
        assert_eq!(net.sizes(), &[59, 40, 20, 20, 20, 4]);
    }

    fn central_difference(net: &QNetwork, f: impl Fn(&QNetwork) -> f64, h: f64) -> Vec<f64> {
        let mut probe = net.clone();
        (0..net.params().len())
            .map(|p| {
                let orig = probe.params()[p];
                probe.params_mut()[p] = orig + h;
                let up = f(&probe);
                probe.params_mut()[p] = orig - h;
                let down = f(&probe);
                probe.params_mut()[p] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = QNetwork::new(&[6, 5, 4, 3], 0.001, 11).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bp = net.output_sum_gradient(&x).unwrap();
            let fd = central_difference(&net, |n| n.forward(&x).unwrap().iter().sum(), 1e-5);
            assert!(max_rel_err(&bp, &fd) < 1e-4);
            let (_, bp) = net.td_loss_gradient(&x, 1, 0.7).unwrap();
            let fd = central_difference(&net, |n| (n.forward(&x).unwrap()[1] - 0.7).powi(2), 1e-5);
            assert!(max_rel_err(&bp, &fd) < 1e-4);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut net = QNetwork::for_world(2, 2, 0.001, 5);
        let before = net.params().to_vec();
        let zeros = vec![0.0; before.len()];
        net.apply_gradient(&zeros).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert_eq!(net.optimizer.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(2, 0.01);
        let mut p = vec![1.0, 1.0];
        st.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn masked_argmax_examples() {
        let q = [1.0, 3.0, 2.0, 2.5];
        assert_eq!(masked_argmax(&q, ActionMask(0b1101)), Some(3));
        assert_eq!(masked_argmax(&q, ActionMask(0)), None);
        assert_eq!(masked_argmax(&[2.0, 2.0, 1.0], ActionMask(0b111)), Some(0));
        assert_eq!(masked_max(&q, ActionMask(0b0101)), Some(2.0));
    }

    #[test]
    fn single_feasible_warehouse_is_forced() {
        let w = quad_world(1);
        let net = QNetwork::for_world(4, 1, 0.001, 2);
        let mut inv = Inventory::zeros(4, 1);
        inv.set(3, 0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for eps in [0.0, 0.5, 1.0] {
            for _ in 0..20 {
                let row = select_actions(&net, &w, &inv, &order(vec![7]), eps, &mut rng).unwrap();
                assert_eq!(row, vec![LineAssignment::Warehouse(3)]);
            }
        }
        inv.set(3, 0, 6);
        let row = select_actions(&net, &w, &inv, &order(vec![7]), 0.0, &mut rng).unwrap();
        assert_eq!(row, vec![LineAssignment::Dropped]);
    }

    #[test]
    fn plan_step_deducts_between_customers() {
        let w = quad_world(1);
        let net = QNetwork::for_world(4, 1, 0.001, 2);
        let mut inv = Inventory::zeros(4, 1);
        inv.set(0, 0, 10);
        let state = WorldState {
            t: 0,
            inventory: inv.clone(),
            current_orders: vec![
                CustomerOrder { customer_id: 0, location: Point::new(0.9, 0.9), demand: vec![6] },
                CustomerOrder { customer_id: 1, location: Point::new(0.25, 0.25), demand: vec![6] },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (plan, _) = plan_step(&net, &w, &state, 0.0, &mut rng).unwrap();
        // the customer sitting on warehouse 0 is served first
        assert_eq!(plan.get(1, 0), LineAssignment::Warehouse(0));
        assert_eq!(plan.get(0, 0), LineAssignment::Dropped);
        assert_eq!(state.inventory, inv);
    }

    #[test]
    fn reward_examples() {
        let w = World {
            warehouses: vec![Warehouse { id: 0, location: Point::new(0.5, 0.0), activation_cost: 40.0 }],
            ..quad_world(2)
        };
        let mut w = w;
        for p in &mut w.products {
            p.max_levels = vec![50];
        }
        let o = CustomerOrder { customer_id: 0, location: Point::new(0.5, 0.5), demand: vec![8, 0] };
        let r = compute_rewards(&w, &o, &[LineAssignment::Warehouse(0), LineAssignment::Unassigned]).unwrap();
        assert!((r[0] + 100.0).abs() < 1e-9);
        assert_eq!(r[1], 0.0);

        let o = CustomerOrder { customer_id: 0, location: Point::new(0.5, 0.5), demand: vec![8, 3] };
        let r = compute_rewards(&w, &o, &[LineAssignment::Dropped, LineAssignment::Dropped]).unwrap();
        assert_eq!(r, vec![-200.0, -200.0]);
        let r = compute_rewards(&w, &o, &[LineAssignment::Warehouse(0), LineAssignment::Warehouse(0)]).unwrap();
        assert_eq!(r[0], r[1]);
        assert!((r[0] + (50.0 + 10.0 + 5.0 + 40.0)).abs() < 1e-9);
    }

    fn transition(reward: f64, terminal: bool) -> Transition {
        Transition {
            state: vec![0.2; 6],
            action: 1,
            reward,
            next_state: vec![0.4; 6],
            next_mask: ActionMask(0b111),
            terminal,
            group: 0,
        }
    }

    #[test]
    fn replay_buffer_ring_and_sampling() {
        let mut buf = ReplayBuffer::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(buf.sample(1, &mut rng).is_none());
        for i in 0..12 {
            buf.push(transition(i as f64, false));
        }
        assert_eq!(buf.len(), 5);
        let rewards: Vec<f64> = buf.sample(5, &mut rng).unwrap().iter().map(|t| t.reward).collect();
        let mut sorted = rewards.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(buf.sample(6, &mut rng).is_none());
    }

    #[test]
    fn train_step_without_enough_data_is_a_no_op() {
        let mut net = QNetwork::new(&[6, 5, 3], 0.001, 1).unwrap();
        let target = net.clone();
        let buf = ReplayBuffer::new(10);
        let before = net.clone();
        let cfg = TrainConfig { batch_size: 4, replay_capacity: 10, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(train_step(&mut net, &target, &buf, &cfg, &mut rng).unwrap(), None);
        assert_eq!(net, before);
    }

    #[test]
    fn zero_discount_targets_reward_only() {
        let mut net = QNetwork::new(&[6, 5, 3], 0.001, 1).unwrap();
        let target = net.clone();
        let mut buf = ReplayBuffer::new(10);
        buf.push(transition(0.8, false));
        let cfg = TrainConfig { batch_size: 1, replay_capacity: 10, gamma: 0.0, ..TrainConfig::default() };
        let q = net.forward(&[0.2; 6]).unwrap()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = train_step(&mut net, &target, &buf, &cfg, &mut rng).unwrap().unwrap();
        assert!((loss - (q - 0.8).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn repeated_transition_loss_converges() {
        let mut net = QNetwork::new(&[6, 8, 8, 3], 0.001, 4).unwrap();
        let target = net.clone();
        let mut buf = ReplayBuffer::new(64);
        for _ in 0..32 {
            buf.push(transition(-0.5, true));
        }
        let cfg = TrainConfig { batch_size: 32, replay_capacity: 64, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut losses = Vec::new();
        for _ in 0..3000 {
            losses.push(train_step(&mut net, &target, &buf, &cfg, &mut rng).unwrap().unwrap());
        }
        assert!(losses[2999] < 1e-4 * losses[0].max(1e-3));
        // non-increasing up to Adam overshoot noise, checked on a coarse grid
        for w in losses.chunks(300).collect::<Vec<_>>().windows(2) {
            assert!(w[1][0] <= w[0][0] + 1e-9);
        }
    }

    #[test]
    fn decision_step_averaging_reweights_groups() {
        let mut a = QNetwork::new(&[6, 5, 3], 0.001, 1).unwrap();
        let mut b = a.clone();
        let target = a.clone();
        let mut buf = ReplayBuffer::new(3);
        let mut t0 = transition(1.0, true);
        t0.group = 0;
        let mut t1 = transition(1.0, true);
        t1.group = 0;
        let mut t2 = transition(-1.0, true);
        t2.group = 1;
        t2.state = vec![-0.3; 6];
        for t in [t0, t1, t2] {
            buf.push(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch_cfg = TrainConfig { batch_size: 3, replay_capacity: 3, ..TrainConfig::default() };
        let step_cfg = TrainConfig { gradient_averaging: GradientAveraging::DecisionStep, ..batch_cfg.clone() };
        let lb = train_step(&mut a, &target, &buf, &batch_cfg, &mut rng).unwrap().unwrap();
        let ls = train_step(&mut b, &target, &buf, &step_cfg, &mut rng).unwrap().unwrap();
        let q0 = target.forward(&[0.2; 6]).unwrap()[1];
        let q2 = target.forward(&[-0.3; 6]).unwrap()[1];
        let e0 = (q0 - 1.0).powi(2);
        let e2 = (q2 + 1.0).powi(2);
        assert!((lb - (2.0 * e0 + e2) / 3.0).abs() < 1e-12);
        assert!((ls - (e0 + e2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn parameters_stay_finite_under_long_random_training() {
        let mut net = QNetwork::for_world(4, 10, 0.001, 9);
        let mut target = net.clone();
        let mut buf = ReplayBuffer::new(2048);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for g in 0..2048u64 {
            buf.push(Transition {
                state: (0..59).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: rng.random_range(0..4),
                reward: rng.random_range(-1.0..0.0),
                next_state: (0..59).map(|_| rng.random_range(-1.0..1.0)).collect(),
                next_mask: ActionMask(rng.random_range(0..16)),
                terminal: rng.random_bool(0.05),
                group: g,
            });
        }
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
        for u in 0..10_000 {
            let loss = train_step(&mut net, &target, &buf, &cfg, &mut rng).unwrap().unwrap();
            assert!(loss.is_finite());
            if u % 500 == 0 {
                target = net.clone();
            }
        }
        assert!(net.is_finite());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon_at(0, 1000), 1.0);
        assert!((cfg.epsilon_at(300, 1000) - 0.525).abs() < 1e-12);
        assert!((cfg.epsilon_at(600, 1000) - 0.05).abs() < 1e-12);
        assert!((cfg.epsilon_at(999, 1000) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let net = QNetwork::for_world(4, 10, 0.001, 21);
        let json = net.to_checkpoint(4, 10).to_json().unwrap();
        let back = QNetwork::from_checkpoint(&Checkpoint::from_json(&json).unwrap(), 0.001).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.sizes(), net.sizes());
        let mut bad = net.to_checkpoint(4, 10);
        bad.layers[1].bias.pop();
        assert!(QNetwork::from_checkpoint(&bad, 0.001).is_err());
        let mut bad = net.to_checkpoint(4, 10);
        bad.n_products = 9;
        assert!(QNetwork::from_checkpoint(&bad, 0.001).is_err());
    }

    #[test]
    fn shared_weights_make_decisions_equivariant() {
        let w = quad_world(5);
        let net = QNetwork::for_world(4, 5, 0.001, 8);
        let mut inv = Inventory::full(&w.products, 4);
        inv.set(0, 1, 0);
        inv.set(2, 3, 1);
        let o = order(vec![3, 4, 1, 2, 6]);
        let xs: Vec<ProductStateVector> = (0..5).map(|i| featurize(&w, &inv, &o, i)).collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<ProductStateVector> = perm.iter().map(|&p| xs[p].clone()).collect();
        let q = net.forward_batch(&xs).unwrap();
        let qp = net.forward_batch(&permuted).unwrap();
        for (slot, &p) in perm.iter().enumerate() {
            assert_eq!(qp[slot], q[p]);
        }
    }

    #[test]
    fn tiny_training_run_records_curve() {
        let scenario = ScenarioConfig { episode_length: 10, replenishment_period: 10, ..ScenarioConfig::default() };
        let cfg = TrainConfig { episodes: 6, batch_size: 16, replay_capacity: 500, target_sync_every: 5, ..TrainConfig::default() };
        let out = train(&cfg, &scenario).unwrap();
        assert_eq!(out.curve.len(), 6);
        assert!(out.updates > 0);
        assert_eq!(out.safety.infeasible_selections, 0);
        assert_eq!(out.safety.negative_inventory_events, 0);
        assert_eq!(out.safety.decision_steps, 60);
        assert!(out.net.is_finite());
        let again = train(&cfg, &scenario).unwrap();
        assert_eq!(again.net.params(), out.net.params());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masked_choices_are_always_feasible(seed in 0u64..1000, eps in 0.0f64..=1.0, stock in proptest::collection::vec(0u32..12, 12)) {
            let w = quad_world(3);
            let net = QNetwork::for_world(4, 3, 0.001, seed);
            let mut inv = Inventory::zeros(4, 3);
            for j in 0..4 {
                for i in 0..3 {
                    inv.set(j, i, stock[j * 3 + i]);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = order(vec![rng.random_range(1..10), rng.random_range(0..10), rng.random_range(1..10)]);
            let row = select_actions(&net, &w, &inv, &o, eps, &mut rng).unwrap();
            for (i, a) in row.iter().enumerate() {
                match a {
                    LineAssignment::Warehouse(j) => prop_assert!(inv.can_supply(*j, i, o.demand[i])),
                    LineAssignment::Dropped => prop_assert!((0..4).all(|j| !inv.can_supply(j, i, o.demand[i]))),
                    LineAssignment::Unassigned => prop_assert_eq!(o.demand[i], 0),
                }
            }
        }
    }
}
