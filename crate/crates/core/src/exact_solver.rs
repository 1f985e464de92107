//! Exact single-step optimizer.
//!
//! Minimizes distance + carton + activation + penalty cost over every plan
//! that respects the single-source rule and the shared inventory. The search
//! is a depth-first branch-and-bound over (customer, product) lines; each
//! line either ships from one warehouse with enough stock or is dropped.
//!
//! The lower bound at a node is the larger of two relaxations of the
//! remaining lines:
//!
//! * per customer, the exact optimum of that customer alone against the
//!   current stock (enumerating which extra warehouses to open). Lines of one
//!   customer never compete for stock, so only the coupling between
//!   customers is relaxed;
//! * per product, the number of lines that must be dropped because the
//!   remaining stock cannot cover them all, each charged the gap between the
//!   penalty and its cheapest service.

use std::time::{Duration, Instant};

use crate::domain::{carton_count, distance, CostBreakdown, CustomerOrder, Inventory, LineAssignment, SourcingPlan, World};
use crate::error::{CtsError, Result};
use crate::heuristics::{policy_pi1, policy_pi2, policy_pi_p1, policy_pi_p2};
use crate::simulator::{Decision, Policy, WorldState};

/// Largest warehouse count the bitmask bounds support.
pub const MAX_WAREHOUSES: usize = 64;
/// Enumeration guard for [`solve_bruteforce`], in bits of search space.
pub const BRUTEFORCE_BITS: f64 = 24.0;
/// Warehouses beyond which the per-customer bound stops enumerating subsets.
const SUBSET_ENUMERATION_LIMIT: u32 = 12;

/// A frozen single-timestep problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpInstance {
    world: World,
    inventory: Inventory,
    orders: Vec<CustomerOrder>,
}

impl MilpInstance {
    pub fn new(world: &World, state: &WorldState) -> Result<Self> {
        Self::from_parts(world.clone(), state.inventory.clone(), state.current_orders.clone())
    }

    pub fn from_parts(world: World, inventory: Inventory, orders: Vec<CustomerOrder>) -> Result<Self> {
        let n = world.n_warehouses();
        let m = world.n_products();
        if n == 0 || n > MAX_WAREHOUSES {
            return Err(CtsError::InvalidArgument(format!("exact solver supports 1..={MAX_WAREHOUSES} warehouses, got {n}")));
        }
        if inventory.n_warehouses() != n || inventory.n_products() != m {
            return Err(CtsError::InvalidArgument("inventory shape does not match world".into()));
        }
        if let Some(o) = orders.iter().find(|o| o.demand.len() != m) {
            return Err(CtsError::InvalidArgument(format!("order {} has {} products, expected {m}", o.customer_id, o.demand.len())));
        }
        if world.products.iter().any(|p| p.quantization == 0) {
            return Err(CtsError::InvalidArgument("quantization must be >= 1".into()));
        }
        Ok(Self { world, inventory, orders })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn orders(&self) -> &[CustomerOrder] {
        &self.orders
    }

    pub fn positive_lines(&self) -> usize {
        self.orders.iter().map(|o| o.positive_lines().count()).sum()
    }

    fn as_state(&self) -> WorldState {
        WorldState { t: 0, inventory: self.inventory.clone(), current_orders: self.orders.clone() }
    }

    pub fn cost(&self, plan: &SourcingPlan) -> Result<CostBreakdown> {
        self.world.plan_cost(plan, &self.orders)
    }

    /// Whether `plan` fits in this instance's stock.
    pub fn is_feasible(&self, plan: &SourcingPlan) -> bool {
        self.inventory.clone().apply(plan, &self.orders).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub plan: SourcingPlan,
    pub cost: CostBreakdown,
    /// False only when the time limit stopped the search early.
    pub optimal: bool,
    pub nodes: u64,
}

#[derive(Debug, Clone, Copy)]
struct Line {
    customer: usize,
    product: usize,
    demand: u32,
    carton_cost: f64,
}

/// Partial assignment seen at one search node, for instrumentation.
#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct NodeView {
    /// (customer, product, decision) for every line fixed so far.
    pub fixed: Vec<(usize, usize, LineAssignment)>,
    pub accumulated: f64,
    pub bound: f64,
}

struct Search<'a> {
    lines: Vec<Line>,
    cust_lines: Vec<Vec<usize>>,
    prod_lines: Vec<Vec<usize>>,
    /// Distance plus activation for opening warehouse j for customer k.
    trip: Vec<f64>,
    ranked: Vec<Vec<usize>>,
    penalty: f64,
    n: usize,
    m: usize,

    inv: Vec<u32>,
    open: Vec<u32>,
    decided: Vec<Option<LineAssignment>>,
    acc: f64,

    best: f64,
    best_decisions: Vec<LineAssignment>,
    deadline: Option<Instant>,
    timed_out: bool,
    nodes: u64,
    observer: Option<&'a mut dyn FnMut(&NodeView)>,
}

/// `x` minus a relative epsilon; infinite `x` is returned unchanged.
fn below(x: f64) -> f64 {
    if x.is_finite() {
        x - 1e-9 * x.abs().max(1.0)
    } else {
        x
    }
}

impl<'a> Search<'a> {
    fn new(inst: &MilpInstance, deadline: Option<Instant>, observer: Option<&'a mut dyn FnMut(&NodeView)>) -> Self {
        let world = &inst.world;
        let n = world.n_warehouses();
        let m = world.n_products();
        let w = &world.weights;
        let mut lines = Vec::new();
        for (k, o) in inst.orders.iter().enumerate() {
            for (i, d) in o.positive_lines() {
                let cartons = carton_count(d, world.products[i].quantization).expect("validated");
                lines.push(Line { customer: k, product: i, demand: d, carton_cost: w.carton_weight * f64::from(cartons) });
            }
        }
        // Branch on large lines first.
        lines.sort_by(|a, b| b.demand.cmp(&a.demand).then(a.customer.cmp(&b.customer)).then(a.product.cmp(&b.product)));
        let mut cust_lines = vec![Vec::new(); inst.orders.len()];
        let mut prod_lines = vec![Vec::new(); m];
        for (idx, l) in lines.iter().enumerate() {
            cust_lines[l.customer].push(idx);
            prod_lines[l.product].push(idx);
        }
        let mut trip = Vec::with_capacity(inst.orders.len() * n);
        for o in &inst.orders {
            for wh in &world.warehouses {
                trip.push(w.distance_weight * distance(wh.location, o.location) + wh.activation_cost);
            }
        }
        let ranked = inst.orders.iter().map(|o| world.warehouses_by_distance(o.location)).collect();
        let mut inv = vec![0; n * m];
        for j in 0..n {
            for i in 0..m {
                inv[j * m + i] = inst.inventory.get(j, i);
            }
        }
        let n_lines = lines.len();
        Search {
            lines,
            cust_lines,
            prod_lines,
            trip,
            ranked,
            penalty: w.unfulfilment_penalty,
            n,
            m,
            inv,
            open: vec![0; inst.orders.len() * n],
            decided: vec![None; n_lines],
            acc: 0.0,
            best: f64::INFINITY,
            best_decisions: Vec::new(),
            deadline,
            timed_out: false,
            nodes: 0,
            observer,
        }
    }

    fn feasible_mask(&self, l: &Line) -> u64 {
        let mut mask = 0u64;
        for j in 0..self.n {
            if self.inv[j * self.m + l.product] >= l.demand {
                mask |= 1 << j;
            }
        }
        mask
    }

    fn customer_bound(&self) -> f64 {
        let mut total = 0.0;
        let mut masks: Vec<(u64, f64)> = Vec::new();
        for (k, idxs) in self.cust_lines.iter().enumerate() {
            masks.clear();
            let mut union = 0u64;
            for &idx in idxs {
                if self.decided[idx].is_none() {
                    let l = &self.lines[idx];
                    let f = self.feasible_mask(l);
                    union |= f;
                    masks.push((f, l.carton_cost.min(self.penalty)));
                }
            }
            if masks.is_empty() {
                continue;
            }
            let mut opened = 0u64;
            for j in 0..self.n {
                if self.open[k * self.n + j] > 0 {
                    opened |= 1 << j;
                }
            }
            let cand = union & !opened;
            let eval = |set: u64| -> f64 {
                masks.iter().map(|&(f, r)| if f & set != 0 { r } else { self.penalty }).sum()
            };
            let best = if cand.count_ones() > SUBSET_ENUMERATION_LIMIT {
                eval(union)
            } else {
                let mut best = f64::INFINITY;
                let mut sub = cand;
                loop {
                    let mut c = eval(opened | sub);
                    let mut bits = sub;
                    while bits != 0 {
                        let j = bits.trailing_zeros() as usize;
                        c += self.trip[k * self.n + j];
                        bits &= bits - 1;
                    }
                    best = best.min(c);
                    if sub == 0 {
                        break;
                    }
                    sub = (sub - 1) & cand;
                }
                best
            };
            total += best;
        }
        total
    }

    fn product_bound(&self) -> f64 {
        let mut total = 0.0;
        let mut feasible: Vec<u32> = Vec::new();
        let mut gaps_free: Vec<f64> = Vec::new();
        for (i, idxs) in self.prod_lines.iter().enumerate() {
            let stock: u64 = (0..self.n).map(|j| u64::from(self.inv[j * self.m + i])).sum();
            let max_cell = (0..self.n).map(|j| self.inv[j * self.m + i]).max().unwrap_or(0);
            feasible.clear();
            gaps_free.clear();
            let mut remaining = 0usize;
            for &idx in idxs {
                if self.decided[idx].is_some() {
                    continue;
                }
                remaining += 1;
                let l = &self.lines[idx];
                let relaxed = l.carton_cost.min(self.penalty);
                total += relaxed;
                if l.demand > max_cell {
                    // must be dropped
                    total += self.penalty - relaxed;
                } else {
                    feasible.push(l.demand);
                    gaps_free.push(self.penalty - relaxed);
                }
            }
            if remaining == 0 {
                continue;
            }
            feasible.sort_unstable();
            let mut used = 0u64;
            let mut servable = 0usize;
            for &d in &feasible {
                used += u64::from(d);
                if used > stock {
                    break;
                }
                servable += 1;
            }
            let forced = feasible.len() - servable;
            if forced > 0 {
                gaps_free.sort_by(f64::total_cmp);
                total += gaps_free[..forced].iter().sum::<f64>();
            }
        }
        total
    }

    fn lower_bound(&self) -> f64 {
        self.customer_bound().max(self.product_bound())
    }

    fn out_of_time(&mut self) -> bool {
        if self.timed_out {
            return true;
        }
        if self.nodes.is_multiple_of(256) {
            if let Some(d) = self.deadline {
                if Instant::now() >= d {
                    self.timed_out = true;
                }
            }
        }
        self.timed_out
    }

    fn dfs(&mut self, depth: usize) {
        self.nodes += 1;
        if self.out_of_time() {
            return;
        }
        if depth == self.lines.len() {
            if self.acc < below(self.best) {
                self.best = self.acc;
                self.best_decisions = self.decided.iter().map(|d| d.expect("complete")).collect();
            }
            return;
        }
        let bound = self.acc + self.lower_bound();
        if let Some(obs) = self.observer.as_mut() {
            let fixed = self
                .decided
                .iter()
                .enumerate()
                .filter_map(|(idx, d)| d.map(|a| (self.lines[idx].customer, self.lines[idx].product, a)))
                .collect();
            obs(&NodeView { fixed, accumulated: self.acc, bound });
        }
        if bound >= below(self.best) {
            return;
        }
        let line = self.lines[depth];
        let k = line.customer;
        for r in 0..self.ranked[k].len() {
            let j = self.ranked[k][r];
            let cell = j * self.m + line.product;
            if self.inv[cell] < line.demand {
                continue;
            }
            let slot = k * self.n + j;
            let delta = line.carton_cost + if self.open[slot] == 0 { self.trip[slot] } else { 0.0 };
            self.inv[cell] -= line.demand;
            self.open[slot] += 1;
            self.acc += delta;
            self.decided[depth] = Some(LineAssignment::Warehouse(j));
            self.dfs(depth + 1);
            self.decided[depth] = None;
            self.acc -= delta;
            self.open[slot] -= 1;
            self.inv[cell] += line.demand;
            if self.timed_out {
                return;
            }
        }
        self.acc += self.penalty;
        self.decided[depth] = Some(LineAssignment::Dropped);
        self.dfs(depth + 1);
        self.decided[depth] = None;
        self.acc -= self.penalty;
    }

    fn seed_incumbent(&mut self, plan: &SourcingPlan, total: f64) {
        if total < below(self.best) {
            self.best = total;
            self.best_decisions = self.lines.iter().map(|l| plan.get(l.customer, l.product)).collect();
        }
    }

    fn plan_from(&self, orders: &[CustomerOrder], decisions: &[LineAssignment]) -> SourcingPlan {
        let mut plan = SourcingPlan::drop_all(orders);
        for (l, &a) in self.lines.iter().zip(decisions) {
            plan.set(l.customer, l.product, a);
        }
        plan
    }
}

fn run_search(
    inst: &MilpInstance,
    time_limit: Option<Duration>,
    observer: Option<&mut dyn FnMut(&NodeView)>,
) -> ExactSolution {
    let deadline = time_limit.map(|d| Instant::now() + d);
    let mut search = Search::new(inst, deadline, observer);
    // Anytime guarantee: start from the best greedy plan.
    let state = inst.as_state();
    for f in [policy_pi_p2, policy_pi_p1, policy_pi2, policy_pi1] {
        let plan = f(&inst.world, &state);
        let total = inst.cost(&plan).expect("heuristic plans are well formed").total;
        search.seed_incumbent(&plan, total);
    }
    search.dfs(0);
    let plan = search.plan_from(&inst.orders, &search.best_decisions);
    let cost = inst.cost(&plan).expect("search plans are well formed");
    ExactSolution { plan, cost, optimal: !search.timed_out, nodes: search.nodes }
}

/// Branch-and-bound optimum of `inst`. With a time limit the best plan found
/// so far is returned and `optimal` is false if the limit cut the search.
pub fn solve_exact(inst: &MilpInstance, time_limit: Option<Duration>) -> ExactSolution {
    run_search(inst, time_limit, None)
}

#[cfg(test)]
pub(crate) fn solve_exact_observed(inst: &MilpInstance, observer: &mut dyn FnMut(&NodeView)) -> ExactSolution {
    run_search(inst, None, Some(observer))
}

/// Optimum by enumerating every assignment of every positive line. Among
/// equal-cost plans the first in enumeration order wins (warehouse ids
/// ascending, drop last, earlier lines varying slowest).
pub fn solve_bruteforce(inst: &MilpInstance) -> Result<(SourcingPlan, CostBreakdown)> {
    let n = inst.world.n_warehouses();
    let m = inst.world.n_products();
    let lines: Vec<(usize, usize, u32)> = inst
        .orders
        .iter()
        .enumerate()
        .flat_map(|(k, o)| o.positive_lines().map(move |(i, d)| (k, i, d)))
        .collect();
    if lines.len() as f64 * ((n + 1) as f64).log2() > BRUTEFORCE_BITS {
        return Err(CtsError::TooLarge { lines: lines.len(), warehouses: n });
    }
    let mut digits = vec![0usize; lines.len()];
    let mut best: Option<(SourcingPlan, CostBreakdown)> = None;
    let mut shipped = vec![0u64; n * m];
    loop {
        shipped.iter_mut().for_each(|s| *s = 0);
        for (&(_, i, d), &v) in lines.iter().zip(&digits) {
            if v < n {
                shipped[v * m + i] += u64::from(d);
            }
        }
        let fits = (0..n).all(|j| (0..m).all(|i| shipped[j * m + i] <= u64::from(inst.inventory.get(j, i))));
        if fits {
            let mut plan = SourcingPlan::drop_all(&inst.orders);
            for (&(k, i, _), &v) in lines.iter().zip(&digits) {
                if v < n {
                    plan.set(k, i, LineAssignment::Warehouse(v));
                }
            }
            let cost = inst.cost(&plan)?;
            if best.as_ref().is_none_or(|(_, b)| cost.total < below(b.total)) {
                best = Some((plan, cost));
            }
        }
        // odometer, last line fastest
        let mut pos = lines.len();
        loop {
            if pos == 0 {
                return Ok(best.expect("dropping everything is always feasible"));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] <= n {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// The exact solver as a policy (`milp`).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactPolicy {
    pub time_limit: Option<Duration>,
}

impl Policy for ExactPolicy {
    fn name(&self) -> String {
        "milp".into()
    }

    fn decide(&mut self, world: &World, state: &WorldState) -> Result<Decision> {
        let inst = MilpInstance::new(world, state)?;
        let sol = solve_exact(&inst, self.time_limit);
        Ok(Decision { plan: sol.plan, proven_optimal: Some(sol.optimal) })
    }
}
