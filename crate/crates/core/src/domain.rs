//! Value types of the sourcing problem and the cost arithmetic every policy
//! is scored with.
//!
//! Indices are zero-based throughout: warehouse `j` in `0..N`, product `i` in
//! `0..M`, and customers are addressed by their position in the current
//! step's order list.

use std::collections::BTreeSet;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{CtsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle `[0, width] x [0, height]` in which warehouses and
/// customers live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanArea {
    pub width: f64,
    pub height: f64,
}

impl Default for PlanArea {
    fn default() -> Self {
        Self { width: 1.0, height: 1.0 }
    }
}

impl PlanArea {
    pub fn contains(&self, p: Point) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub id: usize,
    /// Items of this product that fit in one carton.
    pub quantization: u32,
    /// Maximum stock held at each warehouse, indexed by warehouse.
    pub max_levels: Vec<u32>,
}

impl ProductSpec {
    /// Largest per-warehouse maximum level, used as the product's scale.
    pub fn max_level(&self) -> u32 {
        self.max_levels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warehouse {
    pub id: usize,
    pub location: Point,
    /// Fixed charge each time this warehouse serves at least one line of an
    /// order.
    pub activation_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerOrder {
    pub customer_id: u64,
    pub location: Point,
    /// Requested quantity per product.
    pub demand: Vec<u32>,
}

impl CustomerOrder {
    pub fn positive_lines(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.demand
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, d)| d > 0)
    }

    pub fn is_live(&self) -> bool {
        self.demand.iter().any(|&d| d > 0)
    }
}

/// Decision for one (customer, product) line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineAssignment {
    /// Zero-demand line; nothing to decide.
    Unassigned,
    /// Whole quantity ships from this warehouse.
    Warehouse(usize),
    Dropped,
}

impl LineAssignment {
    pub fn warehouse(self) -> Option<usize> {
        match self {
            LineAssignment::Warehouse(j) => Some(j),
            _ => None,
        }
    }
}

/// Per-customer, per-product assignment for one timestep. Row `k` belongs to
/// the `k`-th order of the step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourcingPlan {
    pub lines: Vec<Vec<LineAssignment>>,
}

impl SourcingPlan {
    /// Plan that drops every positive line.
    pub fn drop_all(orders: &[CustomerOrder]) -> Self {
        let lines = orders
            .iter()
            .map(|o| {
                o.demand
                    .iter()
                    .map(|&d| {
                        if d > 0 {
                            LineAssignment::Dropped
                        } else {
                            LineAssignment::Unassigned
                        }
                    })
                    .collect()
            })
            .collect();
        Self { lines }
    }

    pub fn get(&self, customer: usize, product: usize) -> LineAssignment {
        self.lines[customer][product]
    }

    pub fn set(&mut self, customer: usize, product: usize, a: LineAssignment) {
        self.lines[customer][product] = a;
    }

    /// Checks the plan's shape against the orders and the single-source rule.
    pub fn validate(&self, orders: &[CustomerOrder], n_warehouses: usize) -> Result<()> {
        if self.lines.len() != orders.len() {
            return Err(CtsError::InvalidPlan(format!(
                "plan has {} customer rows for {} orders",
                self.lines.len(),
                orders.len()
            )));
        }
        for (k, (row, order)) in self.lines.iter().zip(orders).enumerate() {
            if row.len() != order.demand.len() {
                return Err(CtsError::InvalidPlan(format!(
                    "customer {k}: {} product entries for {} products",
                    row.len(),
                    order.demand.len()
                )));
            }
            for (i, (&a, &d)) in row.iter().zip(&order.demand).enumerate() {
                match (a, d) {
                    (LineAssignment::Unassigned, 0) => {}
                    (LineAssignment::Unassigned, _) => {
                        return Err(CtsError::InvalidPlan(format!(
                            "customer {k} product {i}: positive demand left unassigned"
                        )))
                    }
                    (_, 0) => {
                        return Err(CtsError::InvalidPlan(format!(
                            "customer {k} product {i}: zero-demand line carries an assignment"
                        )))
                    }
                    (LineAssignment::Warehouse(j), _) if j >= n_warehouses => {
                        return Err(CtsError::InvalidPlan(format!(
                            "customer {k} product {i}: unknown warehouse {j}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Quantity each (warehouse, product) cell ships under this plan,
    /// laid out like [`Inventory`].
    pub fn shipped(&self, orders: &[CustomerOrder], n_warehouses: usize, n_products: usize) -> Vec<u64> {
        let mut out = vec![0u64; n_warehouses * n_products];
        for (row, order) in self.lines.iter().zip(orders) {
            for (i, a) in row.iter().enumerate() {
                if let LineAssignment::Warehouse(j) = *a {
                    out[j * n_products + i] += u64::from(order.demand[i]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub distance_weight: f64,
    pub carton_weight: f64,
    pub warehouse_weight: f64,
    pub unfulfilment_penalty: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            distance_weight: 100.0,
            carton_weight: 5.0,
            warehouse_weight: 40.0,
            unfulfilment_penalty: 100.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.distance_weight,
            self.carton_weight,
            self.warehouse_weight,
            self.unfulfilment_penalty,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(CtsError::InvalidArgument(format!("cost weights must be finite and >= 0: {self:?}")))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            distance_weight: self.distance_weight * factor,
            carton_weight: self.carton_weight * factor,
            warehouse_weight: self.warehouse_weight * factor,
            unfulfilment_penalty: self.unfulfilment_penalty * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub distance_cost: f64,
    pub carton_cost: f64,
    pub warehouse_cost: f64,
    pub penalty_cost: f64,
    pub total: f64,
    pub unfulfilled_count: u64,
}

impl CostBreakdown {
    /// Total with the unfulfilment penalty left out.
    pub fn service_cost(&self) -> f64 {
        self.distance_cost + self.carton_cost + self.warehouse_cost
    }
}

impl AddAssign<&CostBreakdown> for CostBreakdown {
    fn add_assign(&mut self, rhs: &CostBreakdown) {
        self.distance_cost += rhs.distance_cost;
        self.carton_cost += rhs.carton_cost;
        self.warehouse_cost += rhs.warehouse_cost;
        self.penalty_cost += rhs.penalty_cost;
        self.total += rhs.total;
        self.unfulfilled_count += rhs.unfulfilled_count;
    }
}

/// Stock matrix, one row per warehouse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Inventory {
    n_warehouses: usize,
    n_products: usize,
    levels: Vec<u32>,
}

impl Inventory {
    pub fn zeros(n_warehouses: usize, n_products: usize) -> Self {
        Self {
            n_warehouses,
            n_products,
            levels: vec![0; n_warehouses * n_products],
        }
    }

    /// Inventory with every cell at the product's maximum level.
    pub fn full(products: &[ProductSpec], n_warehouses: usize) -> Self {
        let mut inv = Self::zeros(n_warehouses, products.len());
        for (i, p) in products.iter().enumerate() {
            for j in 0..n_warehouses {
                inv.set(j, i, p.max_levels[j]);
            }
        }
        inv
    }

    pub fn n_warehouses(&self) -> usize {
        self.n_warehouses
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    pub fn get(&self, warehouse: usize, product: usize) -> u32 {
        self.levels[warehouse * self.n_products + product]
    }

    pub fn set(&mut self, warehouse: usize, product: usize, level: u32) {
        self.levels[warehouse * self.n_products + product] = level;
    }

    pub fn can_supply(&self, warehouse: usize, product: usize, qty: u32) -> bool {
        self.get(warehouse, product) >= qty
    }

    /// Removes `qty` units, failing without change if the cell holds less.
    pub fn take(&mut self, warehouse: usize, product: usize, qty: u32) -> Result<()> {
        let have = self.get(warehouse, product);
        if have < qty {
            return Err(CtsError::Infeasible {
                product,
                warehouse,
                requested: u64::from(qty),
                available: have,
            });
        }
        self.set(warehouse, product, have - qty);
        Ok(())
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    /// Deducts every shipped quantity of `plan`, atomically.
    pub fn apply(&mut self, plan: &SourcingPlan, orders: &[CustomerOrder]) -> Result<()> {
        let shipped = plan.shipped(orders, self.n_warehouses, self.n_products);
        for (cell, (&have, &want)) in self.levels.iter().zip(&shipped).enumerate() {
            if u64::from(have) < want {
                return Err(CtsError::Infeasible {
                    product: cell % self.n_products,
                    warehouse: cell / self.n_products,
                    requested: want,
                    available: have,
                });
            }
        }
        for (have, want) in self.levels.iter_mut().zip(shipped) {
            *have -= want as u32;
        }
        Ok(())
    }
}

/// Static part of a scenario: where warehouses are, what products exist and
/// how costs are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub area: PlanArea,
    pub warehouses: Vec<Warehouse>,
    pub products: Vec<ProductSpec>,
    pub weights: CostWeights,
}

impl World {
    pub fn n_warehouses(&self) -> usize {
        self.warehouses.len()
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn plan_cost(&self, plan: &SourcingPlan, orders: &[CustomerOrder]) -> Result<CostBreakdown> {
        plan_cost(plan, orders, &self.warehouses, &self.products, &self.weights)
    }

    /// Warehouse indices sorted by distance to `p`, ties by lower index.
    pub fn warehouses_by_distance(&self, p: Point) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.warehouses.len()).collect();
        idx.sort_by(|&a, &b| {
            distance(self.warehouses[a].location, p)
                .total_cmp(&distance(self.warehouses[b].location, p))
                .then(a.cmp(&b))
        });
        idx
    }

    /// Same world with every cost weight and activation cost scaled.
    pub fn with_scaled_costs(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.weights = self.weights.scaled(factor);
        for w in &mut out.warehouses {
            w.activation_cost *= factor;
        }
        out
    }
}

/// Cartons needed to pack `demand_qty` items, `quantization` per carton.
pub fn carton_count(demand_qty: u32, quantization: u32) -> Result<u32> {
    if quantization == 0 {
        return Err(CtsError::InvalidArgument("quantization must be >= 1".into()));
    }
    Ok(demand_qty.div_ceil(quantization))
}

/// Euclidean distance.
pub fn distance(warehouse_loc: Point, customer_loc: Point) -> f64 {
    (warehouse_loc.x - customer_loc.x).hypot(warehouse_loc.y - customer_loc.y)
}

/// Scores a plan. Distance and activation are charged once per distinct
/// (warehouse, customer) pair the plan uses; cartons per served line; the
/// penalty per dropped line with positive demand.
pub fn plan_cost(
    plan: &SourcingPlan,
    orders: &[CustomerOrder],
    warehouses: &[Warehouse],
    products: &[ProductSpec],
    weights: &CostWeights,
) -> Result<CostBreakdown> {
    plan.validate(orders, warehouses.len())?;
    let mut out = CostBreakdown::default();
    for (k, (row, order)) in plan.lines.iter().zip(orders).enumerate() {
        if order.demand.len() != products.len() {
            return Err(CtsError::InvalidPlan(format!(
                "order {k} has {} products, catalog has {}",
                order.demand.len(),
                products.len()
            )));
        }
        let mut trips = BTreeSet::new();
        for (i, &a) in row.iter().enumerate() {
            match a {
                LineAssignment::Warehouse(j) => {
                    trips.insert(j);
                    let cartons = carton_count(order.demand[i], products[i].quantization)?;
                    out.carton_cost += weights.carton_weight * f64::from(cartons);
                }
                LineAssignment::Dropped => {
                    out.unfulfilled_count += 1;
                    out.penalty_cost += weights.unfulfilment_penalty;
                }
                LineAssignment::Unassigned => {}
            }
        }
        for j in trips {
            out.distance_cost += weights.distance_weight * distance(warehouses[j].location, order.location);
            out.warehouse_cost += warehouses[j].activation_cost;
        }
    }
    out.total = out.distance_cost + out.carton_cost + out.warehouse_cost + out.penalty_cost;
    Ok(out)
}
