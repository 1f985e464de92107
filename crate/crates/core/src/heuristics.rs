//! Greedy baseline policies.
//!
//! All four share one engine: customers are served one after another against
//! a working copy of the inventory, so later customers see what earlier ones
//! left. They differ in customer order (arrival vs. nearest-warehouse
//! priority) and in whether a whole order is first offered to a single
//! warehouse.

use crate::domain::{distance, CustomerOrder, Inventory, LineAssignment, SourcingPlan, World};
use crate::error::Result;
use crate::simulator::{Decision, Policy, WorldState};

/// Processing order of the current step's customers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CustomerPriorityOrder(Vec<usize>);

impl CustomerPriorityOrder {
    pub fn arrival(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Ascending distance from each customer to its nearest warehouse, ties
    /// by arrival index.
    pub fn nearest_first(world: &World, orders: &[CustomerOrder]) -> Self {
        let key: Vec<f64> = orders
            .iter()
            .map(|o| {
                world
                    .warehouses
                    .iter()
                    .map(|w| distance(w.location, o.location))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut idx: Vec<usize> = (0..orders.len()).collect();
        idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
        Self(idx)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Nearest warehouse holding at least `qty` of `product`.
fn nearest_feasible(ranked: &[usize], inventory: &Inventory, product: usize, qty: u32) -> Option<usize> {
    ranked.iter().copied().find(|&j| inventory.can_supply(j, product, qty))
}

fn serve_per_line(
    plan: &mut SourcingPlan,
    k: usize,
    order: &CustomerOrder,
    ranked: &[usize],
    inventory: &mut Inventory,
) {
    for (i, d) in order.positive_lines() {
        match nearest_feasible(ranked, inventory, i, d) {
            Some(j) => {
                inventory.take(j, i, d).expect("checked feasible");
                plan.set(k, i, LineAssignment::Warehouse(j));
            }
            None => plan.set(k, i, LineAssignment::Dropped),
        }
    }
}

fn serve_whole_order(
    plan: &mut SourcingPlan,
    k: usize,
    order: &CustomerOrder,
    ranked: &[usize],
    inventory: &mut Inventory,
) -> bool {
    let Some(j) = ranked
        .iter()
        .copied()
        .find(|&j| order.positive_lines().all(|(i, d)| inventory.can_supply(j, i, d)))
    else {
        return false;
    };
    for (i, d) in order.positive_lines() {
        inventory.take(j, i, d).expect("checked feasible");
        plan.set(k, i, LineAssignment::Warehouse(j));
    }
    true
}

/// Runs the greedy engine with an explicit customer order.
pub fn greedy_plan(
    world: &World,
    state: &WorldState,
    priority: &CustomerPriorityOrder,
    whole_order_first: bool,
) -> SourcingPlan {
    let orders = &state.current_orders;
    let mut plan = SourcingPlan::drop_all(orders);
    let mut inventory = state.inventory.clone();
    for &k in priority.as_slice() {
        let order = &orders[k];
        let ranked = world.warehouses_by_distance(order.location);
        if !(whole_order_first && serve_whole_order(&mut plan, k, order, &ranked, &mut inventory)) {
            serve_per_line(&mut plan, k, order, &ranked, &mut inventory);
        }
    }
    plan
}

/// Nearest feasible warehouse per line, customers in arrival order.
pub fn policy_pi1(world: &World, state: &WorldState) -> SourcingPlan {
    greedy_plan(world, state, &CustomerPriorityOrder::arrival(state.current_orders.len()), false)
}

/// Whole order from the nearest warehouse able to cover it, else per line.
pub fn policy_pi2(world: &World, state: &WorldState) -> SourcingPlan {
    greedy_plan(world, state, &CustomerPriorityOrder::arrival(state.current_orders.len()), true)
}

pub fn policy_pi_p1(world: &World, state: &WorldState) -> SourcingPlan {
    greedy_plan(world, state, &CustomerPriorityOrder::nearest_first(world, &state.current_orders), false)
}

pub fn policy_pi_p2(world: &World, state: &WorldState) -> SourcingPlan {
    greedy_plan(world, state, &CustomerPriorityOrder::nearest_first(world, &state.current_orders), true)
}

macro_rules! heuristic_policy {
    ($ty:ident, $name:literal, $f:path) => {
        #[derive(Debug, Default, Clone, Copy)]
        pub struct $ty;

        impl Policy for $ty {
            fn name(&self) -> String {
                $name.into()
            }

            fn decide(&mut self, world: &World, state: &WorldState) -> Result<Decision> {
                Ok($f(world, state).into())
            }
        }
    };
}

heuristic_policy!(Pi1, "pi1", policy_pi1);
heuristic_policy!(Pi2, "pi2", policy_pi2);
heuristic_policy!(PiP1, "pip1", policy_pi_p1);
heuristic_policy!(PiP2, "pip2", policy_pi_p2);
