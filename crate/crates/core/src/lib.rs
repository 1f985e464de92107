//! Cost-to-serve sourcing for multi-warehouse order fulfilment.
//!
//! [`simulator`] generates scenarios and steps the inventory, [`heuristics`]
//! holds the greedy baselines, [`exact_solver`] computes per-step optimal
//! plans, [`rl_agent`] trains a per-product DQN and [`bench`] compares them.

pub mod bench;
pub mod domain;
pub mod error;
pub mod exact_solver;
pub mod heuristics;
pub mod rl_agent;
pub mod simulator;

pub use domain::{
    carton_count, distance, plan_cost, CostBreakdown, CostWeights, CustomerOrder, Inventory, LineAssignment,
    PlanArea, Point, ProductSpec, SourcingPlan, Warehouse, World,
};
pub use error::{CtsError, Result};
pub use simulator::{generate_scenario, run_episode, run_scenario, Decision, Policy, Scenario, ScenarioConfig, WorldState};
