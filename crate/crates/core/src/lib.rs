//! Multi-value capacity expansion planning.
//!
//! A plan is a capacity vector η inside a box. Each scenario is dispatched by
//! a regularized interior-point QP, the dispatch map is differentiated through
//! its perturbed KKT conditions, and η is improved by projected stochastic
//! gradient descent. Everything numerical is generic over [`Scalar`]; the
//! `*64` / `*32` aliases below are the concrete instantiations.

pub mod checkpoint;
pub mod dispatch;
pub mod linalg;
pub mod network;
pub mod joint;
pub mod objective;
pub mod planner;
pub mod qp;
pub mod scalar;
pub mod scenario;
pub mod sensitivity;
pub mod synthetic;

pub use scalar::Scalar;

pub type Network64 = network::Network<f64>;
pub type Network32 = network::Network<f32>;
pub type PlanningCase64 = network::PlanningCase<f64>;
pub type PlanningCase32 = network::PlanningCase<f32>;
pub type ScenarioSet64 = scenario::ScenarioSet<f64>;
pub type ScenarioSet32 = scenario::ScenarioSet<f32>;
pub type DispatchProblem64 = dispatch::DispatchProblem<f64>;
pub type DispatchProblem32 = dispatch::DispatchProblem<f32>;
pub type DispatchSolution64 = dispatch::DispatchSolution<f64>;
pub type DispatchSolution32 = dispatch::DispatchSolution<f32>;
pub type Planner64<'a> = planner::Planner<'a, f64>;
pub type Planner32<'a> = planner::Planner<'a, f32>;
pub type PlanState64 = planner::PlanState<f64>;
pub type PlanState32 = planner::PlanState<f32>;
