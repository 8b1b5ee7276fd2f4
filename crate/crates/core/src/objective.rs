//! Planner objectives h_s and their gradients with respect to the dispatch.

use serde::{Deserialize, Serialize};

use crate::dispatch::{DispatchProblem, DispatchSolution};
use crate::scalar::Scalar;

/// Carbon weight used when none is given, $/ton CO2.
pub const DEFAULT_CARBON_WEIGHT: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("dispatch vector has {got} entries, problem layout has {expected}")]
pub struct LayoutMismatch {
    pub got: usize,
    pub expected: usize,
}

/// A differentiable planner objective evaluated on a scenario's dispatch.
pub trait PlannerObjective<T: Scalar>: Sync {
    fn value(&self, prob: &DispatchProblem<T>, x: &[T]) -> T;
    fn gradient(&self, prob: &DispatchProblem<T>, x: &[T]) -> Vec<T>;
}

/// Shipped objectives. Both are linear in the dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
pub enum ObjectiveSpec<T: Scalar> {
    /// Fuel plus shedding cost.
    OperationalCost,
    /// Operational cost plus `carbon_weight` ($/ton) times emissions.
    EmissionsAware { carbon_weight: T },
}

impl<T: Scalar> ObjectiveSpec<T> {
    pub fn emissions_aware(carbon_weight: T) -> Self {
        ObjectiveSpec::EmissionsAware { carbon_weight }
    }

    pub fn carbon_weight(&self) -> T {
        match self {
            ObjectiveSpec::OperationalCost => T::zero(),
            ObjectiveSpec::EmissionsAware { carbon_weight } => *carbon_weight,
        }
    }

    pub fn with_carbon_weight(&self, w: T) -> Self {
        match self {
            ObjectiveSpec::OperationalCost => ObjectiveSpec::OperationalCost,
            ObjectiveSpec::EmissionsAware { .. } => ObjectiveSpec::EmissionsAware { carbon_weight: w },
        }
    }

    pub fn is_valid(&self) -> bool {
        let w = self.carbon_weight();
        w >= T::zero() && w.is_finite()
    }
}

impl<T: Scalar> PlannerObjective<T> for ObjectiveSpec<T> {
    fn value(&self, prob: &DispatchProblem<T>, x: &[T]) -> T {
        let cost = prob.operational_cost(x);
        match self {
            ObjectiveSpec::OperationalCost => cost,
            ObjectiveSpec::EmissionsAware { carbon_weight } => cost + *carbon_weight * prob.emissions(x),
        }
    }

    fn gradient(&self, prob: &DispatchProblem<T>, _x: &[T]) -> Vec<T> {
        match self {
            ObjectiveSpec::OperationalCost => prob.operating_cost.clone(),
            ObjectiveSpec::EmissionsAware { carbon_weight } => prob
                .operating_cost
                .iter()
                .zip(&prob.emissions_rate)
                .map(|(c, e)| *c + *carbon_weight * *e)
                .collect(),
        }
    }
}

fn check<T: Scalar>(prob: &DispatchProblem<T>, sol: &DispatchSolution<T>) -> Result<(), LayoutMismatch> {
    if sol.x.len() != prob.num_vars() {
        return Err(LayoutMismatch {
            got: sol.x.len(),
            expected: prob.num_vars(),
        });
    }
    Ok(())
}

/// h_s at a dispatch solution.
pub fn evaluate<T: Scalar>(
    objective: &dyn PlannerObjective<T>,
    prob: &DispatchProblem<T>,
    sol: &DispatchSolution<T>,
) -> Result<T, LayoutMismatch> {
    check(prob, sol)?;
    Ok(objective.value(prob, &sol.x))
}

/// ∇h_s at a dispatch solution.
pub fn gradient<T: Scalar>(
    objective: &dyn PlannerObjective<T>,
    prob: &DispatchProblem<T>,
    sol: &DispatchSolution<T>,
) -> Result<Vec<T>, LayoutMismatch> {
    check(prob, sol)?;
    let g = objective.gradient(prob, &sol.x);
    if g.len() != prob.num_vars() {
        return Err(LayoutMismatch {
            got: g.len(),
            expected: prob.num_vars(),
        });
    }
    Ok(g)
}
