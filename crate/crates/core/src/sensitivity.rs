//! Implicit differentiation of the dispatch map and the planning gradient.
//!
//! At a converged central point the perturbed KKT map
//!
//! ```txt
//!   F(x, ν, μ; η) = [ Q x + q + Gᵀν + Aᵀμ ;  G x − h(η) ;  μ∘(b(η) − A x) − τ ] = 0
//! ```
//!
//! defines `x*(η)` implicitly. For a direction `v` in dispatch space we solve
//! the adjoint system `(∂F/∂z)ᵀ y = (v, 0, 0)` and return `−(∂F/∂η)ᵀ y`.
//! Eliminating the complementarity block leaves the same reduced matrix
//! `[H Gᵀ; G 0]` as the last Newton step, so the solver's factorization is
//! reused when it is attached to the solution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{DispatchProblem, DispatchSolution};
use crate::linalg::NotPositiveDefinite;
use crate::network::InvestmentCosts;
use crate::objective::{self, LayoutMismatch, PlannerObjective};
use crate::qp::KktFactorization;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SensitivityError {
    #[error("scenario {0}: dispatch solution is not converged")]
    NotConverged(usize),
    #[error("scenario {scenario_id}: KKT Jacobian is singular ({source})")]
    Singular {
        scenario_id: usize,
        #[source]
        source: NotPositiveDefinite,
    },
    #[error("scenario {scenario_id}: {source}")]
    Layout {
        scenario_id: usize,
        #[source]
        source: LayoutMismatch,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty batch")]
    EmptyBatch,
}

impl SensitivityError {
    pub fn scenario_id(&self) -> Option<usize> {
        match self {
            SensitivityError::NotConverged(id) => Some(*id),
            SensitivityError::Singular { scenario_id, .. } | SensitivityError::Layout { scenario_id, .. } => {
                Some(*scenario_id)
            }
            _ => None,
        }
    }
}

/// Δ, the gradient of the planning objective over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GradientEstimate<T: Scalar> {
    pub delta: Vec<T>,
    pub batch_ids: Vec<usize>,
    pub iteration: Option<usize>,
}

/// `(∂x*/∂η)ᵀ v` by one adjoint solve.
pub fn vjp<T: Scalar>(prob: &DispatchProblem<T>, sol: &DispatchSolution<T>, v: &[T]) -> Result<Vec<T>, SensitivityError> {
    let id = prob.scenario_id;
    if !sol.converged {
        return Err(SensitivityError::NotConverged(id));
    }
    let n = prob.num_vars();
    if v.len() != n || sol.x.len() != n || sol.mu.len() != prob.num_inequalities() {
        return Err(SensitivityError::Dimension(format!(
            "direction has {} entries, solution {} and problem {n}",
            v.len(),
            sol.x.len()
        )));
    }
    let owned;
    let fact = match &sol.factorization {
        Some(f) => f,
        None => {
            let w: Vec<T> = sol.mu.iter().zip(&sol.slacks).map(|(m, s)| *m / *s).collect();
            owned = KktFactorization::new(&prob.qp, &w).map_err(|source| SensitivityError::Singular { scenario_id: id, source })?;
            &owned
        }
    };
    let zeros = vec![T::zero(); prob.num_equalities()];
    let (y_x, y_eq) = fact.solve(&prob.qp, v, &zeros);
    // complementarity block: y_c = −S⁻¹ A y_x; the η-term needs μ∘y_c
    let a_y = prob.qp.ineq.mul_vec(&y_x);
    let mu_yc: Vec<T> = a_y
        .iter()
        .zip(&sol.mu)
        .zip(&sol.slacks)
        .map(|((ay, m), s)| -*m * *ay / *s)
        .collect();
    let from_eq = prob.eq_dependence.mul_t_vec(&y_eq);
    let from_ineq = prob.ineq_dependence.mul_t_vec(&mu_yc);
    Ok(from_eq.iter().zip(&from_ineq).map(|(e, i)| *e - *i).collect())
}

/// Δ = γ + (1/|batch|) Σ_s (∂x*_s)ᵀ ∇h_s(x*_s).
///
/// Per-scenario adjoint solves run in parallel; the sum is reduced in batch
/// order so the result does not depend on the thread count.
pub fn planning_gradient<T: Scalar>(
    gamma: &InvestmentCosts<T>,
    batch: &[(&DispatchProblem<T>, &DispatchSolution<T>)],
    objective: &dyn PlannerObjective<T>,
) -> Result<GradientEstimate<T>, SensitivityError> {
    if batch.is_empty() {
        return Err(SensitivityError::EmptyBatch);
    }
    let k = gamma.len();
    let parts: Vec<Result<Vec<T>, SensitivityError>> = batch
        .par_iter()
        .map(|(prob, sol)| {
            let g = objective::gradient(objective, prob, sol).map_err(|source| SensitivityError::Layout {
                scenario_id: prob.scenario_id,
                source,
            })?;
            vjp(prob, sol, &g)
        })
        .collect();
    let mut sum = vec![T::zero(); k];
    for part in parts {
        let part = part?;
        if part.len() != k {
            return Err(SensitivityError::Dimension(format!("scenario gradient has {} entries, K = {k}", part.len())));
        }
        for (s, p) in sum.iter_mut().zip(part) {
            *s += p;
        }
    }
    let count = T::from_usize(batch.len()).unwrap();
    Ok(GradientEstimate {
        delta: gamma.gamma().iter().zip(sum).map(|(g, s)| *g + s / count).collect(),
        batch_ids: batch.iter().map(|(p, _)| p.scenario_id).collect(),
        iteration: None,
    })
}
