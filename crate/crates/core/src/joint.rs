//! The single-level program over (η, x₁..x_S) for the case h_s = c_s.
//!
//! When the planner objective is the dispatch's own cost, minimizing over η
//! and all dispatches together gives the planning optimum directly:
//!
//! ```txt
//!   minimize   γᵀ(η − η^min) + (1/S) Σ_s c_s(x_s)
//!   subject to A_s x_s − D_s η ≤ b0_s,   G_s x_s − E_s η = h0_s,   η^min ≤ η ≤ η^max
//! ```
//!
//! It is solved with the same interior-point code on the stacked system and
//! serves as a reference optimum for the descent planner. The η block carries
//! the dispatch regularizer ε as well, so the stacked Hessian stays definite
//! when η is interior.

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatchProblem;
use crate::linalg::SparseMatrix;
use crate::network::{ParameterBounds, InvestmentCosts};
use crate::qp::{IpmOptions, QpError, QpFailure, QuadraticProgram};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct JointSolution<T: Scalar> {
    pub eta: Vec<T>,
    /// Optimal value, including the regularizer inside each c_s.
    pub objective: T,
    pub iterations: usize,
}

/// Builds the stacked program. Variable order is η followed by each scenario's x.
pub fn stacked_program<T: Scalar>(
    problems: &[DispatchProblem<T>],
    costs: &InvestmentCosts<T>,
    bounds: &ParameterBounds<T>,
) -> Result<QuadraticProgram<T>, QpError> {
    let k = bounds.len();
    if costs.len() != k || problems.iter().any(|p| p.parameter_count() != k) {
        return Err(QpError::Dimension("parameter dimension differs across inputs".into()));
    }
    let weight = T::one() / T::from_usize(problems.len().max(1)).unwrap();
    let total = k + problems.iter().map(|p| p.num_vars()).sum::<usize>();

    let eps = problems.first().map_or(T::zero(), |p| p.settings.epsilon);
    let mut quad = vec![eps; k];
    let mut linear = costs.gamma().to_vec();
    let mut ineq_rows: Vec<Vec<(usize, T)>> = Vec::new();
    let mut ineq_rhs = Vec::new();
    let mut eq_rows: Vec<Vec<(usize, T)>> = Vec::new();
    let mut eq_rhs = Vec::new();

    for j in 0..k {
        ineq_rows.push(vec![(j, T::one())]);
        ineq_rhs.push(bounds.upper()[j]);
        ineq_rows.push(vec![(j, -T::one())]);
        ineq_rhs.push(-bounds.lower()[j]);
    }

    let mut offset = k;
    for p in problems {
        quad.extend(p.qp.quad.iter().map(|q| *q * weight));
        linear.extend(p.qp.linear.iter().map(|c| *c * weight));
        for i in 0..p.num_inequalities() {
            let mut row: Vec<(usize, T)> = p.qp.ineq.row(i).map(|(c, v)| (c + offset, v)).collect();
            row.extend(p.ineq_dependence.row(i).map(|(j, d)| (j, -d)));
            ineq_rows.push(row);
            ineq_rhs.push(p.ineq_constant[i]);
        }
        for i in 0..p.num_equalities() {
            let mut row: Vec<(usize, T)> = p.qp.eq.row(i).map(|(c, v)| (c + offset, v)).collect();
            row.extend(p.eq_dependence.row(i).map(|(j, d)| (j, -d)));
            eq_rows.push(row);
            eq_rhs.push(p.eq_constant[i]);
        }
        offset += p.num_vars();
    }

    Ok(QuadraticProgram {
        quad,
        linear,
        eq: SparseMatrix::from_rows(total, eq_rows),
        eq_rhs,
        ineq: SparseMatrix::from_rows(total, ineq_rows),
        ineq_rhs,
    })
}

/// Solves the stacked program. `opts.tau` should sit well below the dispatch barrier level.
pub fn solve_joint<T: Scalar>(
    problems: &[DispatchProblem<T>],
    costs: &InvestmentCosts<T>,
    bounds: &ParameterBounds<T>,
    opts: &IpmOptions<T>,
) -> Result<JointSolution<T>, QpError> {
    let qp = stacked_program(problems, costs, bounds)?;
    let sol = qp.solve(opts, None).map_err(|f| match f {
        QpFailure::Error(e) => e,
        QpFailure::NotConverged { error, .. } => error,
    })?;
    let k = bounds.len();
    let offset = crate::network::investment_cost(&sol.x[..k], costs, bounds)
        .map_err(|e| QpError::Dimension(e.to_string()))?;
    let gamma_eta: T = costs.gamma().iter().zip(&sol.x[..k]).map(|(g, e)| *g * *e).sum();
    Ok(JointSolution {
        eta: sol.x[..k].to_vec(),
        objective: sol.objective - gamma_eta + offset,
        iterations: sol.iterations,
    })
}
