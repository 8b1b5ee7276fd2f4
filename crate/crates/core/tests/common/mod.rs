//! Reference computations shared by the integration tests. None of these go
//! through the adjoint code path.

#![allow(dead_code)]

use gridplan_core::dispatch::{self, assemble, DispatchProblem, DispatchSettings, DispatchSolution};
use gridplan_core::network::PlanningCase;
use gridplan_core::objective::PlannerObjective;
use gridplan_core::scenario::ScenarioSet;
use gridplan_core::synthetic::{random_case, SyntheticCase, SyntheticConfig};
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-300)
}

/// A random small instance and an interior capacity vector.
pub struct Instance {
    pub case: SyntheticCase<f64>,
    pub scenarios: ScenarioSet<f64>,
    pub eta: Vec<f64>,
    pub hours: usize,
}

pub fn random_instance(seed: u64, nodes: usize, hours: usize, rng: &mut impl Rng) -> Instance {
    let days = 1.max(hours.div_ceil(24));
    let case: SyntheticCase<f64> = random_case(&SyntheticConfig {
        nodes,
        days,
        scenario_hours: hours,
        seed,
        ..Default::default()
    });
    let scenarios = case.scenarios(hours).unwrap();
    let b = &case.case.bounds;
    let eta = (0..b.len())
        .map(|k| b.lower()[k] + rng.random_range(0.05..0.6) * (b.upper()[k] - b.lower()[k]))
        .collect();
    Instance {
        case,
        scenarios,
        eta,
        hours,
    }
}

impl Instance {
    pub fn problem(&self, scenario: usize) -> DispatchProblem<f64> {
        let settings = DispatchSettings::for_network(&self.case.case.network);
        assemble(&self.case.case.network, self.scenarios.get(scenario), &self.eta, &settings).unwrap()
    }

    pub fn pc(&self) -> &PlanningCase<f64> {
        &self.case.case
    }
}

pub struct FdEstimate {
    pub value: f64,
    /// Relative disagreement of the two central differences feeding the extrapolation.
    pub richardson_gap: f64,
    pub step: f64,
}

fn central(prob: &DispatchProblem<f64>, d: &[f64], v: &[f64], h: f64) -> f64 {
    let shifted = |sign: f64| {
        let eta: Vec<f64> = prob.eta.iter().zip(d).map(|(e, dd)| e + sign * h * dd).collect();
        let sol = dispatch::solve(&prob.with_parameters(&eta).unwrap()).unwrap();
        dot(&sol.x, v)
    };
    (shifted(1.0) - shifted(-1.0)) / (2.0 * h)
}

/// Central differences of `vᵀ x*(η + h d)` at step `1e-3 · mean|η|`,
/// Richardson-extrapolated from h and h/2. When the two differences disagree
/// by more than 1e-3 relative the step is halved, up to four times.
pub fn fd_directional(prob: &DispatchProblem<f64>, d: &[f64], v: &[f64]) -> FdEstimate {
    let scale = prob.eta.iter().map(|e| e.abs()).sum::<f64>() / prob.eta.len() as f64;
    let mut h = 1e-3 * scale.max(1.0);
    let mut best: Option<FdEstimate> = None;
    for _ in 0..5 {
        let f1 = central(prob, d, v, h);
        let f2 = central(prob, d, v, h / 2.0);
        let est = FdEstimate {
            value: (4.0 * f2 - f1) / 3.0,
            richardson_gap: rel_err(f1, f2),
            step: h,
        };
        let done = est.richardson_gap <= 1e-3;
        if best.as_ref().is_none_or(|b| est.richardson_gap < b.richardson_gap) {
            best = Some(est);
        }
        if done {
            break;
        }
        h /= 2.0;
    }
    best.unwrap()
}

/// Smallest |log(μ_i / s_i)| over inequality rows: near zero when some row
/// sits at the kink between active and inactive.
pub fn dual_degeneracy(sol: &DispatchSolution<f64>) -> f64 {
    sol.mu
        .iter()
        .zip(&sol.slacks)
        .map(|(m, s)| (m / s).ln().abs())
        .fold(f64::INFINITY, f64::min)
}

/// γ − (∂b/∂η)ᵀ μ − (∂h/∂η)ᵀ ν averaged over the batch, read straight off the duals.
pub fn envelope_gradient(gamma: &[f64], batch: &[(&DispatchProblem<f64>, &DispatchSolution<f64>)]) -> Vec<f64> {
    let k = gamma.len();
    let mut sum = vec![0.0; k];
    for (prob, sol) in batch {
        let dep = &prob.ineq_dependence;
        for i in 0..dep.rows() {
            for (j, coef) in dep.row(i) {
                sum[j] -= sol.mu[i] * coef;
            }
        }
        let dep = &prob.eq_dependence;
        for i in 0..dep.rows() {
            for (j, coef) in dep.row(i) {
                sum[j] -= sol.nu[i] * coef;
            }
        }
    }
    let n = batch.len() as f64;
    gamma.iter().zip(sum).map(|(g, s)| g + s / n).collect()
}

/// h equal to the dispatch program's own objective, regularizer included.
pub struct DispatchCost;

impl PlannerObjective<f64> for DispatchCost {
    fn value(&self, prob: &DispatchProblem<f64>, x: &[f64]) -> f64 {
        prob.qp.objective(x)
    }

    fn gradient(&self, prob: &DispatchProblem<f64>, x: &[f64]) -> Vec<f64> {
        prob.qp
            .linear
            .iter()
            .zip(&prob.qp.quad)
            .zip(x)
            .map(|((c, q), x)| c + q * x)
            .collect()
    }
}

/// Brute-force LP: minimize cᵀx subject to E x = e, A x ≤ b, by enumerating
/// every basic solution. Only for a handful of variables.
pub fn lp_by_enumeration(c: &[f64], e_mat: &[Vec<f64>], e: &[f64], a_mat: &[Vec<f64>], b: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = c.len();
    let need = n - e_mat.len();
    let m = a_mat.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut subset: Vec<usize> = (0..need).collect();
    loop {
        let mut rows: Vec<Vec<f64>> = e_mat.to_vec();
        let mut rhs: Vec<f64> = e.to_vec();
        for &i in &subset {
            rows.push(a_mat[i].clone());
            rhs.push(b[i]);
        }
        if let Some(x) = gauss_solve(rows, rhs) {
            let feasible = a_mat.iter().zip(b).all(|(row, bi)| dot(row, &x) <= bi + 1e-9);
            if feasible {
                let val = dot(c, &x);
                if best.as_ref().is_none_or(|(_, v)| val < *v - 1e-12) {
                    best = Some((x, val));
                }
            }
        }
        // next combination
        let mut i = need;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] < m - need + i {
                subset[i] += 1;
                for j in i + 1..need {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[r][k] -= f * a[col][k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}
