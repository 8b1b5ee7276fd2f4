//! Per-scenario economic dispatch as a regularized transport QP.
//!
//! Variables per hour `t`: generator output `p`, line flow `f`, battery
//! charge `c`, discharge `d` and end-of-hour state of charge `e`, and load
//! shedding `u`. Every variable is box-bounded, so each inequality row of
//! `A x <= b(η)` is a signed unit vector and only `b` depends on η. The
//! battery state recursion starts from and must return to `σ0 η_b`, so a few
//! equality right-hand sides depend on η as well.

use serde::{Deserialize, Serialize};

use crate::linalg::SparseMatrix;
use crate::network::{Device, Network};
use crate::qp::{IpmOptions, KktFactorization, KktResidual, QpError, QpFailure, QpSolution, QuadraticProgram};
use crate::scalar::{dot, Scalar};
use crate::scenario::Scenario;

#[derive(Debug, Clone, thiserror::Error)]
pub enum DispatchError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scenario {scenario_id}: {source}")]
    Solver {
        scenario_id: usize,
        #[source]
        source: QpError,
    },
    #[error("scenario {scenario_id}: interior point did not converge (KKT residual {residual:e})")]
    NotConverged {
        scenario_id: usize,
        residual: f64,
        best: Box<DispatchSolution<f64>>,
    },
}

impl DispatchError {
    pub fn scenario_id(&self) -> Option<usize> {
        match self {
            DispatchError::Dimension(_) => None,
            DispatchError::Solver { scenario_id, .. } | DispatchError::NotConverged { scenario_id, .. } => Some(*scenario_id),
        }
    }
}

/// Numerical settings shared by assembly and the interior-point solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DispatchSettings<T: Scalar> {
    /// Weight of the (ε/2)‖x‖² regularizer.
    pub epsilon: T,
    /// Interior widening of box bounds: upper sides always, lower sides for
    /// flows and state of charge.
    pub margin: T,
    /// Barrier level at termination.
    pub tau: T,
    pub tol: T,
    pub max_iterations: usize,
}

impl<T: Scalar> DispatchSettings<T> {
    /// Defaults scaled by the network's mean fuel cost (floored at 1). The
    /// tolerance never drops below what the largest cost coefficient allows
    /// in the working precision.
    pub fn for_network(net: &Network<T>) -> Self {
        let scale = net.mean_fuel_cost().max(T::one());
        let cost_scale = net.max_fuel_cost().max(net.max_shed_penalty()).max(T::one());
        let eps = T::epsilon();
        Self {
            epsilon: T::lit(1e-6) * scale,
            margin: T::lit(1e-6),
            tau: T::lit(1e-6).max(T::lit(1e4) * eps) * scale,
            tol: (T::lit(1e-12) * scale).max(T::lit(1e2) * eps * cost_scale),
            max_iterations: 200,
        }
    }

    pub fn ipm(&self) -> IpmOptions<T> {
        IpmOptions {
            tau: self.tau,
            tol: self.tol,
            max_iterations: self.max_iterations,
        }
    }
}

/// Index arithmetic for the dispatch variable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub hours: usize,
    pub generators: usize,
    pub lines: usize,
    pub batteries: usize,
    pub loads: usize,
}

impl VariableLayout {
    pub fn len(&self) -> usize {
        self.hours * (self.generators + self.lines + 3 * self.batteries + self.loads)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Two box rows per variable.
    pub fn inequality_rows(&self) -> usize {
        2 * self.len()
    }

    pub fn generation(&self, g: usize, t: usize) -> usize {
        g * self.hours + t
    }
    pub fn flow(&self, l: usize, t: usize) -> usize {
        (self.generators + l) * self.hours + t
    }
    pub fn charge(&self, b: usize, t: usize) -> usize {
        (self.generators + self.lines + b) * self.hours + t
    }
    pub fn discharge(&self, b: usize, t: usize) -> usize {
        (self.generators + self.lines + self.batteries + b) * self.hours + t
    }
    pub fn state_of_charge(&self, b: usize, t: usize) -> usize {
        (self.generators + self.lines + 2 * self.batteries + b) * self.hours + t
    }
    pub fn shed(&self, j: usize, t: usize) -> usize {
        (self.generators + self.lines + 3 * self.batteries + j) * self.hours + t
    }

    /// Row index of `x_var <= upper`; the lower-bound row follows it.
    pub fn upper_row(&self, var: usize) -> usize {
        2 * var
    }
    pub fn lower_row(&self, var: usize) -> usize {
        2 * var + 1
    }
}

/// One scenario's dispatch program at a given capacity vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DispatchProblem<T: Scalar> {
    pub scenario_id: usize,
    pub layout: VariableLayout,
    pub qp: QuadraticProgram<T>,
    /// `b = ineq_constant + ineq_dependence · η`
    pub ineq_constant: Vec<T>,
    pub ineq_dependence: SparseMatrix<T>,
    /// `h = eq_constant + eq_dependence · η`
    pub eq_constant: Vec<T>,
    pub eq_dependence: SparseMatrix<T>,
    /// Linear operating cost per variable ($ per MWh of the variable).
    pub operating_cost: Vec<T>,
    /// Emissions per variable (ton CO2 per MWh).
    pub emissions_rate: Vec<T>,
    pub eta: Vec<T>,
    pub settings: DispatchSettings<T>,
}

struct Box_<T> {
    var: usize,
    lower: T,
    upper: T,
    /// (parameter, coefficient) on the upper bound
    upper_dep: Option<(usize, T)>,
    /// (parameter, coefficient) on −lower
    lower_dep: Option<(usize, T)>,
    /// Whether the margin also widens the lower side.
    widen_lower: bool,
}

pub fn assemble<T: Scalar>(
    net: &Network<T>,
    scenario: &Scenario<T>,
    eta: &[T],
    settings: &DispatchSettings<T>,
) -> Result<DispatchProblem<T>, DispatchError> {
    let k = net.parameter_count();
    if eta.len() != k {
        return Err(DispatchError::Dimension(format!("η has {} entries, network has K = {k}", eta.len())));
    }
    if let Some(i) = eta.iter().position(|v| !v.is_finite() || *v < -settings.margin) {
        return Err(DispatchError::Dimension(format!("η[{i}] = {} is negative or not finite", eta[i])));
    }
    if !(settings.epsilon > T::zero()) {
        return Err(DispatchError::Dimension("regularization ε must be > 0".into()));
    }
    let idx = net.index();
    if scenario.demand.len() != idx.loads.len() || scenario.availability.len() != idx.generators.len() {
        return Err(DispatchError::Dimension(format!(
            "scenario {} has {} load and {} generator rows; network has {} and {}",
            scenario.id,
            scenario.demand.len(),
            scenario.availability.len(),
            idx.loads.len(),
            idx.generators.len()
        )));
    }
    let hours = scenario.hours;
    let layout = VariableLayout {
        hours,
        generators: idx.generators.len(),
        lines: idx.lines.len(),
        batteries: idx.batteries.len(),
        loads: idx.loads.len(),
    };
    let n = layout.len();
    let zero = T::zero();
    let node_of = |name: &str| idx.node(name).expect("validated network");

    let mut operating_cost = vec![zero; n];
    let mut emissions_rate = vec![zero; n];
    let mut boxes: Vec<Box_<T>> = Vec::with_capacity(n);
    // node balance entries: balance[node][t] -> (var, coef)
    let mut balance: Vec<Vec<Vec<(usize, T)>>> = vec![vec![Vec::new(); hours]; net.nodes.len()];
    let mut balance_rhs = vec![vec![zero; hours]; net.nodes.len()];

    for (g, &d) in idx.generators.iter().enumerate() {
        let Device::Generator {
            node,
            fuel_cost,
            emissions_rate: rate,
            ..
        } = &net.devices[d]
        else {
            unreachable!()
        };
        let dev = &net.devices[d];
        let n_i = node_of(node);
        for t in 0..hours {
            let var = layout.generation(g, t);
            let rho = scenario.availability[g][t];
            operating_cost[var] = *fuel_cost;
            emissions_rate[var] = *rate;
            balance[n_i][t].push((var, T::one()));
            boxes.push(Box_ {
                var,
                lower: zero,
                upper: rho * dev.capacity_under(eta),
                upper_dep: dev.parameter_index().map(|k| (k, rho)),
                lower_dep: None,
                widen_lower: false,
            });
        }
    }
    for (l, &d) in idx.lines.iter().enumerate() {
        let Device::TransportLine { from, to, .. } = &net.devices[d] else { unreachable!() };
        let dev = &net.devices[d];
        let (a, b) = (node_of(from), node_of(to));
        let cap = dev.capacity_under(eta);
        for t in 0..hours {
            let var = layout.flow(l, t);
            balance[a][t].push((var, -T::one()));
            balance[b][t].push((var, T::one()));
            let dep = dev.parameter_index().map(|k| (k, T::one()));
            boxes.push(Box_ {
                var,
                lower: -cap,
                upper: cap,
                upper_dep: dep,
                lower_dep: dep,
                widen_lower: true,
            });
        }
    }

    let mut soc_rows: Vec<(Vec<(usize, T)>, T, Option<(usize, T)>)> = Vec::new();
    // push in layout order: all c, then all d, then all e
    let mut charge_boxes = Vec::new();
    let mut discharge_boxes = Vec::new();
    let mut soc_boxes = Vec::new();
    for (b, &d) in idx.batteries.iter().enumerate() {
        let Device::Battery {
            node,
            duration_hours,
            charge_efficiency,
            discharge_efficiency,
            boundary_soc_fraction,
            ..
        } = &net.devices[d]
        else {
            unreachable!()
        };
        let dev = &net.devices[d];
        let n_i = node_of(node);
        let cap = dev.capacity_under(eta);
        let pidx = dev.parameter_index();
        let power = T::one() / *duration_hours;
        for t in 0..hours {
            let (c, dis, e) = (layout.charge(b, t), layout.discharge(b, t), layout.state_of_charge(b, t));
            balance[n_i][t].push((dis, T::one()));
            balance[n_i][t].push((c, -T::one()));
            charge_boxes.push(Box_ {
                var: c,
                lower: zero,
                upper: cap * power,
                upper_dep: pidx.map(|k| (k, power)),
                lower_dep: None,
                widen_lower: false,
            });
            discharge_boxes.push(Box_ {
                var: dis,
                lower: zero,
                upper: cap * power,
                upper_dep: pidx.map(|k| (k, power)),
                lower_dep: None,
                widen_lower: false,
            });
            soc_boxes.push(Box_ {
                var: e,
                lower: zero,
                upper: cap,
                upper_dep: pidx.map(|k| (k, T::one())),
                lower_dep: None,
                widen_lower: true,
            });
            // e_t − e_{t−1} − κc c_t + d_t / κd = (t == 0 ? σ0 η_b : 0)
            let mut row = vec![(e, T::one()), (c, -*charge_efficiency), (dis, T::one() / *discharge_efficiency)];
            if t > 0 {
                row.push((layout.state_of_charge(b, t - 1), -T::one()));
                soc_rows.push((row, zero, None));
            } else {
                soc_rows.push((row, *boundary_soc_fraction * cap, pidx.map(|k| (k, *boundary_soc_fraction))));
            }
        }
        soc_rows.push((
            vec![(layout.state_of_charge(b, hours - 1), T::one())],
            *boundary_soc_fraction * cap,
            pidx.map(|k| (k, *boundary_soc_fraction)),
        ));
    }
    boxes.extend(charge_boxes);
    boxes.extend(discharge_boxes);
    boxes.extend(soc_boxes);

    for (j, &d) in idx.loads.iter().enumerate() {
        let Device::FixedLoad { node, shed_penalty, .. } = &net.devices[d] else { unreachable!() };
        let n_i = node_of(node);
        for t in 0..hours {
            let var = layout.shed(j, t);
            let demand = scenario.demand[j][t];
            operating_cost[var] = *shed_penalty;
            balance[n_i][t].push((var, T::one()));
            balance_rhs[n_i][t] += demand;
            boxes.push(Box_ {
                var,
                lower: zero,
                upper: demand,
                upper_dep: None,
                lower_dep: None,
                widen_lower: false,
            });
        }
    }
    debug_assert_eq!(boxes.len(), n);
    debug_assert!(boxes.iter().enumerate().all(|(i, b)| b.var == i));

    // inequality rows: x <= upper + margin, −x <= −lower (+ margin for flows and state of charge)
    let mut a_rows = Vec::with_capacity(2 * n);
    let mut b_const = Vec::with_capacity(2 * n);
    let mut b_dep = Vec::with_capacity(2 * n);
    let mut b_val = Vec::with_capacity(2 * n);
    for bx in &boxes {
        a_rows.push(vec![(bx.var, T::one())]);
        a_rows.push(vec![(bx.var, -T::one())]);
        let (up_const, up_dep) = affine_split(bx.upper, bx.upper_dep, eta);
        let (lo_const, lo_dep) = affine_split(-bx.lower, bx.lower_dep, eta);
        let lower_margin = if bx.widen_lower { settings.margin } else { T::zero() };
        b_const.push(up_const + settings.margin);
        b_const.push(lo_const + lower_margin);
        b_val.push(bx.upper + settings.margin);
        b_val.push(-bx.lower + lower_margin);
        b_dep.push(up_dep.into_iter().collect::<Vec<_>>());
        b_dep.push(lo_dep.into_iter().collect::<Vec<_>>());
    }

    let mut g_rows = Vec::new();
    let mut h_const = Vec::new();
    let mut h_dep = Vec::new();
    let mut h_val = Vec::new();
    for t in 0..hours {
        for (node, rows) in balance.iter().enumerate() {
            if rows[t].is_empty() {
                continue;
            }
            g_rows.push(rows[t].clone());
            h_const.push(balance_rhs[node][t]);
            h_val.push(balance_rhs[node][t]);
            h_dep.push(Vec::new());
        }
    }
    for (row, value, dep) in soc_rows {
        let (c, d) = affine_split(value, dep, eta);
        g_rows.push(row);
        h_const.push(c);
        h_val.push(value);
        h_dep.push(d.into_iter().collect());
    }

    let qp = QuadraticProgram {
        quad: vec![settings.epsilon; n],
        linear: operating_cost.clone(),
        eq: SparseMatrix::from_rows(n, g_rows),
        eq_rhs: h_val,
        ineq: SparseMatrix::from_rows(n, a_rows),
        ineq_rhs: b_val,
    };
    Ok(DispatchProblem {
        scenario_id: scenario.id,
        layout,
        qp,
        ineq_constant: b_const,
        ineq_dependence: SparseMatrix::from_rows(k, b_dep),
        eq_constant: h_const,
        eq_dependence: SparseMatrix::from_rows(k, h_dep),
        operating_cost,
        emissions_rate,
        eta: eta.to_vec(),
        settings: *settings,
    })
}

/// Splits `value` (which equals `coef · η_k` when `dep` is set) into its constant part and dependence.
fn affine_split<T: Scalar>(value: T, dep: Option<(usize, T)>, eta: &[T]) -> (T, Option<(usize, T)>) {
    match dep {
        Some((k, coef)) => (value - coef * eta[k], Some((k, coef))),
        None => (value, None),
    }
}

impl<T: Scalar> DispatchProblem<T> {
    pub fn num_vars(&self) -> usize {
        self.layout.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.qp.ineq.rows()
    }

    pub fn num_equalities(&self) -> usize {
        self.qp.eq.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.eta.len()
    }

    /// Same scenario at a different capacity vector; only right-hand sides change.
    pub fn with_parameters(&self, eta: &[T]) -> Result<Self, DispatchError> {
        if eta.len() != self.eta.len() {
            return Err(DispatchError::Dimension(format!(
                "η has {} entries, problem has K = {}",
                eta.len(),
                self.eta.len()
            )));
        }
        let mut next = self.clone();
        let db = self.ineq_dependence.mul_vec(eta);
        next.qp.ineq_rhs = self.ineq_constant.iter().zip(db).map(|(c, d)| *c + d).collect();
        let dh = self.eq_dependence.mul_vec(eta);
        next.qp.eq_rhs = self.eq_constant.iter().zip(dh).map(|(c, d)| *c + d).collect();
        next.eta = eta.to_vec();
        Ok(next)
    }

    /// Parameters that appear in no right-hand side coefficient map.
    pub fn unreferenced_parameters(&self) -> Vec<usize> {
        let mut seen = vec![false; self.eta.len()];
        for m in [&self.ineq_dependence, &self.eq_dependence] {
            for i in 0..m.rows() {
                for (k, _) in m.row(i) {
                    seen[k] = true;
                }
            }
        }
        seen.iter().enumerate().filter(|(_, s)| !**s).map(|(k, _)| k).collect()
    }

    /// Fuel plus shedding cost of a dispatch, without the regularizer.
    pub fn operational_cost(&self, x: &[T]) -> T {
        dot(&self.operating_cost, x)
    }

    pub fn emissions(&self, x: &[T]) -> T {
        dot(&self.emissions_rate, x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DispatchSolution<T: Scalar> {
    pub scenario_id: usize,
    pub x: Vec<T>,
    pub nu: Vec<T>,
    pub mu: Vec<T>,
    pub slacks: Vec<T>,
    /// Regularized dispatch objective c_s(x).
    pub objective: T,
    pub barrier_tau: T,
    pub kkt_residual: T,
    pub residual: KktResidual<T>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub factorization: Option<KktFactorization<T>>,
}

impl<T: Scalar> DispatchSolution<T> {
    fn from_qp(scenario_id: usize, s: QpSolution<T>) -> Self {
        Self {
            scenario_id,
            kkt_residual: s.kkt_residual(),
            x: s.x,
            nu: s.nu,
            mu: s.mu,
            slacks: s.slack,
            objective: s.objective,
            barrier_tau: s.tau,
            residual: s.residual,
            iterations: s.iterations,
            converged: s.converged,
            factorization: s.factorization,
        }
    }

    pub fn to_f64(&self) -> DispatchSolution<f64> {
        let cv = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        DispatchSolution {
            scenario_id: self.scenario_id,
            x: cv(&self.x),
            nu: cv(&self.nu),
            mu: cv(&self.mu),
            slacks: cv(&self.slacks),
            objective: self.objective.as_f64(),
            barrier_tau: self.barrier_tau.as_f64(),
            kkt_residual: self.kkt_residual.as_f64(),
            residual: KktResidual {
                stationarity: self.residual.stationarity.as_f64(),
                equality: self.residual.equality.as_f64(),
                inequality: self.residual.inequality.as_f64(),
                complementarity: self.residual.complementarity.as_f64(),
            },
            iterations: self.iterations,
            converged: self.converged,
            factorization: None,
        }
    }
}

pub fn solve<T: Scalar>(prob: &DispatchProblem<T>) -> Result<DispatchSolution<T>, DispatchError> {
    solve_from(prob, None)
}

/// Solves from an optional primal starting point.
pub fn solve_from<T: Scalar>(prob: &DispatchProblem<T>, start: Option<&[T]>) -> Result<DispatchSolution<T>, DispatchError> {
    let id = prob.scenario_id;
    match prob.qp.solve(&prob.settings.ipm(), start) {
        Ok(s) => Ok(DispatchSolution::from_qp(id, s)),
        Err(QpFailure::Error(QpError::Dimension(m))) => Err(DispatchError::Dimension(m)),
        Err(QpFailure::Error(source)) => Err(DispatchError::Solver { scenario_id: id, source }),
        Err(QpFailure::NotConverged { error, best }) => {
            let best = DispatchSolution::from_qp(id, *best);
            let residual = match error {
                QpError::MaxIterations { residual, .. } => residual,
                _ => best.kkt_residual.as_f64(),
            };
            Err(DispatchError::NotConverged {
                scenario_id: id,
                residual,
                best: Box::new(best.to_f64()),
            })
        }
    }
}
