//! Projected stochastic gradient descent over the capacity vector.
//!
//! Each step samples a batch of scenarios without replacement, dispatches
//! them at the current η, forms the planning gradient Δ and applies
//!
//! ```txt
//!   η_k ← proj(η_k − α_i / max(γ_k, 1) · Δ_k),    α_i = α / (1 + i/κ)
//! ```
//!
//! Full-set evaluations run every `eval_every` iterations and feed the
//! convergence test.

use std::ops::ControlFlow;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dispatch::{self, assemble, DispatchError, DispatchProblem, DispatchSettings, DispatchSolution};
use crate::network::{investment_cost, project_parameters, NetworkError, ParameterVector, PlanningCase};
use crate::objective::{self, PlannerObjective};
use crate::scalar::Scalar;
use crate::scenario::ScenarioSet;
use crate::sensitivity::{planning_gradient, GradientEstimate, SensitivityError};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("scenario set is empty")]
    NoScenarios,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("warm start refused: {0}")]
    Fingerprint(String),
    #[error("full objective is not finite at iteration {0}")]
    NonFiniteLoss(usize),
}

impl PlanError {
    /// Scenario responsible for the failure, when there is one.
    pub fn scenario_id(&self) -> Option<usize> {
        match self {
            PlanError::Dispatch(e) => e.scenario_id(),
            PlanError::Sensitivity(e) => e.scenario_id(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default)]
pub struct SolverConfig<T: Scalar> {
    /// α, in parameter units per unit of normalized gradient.
    pub step_size: T,
    /// κ in iterations; `None` keeps the step constant.
    pub decay: Option<T>,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub rel_tol: T,
    pub rng_seed: u64,
    /// Overrides the network-derived barrier level.
    pub tau: Option<T>,
    /// Overrides the network-derived regularization weight.
    pub epsilon: Option<T>,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            step_size: T::lit(5.0),
            decay: None,
            batch_size: 8,
            max_iterations: 200,
            eval_every: 5,
            rel_tol: T::lit(0.02),
            rng_seed: 0,
            tau: None,
            epsilon: None,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.into()));
        if !(self.step_size > T::zero()) || !self.step_size.is_finite() {
            return bad("step size must be positive");
        }
        if self.decay.is_some_and(|k| !(k > T::zero())) {
            return bad("decay must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.rel_tol > T::zero() && self.rel_tol < T::one()) {
            return bad("rel_tol must lie in (0, 1)");
        }
        if self.tau.is_some_and(|t| !(t > T::zero())) || self.epsilon.is_some_and(|e| !(e > T::zero())) {
            return bad("tau and epsilon overrides must be positive");
        }
        Ok(())
    }

    /// α_i for iteration i.
    pub fn step_at(&self, iteration: usize) -> T {
        match self.decay {
            Some(kappa) => self.step_size / (T::one() + T::from_usize(iteration).unwrap() / kappa),
            None => self.step_size,
        }
    }

    pub fn dispatch_settings(&self, case: &PlanningCase<T>) -> DispatchSettings<T> {
        let mut s = DispatchSettings::for_network(&case.network);
        if let Some(t) = self.tau {
            s.tau = t;
        }
        if let Some(e) = self.epsilon {
            s.epsilon = e;
        }
        s
    }
}

/// Position in the sampling stream. The stream is ChaCha8 seeded from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position inside the stream, split into 64-bit halves.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            word_pos_hi: 0,
            word_pos_lo: 0,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        r
    }

    fn from_rng(seed: u64, r: &ChaCha8Rng) -> Self {
        let pos = r.get_word_pos();
        Self {
            seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }
}

/// Identity of the problem a state belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Hash of nodes, devices, connectivity and parameter wiring.
    pub topology: String,
    pub dimension: usize,
    /// Hash of the whole case, the scenarios, the objective and the config (run length excluded).
    pub full: String,
}

impl Fingerprint {
    pub fn of<T: Scalar>(
        case: &PlanningCase<T>,
        scenarios: &ScenarioSet<T>,
        objective_id: &str,
        config: &SolverConfig<T>,
    ) -> Self {
        let wiring: Vec<_> = case
            .network
            .devices
            .iter()
            .map(|d| {
                let value = serde_json::to_value(d).expect("device serializes");
                let keep = ["kind", "name", "node", "from", "to", "parameter_index"];
                value
                    .as_object()
                    .map(|o| o.iter().filter(|(k, _)| keep.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>())
                    .unwrap_or_default()
            })
            .collect();
        let topology = hash(&serde_json::to_vec(&(&case.network.nodes, wiring)).expect("topology serializes"));
        // run length excluded
        let identity = SolverConfig {
            max_iterations: 0,
            ..*config
        };
        let full = hash(
            &serde_json::to_vec(&(case.to_json(), scenarios, objective_id, identity)).expect("problem serializes"),
        );
        Self {
            topology,
            dimension: case.parameter_count(),
            full,
        }
    }

    pub fn compatible_for_warm_start(&self, other: &Fingerprint) -> Result<(), PlanError> {
        if self.dimension != other.dimension {
            return Err(PlanError::Fingerprint(format!(
                "state has K = {}, problem has K = {}",
                other.dimension, self.dimension
            )));
        }
        if self.topology != other.topology {
            return Err(PlanError::Fingerprint("network topology differs".into()));
        }
        Ok(())
    }
}

fn hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossRecord<T: Scalar> {
    pub iteration: usize,
    pub loss: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PlanState<T: Scalar> {
    pub eta: ParameterVector<T>,
    pub iteration: usize,
    pub loss_history: Vec<LossRecord<T>>,
    pub best_full_loss: Option<T>,
    /// Iterate that attained `best_full_loss`; this is the reported plan.
    pub best_eta: Option<ParameterVector<T>>,
    pub rng_state: RngState,
    pub config_fingerprint: Fingerprint,
    pub last_gradient: Option<GradientEstimate<T>>,
    pub stop_reason: Option<StopReason>,
    /// First evaluation within `(1 + rel_tol)` of the reference loss.
    pub converged_at: Option<usize>,
}

impl<T: Scalar> PlanState<T> {
    /// Best evaluated iterate, falling back to the current one.
    pub fn plan(&self) -> &ParameterVector<T> {
        self.best_eta.as_ref().unwrap_or(&self.eta)
    }

    pub fn latest_loss(&self) -> Option<T> {
        self.loss_history.last().map(|r| r.loss)
    }

    /// Convergence iteration against `reference`, judged on the recorded history.
    pub fn convergence_iteration(&self, reference: T, rel_tol: T) -> Option<usize> {
        let band = (T::one() + rel_tol) * reference;
        self.loss_history.iter().find(|r| r.loss <= band).map(|r| r.iteration)
    }
}

#[derive(Debug, Clone)]
pub enum Init<T: Scalar> {
    /// Start at η^min with a fresh sampling stream.
    Cold,
    /// Start at another state's plan. Iteration count, history and stream restart.
    Warm(PlanState<T>),
    /// Continue a state of the identical problem exactly where it stopped.
    Resume(PlanState<T>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule<T> {
    /// Run `max_iterations` steps; convergence is judged afterwards against the run's own best loss.
    MaxIterations,
    /// Stop at the first evaluation within `(1 + rel_tol)` of `reference`.
    Converged { reference: T, rel_tol: T },
}

/// A planning problem bound to its data: case, scenarios, objective and config.
pub struct Planner<'a, T: Scalar> {
    case: &'a PlanningCase<T>,
    scenarios: &'a ScenarioSet<T>,
    objective: &'a dyn PlannerObjective<T>,
    config: SolverConfig<T>,
    templates: Vec<DispatchProblem<T>>,
    fingerprint: Fingerprint,
}

impl<'a, T: Scalar> Planner<'a, T> {
    /// `objective_id` names the objective in the fingerprint (e.g. its serialized spec).
    pub fn new(
        case: &'a PlanningCase<T>,
        scenarios: &'a ScenarioSet<T>,
        objective: &'a dyn PlannerObjective<T>,
        objective_id: &str,
        config: SolverConfig<T>,
    ) -> Result<Self, PlanError> {
        config.validate()?;
        if scenarios.is_empty() {
            return Err(PlanError::NoScenarios);
        }
        let settings = config.dispatch_settings(case);
        let eta0 = case.bounds.lower();
        let templates = scenarios
            .scenarios()
            .iter()
            .map(|s| assemble(&case.network, s, eta0, &settings))
            .collect::<Result<Vec<_>, _>>()?;
        let fingerprint = Fingerprint::of(case, scenarios, objective_id, &config);
        Ok(Self {
            case,
            scenarios,
            objective,
            config,
            templates,
            fingerprint,
        })
    }

    pub fn config(&self) -> &SolverConfig<T> {
        &self.config
    }

    pub fn case(&self) -> &PlanningCase<T> {
        self.case
    }

    pub fn scenarios(&self) -> &ScenarioSet<T> {
        self.scenarios
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn cold_state(&self) -> PlanState<T> {
        PlanState {
            eta: self.case.bounds.lower_vector(),
            iteration: 0,
            loss_history: Vec::new(),
            best_full_loss: None,
            best_eta: None,
            rng_state: RngState::new(self.config.rng_seed),
            config_fingerprint: self.fingerprint.clone(),
            last_gradient: None,
            stop_reason: None,
            converged_at: None,
        }
    }

    /// Starting state for a run.
    pub fn initial_state(&self, init: Init<T>) -> Result<PlanState<T>, PlanError> {
        match init {
            Init::Cold => Ok(self.cold_state()),
            Init::Warm(prev) => {
                self.fingerprint.compatible_for_warm_start(&prev.config_fingerprint)?;
                let mut s = self.cold_state();
                s.eta = project_parameters(prev.plan().as_slice(), &self.case.bounds)?;
                Ok(s)
            }
            Init::Resume(prev) => {
                if prev.config_fingerprint != self.fingerprint {
                    return Err(PlanError::Fingerprint("resume requires the identical problem and config".into()));
                }
                Ok(prev)
            }
        }
    }

    /// Problem instances at `eta`, one per scenario.
    pub fn problems(&self, eta: &[T]) -> Result<Vec<DispatchProblem<T>>, PlanError> {
        self.templates
            .iter()
            .map(|p| p.with_parameters(eta).map_err(PlanError::from))
            .collect()
    }

    fn solve_indices(&self, eta: &[T], indices: &[usize]) -> Result<Vec<(DispatchProblem<T>, DispatchSolution<T>)>, PlanError> {
        let solved: Vec<Result<_, PlanError>> = indices
            .par_iter()
            .map(|&i| {
                let prob = self.templates[i].with_parameters(eta)?;
                let sol = dispatch::solve(&prob)?;
                Ok((prob, sol))
            })
            .collect();
        solved.into_iter().collect()
    }

    /// Batch indices for the state's next step; does not advance the state.
    pub fn sample_batch(&self, state: &PlanState<T>) -> (Vec<usize>, RngState) {
        let s = self.scenarios.len();
        let mut rng = state.rng_state.rng();
        let mut idx = if self.config.batch_size >= s {
            (0..s).collect()
        } else {
            sample(&mut rng, s, self.config.batch_size).into_vec()
        };
        idx.sort_unstable();
        (idx, RngState::from_rng(state.rng_state.seed, &rng))
    }

    /// Planning gradient at `eta` over the given scenario indices.
    pub fn gradient(&self, eta: &[T], indices: &[usize]) -> Result<GradientEstimate<T>, PlanError> {
        let solved = self.solve_indices(eta, indices)?;
        let batch: Vec<_> = solved.iter().map(|(p, s)| (p, s)).collect();
        Ok(planning_gradient(&self.case.costs, &batch, self.objective)?)
    }

    /// One projected update. On error the input state is untouched.
    pub fn step(&self, state: &PlanState<T>) -> Result<PlanState<T>, PlanError> {
        let (indices, rng_next) = self.sample_batch(state);
        let mut grad = self.gradient(state.eta.as_slice(), &indices)?;
        grad.iteration = Some(state.iteration);
        let alpha = self.config.step_at(state.iteration);
        let gamma = self.case.costs.gamma();
        let moved: Vec<T> = state
            .eta
            .as_slice()
            .iter()
            .zip(&grad.delta)
            .zip(gamma)
            .map(|((e, d), g)| *e - alpha / g.max(T::one()) * *d)
            .collect();
        let eta = project_parameters(&moved, &self.case.bounds)?;
        assert!(self.case.bounds.contains(eta.as_slice()), "projected iterate left the bounds");
        let mut next = state.clone();
        next.eta = eta;
        next.iteration += 1;
        next.rng_state = rng_next;
        next.last_gradient = Some(grad);
        Ok(next)
    }

    /// Full-set objective γᵀ(η − η^min) + mean_s h_s(x*_s(η)).
    pub fn evaluate_full(&self, eta: &[T]) -> Result<T, PlanError> {
        let all: Vec<usize> = (0..self.scenarios.len()).collect();
        self.evaluate_indices(eta, &all)
    }

    /// The same objective with the scenario mean taken over `indices` only.
    pub fn evaluate_indices(&self, eta: &[T], indices: &[usize]) -> Result<T, PlanError> {
        if indices.is_empty() {
            return Err(PlanError::NoScenarios);
        }
        let solved = self.solve_indices(eta, indices)?;
        let mut total = T::zero();
        for (p, s) in &solved {
            total += objective::evaluate(self.objective, p, s).map_err(|source| SensitivityError::Layout {
                scenario_id: p.scenario_id,
                source,
            })?;
        }
        let count = T::from_usize(solved.len()).unwrap();
        Ok(investment_cost(eta, &self.case.costs, &self.case.bounds)? + total / count)
    }

    /// Evaluates the state's η and appends the record.
    pub fn record_evaluation(&self, state: &mut PlanState<T>) -> Result<T, PlanError> {
        if let Some(last) = state.loss_history.last() {
            if last.iteration == state.iteration {
                return Ok(last.loss);
            }
        }
        let loss = self.evaluate_full(state.eta.as_slice())?;
        if !loss.is_finite() {
            return Err(PlanError::NonFiniteLoss(state.iteration));
        }
        state.loss_history.push(LossRecord {
            iteration: state.iteration,
            loss,
        });
        if state.best_full_loss.is_none_or(|b| loss < b) {
            state.best_full_loss = Some(loss);
            state.best_eta = Some(state.eta.clone());
        }
        Ok(loss)
    }

    /// Runs until `max_iterations` steps have been taken in this run or the stop rule fires.
    ///
    /// `observer` sees the state after every evaluation and may cancel.
    pub fn run(
        &self,
        init: Init<T>,
        stop: StopRule<T>,
        observer: &mut dyn FnMut(&PlanState<T>) -> ControlFlow<()>,
    ) -> Result<PlanState<T>, PlanError> {
        let mut state = self.initial_state(init)?;
        state.stop_reason = None;
        let start = state.iteration;
        let end = start + self.config.max_iterations;
        let every = self.config.eval_every;
        loop {
            let due = state.iteration == start || state.iteration % every == 0 || state.iteration == end;
            if due {
                let loss = self.record_evaluation(&mut state)?;
                if let StopRule::Converged { reference, rel_tol } = stop {
                    if loss <= (T::one() + rel_tol) * reference {
                        state.stop_reason = Some(StopReason::Converged);
                        state.converged_at = Some(state.iteration);
                        let _ = observer(&state);
                        return Ok(state);
                    }
                }
                if observer(&state).is_break() {
                    state.stop_reason = Some(StopReason::Cancelled);
                    return Ok(state);
                }
            }
            if state.iteration >= end {
                break;
            }
            state = self.step(&state)?;
        }
        state.stop_reason = Some(StopReason::MaxIterations);
        if let StopRule::MaxIterations = stop {
            let best = state.best_full_loss.expect("at least one evaluation");
            state.converged_at = state.convergence_iteration(best, self.config.rel_tol);
        }
        Ok(state)
    }
}

/// Picks the step size with the lowest final full objective after `iterations` steps.
pub fn tune_step_size<T: Scalar>(
    case: &PlanningCase<T>,
    scenarios: &ScenarioSet<T>,
    objective: &dyn PlannerObjective<T>,
    objective_id: &str,
    base: SolverConfig<T>,
    candidates: &[T],
    iterations: usize,
) -> Result<(T, Vec<(T, T)>), PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::Config("no step-size candidates".into()));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &alpha in candidates {
        let cfg = SolverConfig {
            step_size: alpha,
            max_iterations: iterations,
            eval_every: iterations.max(1),
            ..base
        };
        let planner = Planner::new(case, scenarios, objective, objective_id, cfg)?;
        let state = planner.run(Init::Cold, StopRule::MaxIterations, &mut |_| ControlFlow::Continue(()))?;
        table.push((alpha, state.latest_loss().expect("evaluated")));
    }
    let best = table
        .iter()
        .copied()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("nonempty")
        .0;
    Ok((best, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ObjectiveSpec;
    use crate::synthetic::{random_case, SyntheticConfig};

    fn small() -> (PlanningCase<f64>, ScenarioSet<f64>) {
        let sc = random_case::<f64>(&SyntheticConfig {
            nodes: 2,
            days: 3,
            scenario_hours: 4,
            ..Default::default()
        });
        let set = sc.scenarios(4).unwrap();
        (sc.case, set)
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::<f64>::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = SolverConfig::<f64> {
            rel_tol: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SolverConfig::<f64> {
            decay: Some(10.0),
            ..Default::default()
        };
        assert!((c.step_at(10) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn steps_stay_in_bounds_and_history_is_increasing() {
        let (case, set) = small();
        let obj = ObjectiveSpec::OperationalCost;
        let cfg = SolverConfig {
            max_iterations: 6,
            eval_every: 2,
            batch_size: 2,
            ..Default::default()
        };
        let planner = Planner::new(&case, &set, &obj, "cost", cfg).unwrap();
        let state = planner
            .run(Init::Cold, StopRule::MaxIterations, &mut |s| {
                assert!(case.bounds.contains(s.eta.as_slice()));
                ControlFlow::Continue(())
            })
            .unwrap();
        assert_eq!(state.iteration, 6);
        let its: Vec<_> = state.loss_history.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 2, 4, 6]);
        assert_eq!(state.stop_reason, Some(StopReason::MaxIterations));
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (case, set) = small();
        let obj = ObjectiveSpec::OperationalCost;
        let cfg = SolverConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let planner = Planner::new(&case, &set, &obj, "cost", cfg).unwrap();
        let state = planner.run(Init::Cold, StopRule::MaxIterations, &mut |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(state.eta, case.bounds.lower_vector());
        assert_eq!(state.loss_history.len(), 1);
        assert_eq!(state.converged_at, Some(0));
    }

    #[test]
    fn huge_investment_cost_pins_lower_bound() {
        let (mut case, set) = small();
        let k = case.parameter_count();
        case.costs = crate::network::InvestmentCosts::new(vec![1e9; k]).unwrap();
        let obj = ObjectiveSpec::OperationalCost;
        let planner = Planner::new(&case, &set, &obj, "cost", SolverConfig::default()).unwrap();
        let mut state = planner.cold_state();
        for _ in 0..3 {
            state = planner.step(&state).unwrap();
        }
        assert_eq!(state.eta, case.bounds.lower_vector());
    }

    #[test]
    fn warm_start_rejects_other_dimension() {
        let (case, set) = small();
        let obj = ObjectiveSpec::OperationalCost;
        let planner = Planner::new(&case, &set, &obj, "cost", SolverConfig::default()).unwrap();
        let mut state = planner.cold_state();
        state.config_fingerprint.dimension += 1;
        assert!(matches!(planner.initial_state(Init::Warm(state)), Err(PlanError::Fingerprint(_))));
    }
}
