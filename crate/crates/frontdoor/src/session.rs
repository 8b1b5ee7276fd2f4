//! Study sessions: one case, an assumption overlay, the current plan state and
//! an append-only run history. Persisted under a data root so a restarted
//! service serves identical plans.

use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use gridplan_core::checkpoint::{load_checkpoint, save_checkpoint};
use gridplan_core::network::investment_cost;
use gridplan_core::planner::{Init, LossRecord, Planner, SolverConfig, StopReason, StopRule};
use gridplan_core::PlanState64;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::study::{plan_rows, plan_study, DaySelection, Overlay, OverlayPatch, PlanRow, Study, StudyError};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("persistence failed: {0}")]
    Persist(String),
}

fn default_hours() -> usize {
    24
}

/// What a session is built from. Relative paths resolve against the data root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub network: PathBuf,
    pub timeseries: PathBuf,
    #[serde(default = "default_hours")]
    pub hours: usize,
    #[serde(default)]
    pub days: DaySelection,
    #[serde(default)]
    pub config: SolverConfig<f64>,
    #[serde(default)]
    pub carbon_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Running,
    Converged,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Cold,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveRequest {
    pub iters: Option<usize>,
    pub init: InitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolveRequest {
    pub iters: Option<usize>,
    /// Stop at the first evaluation within `rel_tol` of this loss.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub run: usize,
    /// `cold`, `current` or `resolve`.
    pub init: String,
    pub overlay: Overlay,
    /// Objective at the reported plan.
    pub full_loss: f64,
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub stop_reason: Option<StopReason>,
    pub loss_curve: Vec<LossRecord<f64>>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub session_id: String,
    pub status: RunStatus,
    pub iteration: Option<usize>,
    pub latest_full_loss: Option<f64>,
    pub converged: bool,
    pub converged_at: Option<usize>,
    pub runs_completed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanView {
    pub session_id: String,
    /// Iteration of the state the plan comes from; `None` before any run.
    pub iteration: Option<usize>,
    pub full_loss: Option<f64>,
    pub investment_cost: f64,
    pub overlay: Overlay,
    pub rows: Vec<PlanRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    pub overlay: Overlay,
    pub runs: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    spec: SessionSpec,
    overlay: Overlay,
    state_overlay: Option<Overlay>,
    status: RunStatus,
    error: Option<String>,
    history: Vec<HistoryEntry>,
}

#[derive(Debug)]
struct Inner {
    overlay: Overlay,
    state: Option<PlanState64>,
    /// Overlay the current state was computed under.
    state_overlay: Option<Overlay>,
    status: RunStatus,
    error: Option<String>,
    history: Vec<HistoryEntry>,
    progress: Option<LossRecord<f64>>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub spec: SessionSpec,
    study: Study,
    inner: Mutex<Inner>,
}

impl Session {
    pub fn study(&self) -> &Study {
        &self.study
    }

    pub fn overlay(&self) -> Overlay {
        self.inner.lock().overlay.clone()
    }

    pub fn state(&self) -> Option<PlanState64> {
        self.inner.lock().state.clone()
    }

    pub fn status(&self) -> StatusView {
        let g = self.inner.lock();
        let last = g.state.as_ref();
        let (iteration, latest) = match (g.status, g.progress) {
            (RunStatus::Running, Some(p)) => (Some(p.iteration), Some(p.loss)),
            _ => (last.map(|s| s.iteration), last.and_then(|s| s.latest_loss())),
        };
        let converged_at = if g.status == RunStatus::Running { None } else { last.and_then(|s| s.converged_at) };
        StatusView {
            session_id: self.id.clone(),
            status: g.status,
            iteration,
            latest_full_loss: latest,
            converged: g.status == RunStatus::Converged,
            converged_at,
            runs_completed: g.history.len(),
            error: g.error.clone(),
        }
    }

    pub fn plan(&self) -> Result<PlanView, SessionError> {
        let g = self.inner.lock();
        let overlay = g.state_overlay.clone().unwrap_or_else(|| g.overlay.clone());
        let case = overlay.apply(&self.study.case)?;
        let (eta, delta, iteration, loss) = match &g.state {
            Some(s) => (
                s.plan().0.clone(),
                s.last_gradient.as_ref().map(|d| d.delta.clone()),
                Some(s.iteration),
                s.best_full_loss,
            ),
            None => (case.bounds.lower().to_vec(), None, None, None),
        };
        Ok(PlanView {
            session_id: self.id.clone(),
            iteration,
            full_loss: loss,
            investment_cost: investment_cost(&eta, &case.costs, &case.bounds).map_err(StudyError::from)?,
            rows: plan_rows(&case, &eta, delta.as_deref()),
            overlay,
        })
    }

    pub fn history(&self) -> HistoryView {
        let g = self.inner.lock();
        HistoryView {
            session_id: self.id.clone(),
            overlay: g.overlay.clone(),
            runs: g.history.clone(),
        }
    }

    /// Loss of `eta` under `overlay` on the session's scenarios.
    pub fn evaluate(&self, overlay: &Overlay, eta: &[f64]) -> Result<f64, SessionError> {
        let case = overlay.apply(&self.study.case)?;
        let objective = overlay.objective();
        let planner = Planner::new(&case, &self.study.scenarios, &objective, &overlay.objective_id(), self.spec.config)
            .map_err(StudyError::from)?;
        Ok(planner.evaluate_full(eta).map_err(StudyError::from)?)
    }

    fn record(&self, g: &Inner) -> SessionRecord {
        SessionRecord {
            id: self.id.clone(),
            spec: self.spec.clone(),
            overlay: g.overlay.clone(),
            state_overlay: g.state_overlay.clone(),
            status: g.status,
            error: g.error.clone(),
            history: g.history.clone(),
        }
    }
}

/// A run that has claimed its session and is ready to execute on a blocking thread.
pub struct Job {
    session: Arc<Session>,
    root: Option<PathBuf>,
    overlay: Overlay,
    init: Init<f64>,
    stop: StopRule<f64>,
    iters: usize,
    label: &'static str,
}

impl Job {
    pub fn session(&self) -> &Arc<Session> {
        &self.session
    }

    /// Runs to completion, then records the outcome on the session.
    pub fn execute(self) -> RunStatus {
        let started = Instant::now();
        let session = &self.session;
        let config = SolverConfig {
            max_iterations: self.iters,
            ..session.spec.config
        };
        let outcome = plan_study(&session.study, &self.overlay, config, self.init, self.stop, &mut |s| {
            session.inner.lock().progress = s.loss_history.last().copied();
            ControlFlow::Continue(())
        });

        let mut g = session.inner.lock();
        g.progress = None;
        match outcome {
            Ok((_, state)) => {
                let entry = HistoryEntry {
                    run: g.history.len(),
                    init: self.label.to_string(),
                    overlay: self.overlay.clone(),
                    full_loss: state.best_full_loss.unwrap_or(f64::NAN),
                    iterations: state.iteration,
                    converged_at: state.converged_at,
                    stop_reason: state.stop_reason,
                    loss_curve: state.loss_history.clone(),
                    wall_seconds: started.elapsed().as_secs_f64(),
                };
                g.status = if state.converged_at.is_some() { RunStatus::Converged } else { RunStatus::Idle };
                g.error = None;
                g.history.push(entry);
                g.state = Some(state);
                g.state_overlay = Some(self.overlay);
            }
            Err(e) => {
                log::warn!("session {}: run failed: {e}", session.id);
                g.status = RunStatus::Failed;
                g.error = Some(e.to_string());
            }
        }
        if let Some(root) = &self.root {
            if let Err(e) = persist(root, session, &g) {
                log::error!("session {}: {e}", session.id);
            }
        }
        g.status
    }
}

fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sessions").join(id)
}

fn persist(root: &Path, session: &Session, g: &Inner) -> Result<(), SessionError> {
    let dir = session_dir(root, &session.id);
    let err = |e: std::io::Error| SessionError::Persist(e.to_string());
    fs::create_dir_all(&dir).map_err(err)?;
    if let Some(state) = &g.state {
        save_checkpoint(state, &dir.join("state.json")).map_err(|e| SessionError::Persist(e.to_string()))?;
    }
    let text = serde_json::to_string_pretty(&session.record(g)).map_err(|e| SessionError::Persist(e.to_string()))?;
    let tmp = dir.join("session.json.tmp");
    fs::write(&tmp, text).map_err(err)?;
    fs::rename(&tmp, dir.join("session.json")).map_err(err)
}

#[derive(Debug, Default)]
pub struct SessionStore {
    root: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Store persisted under `root`; sessions saved there earlier are reloaded.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        let store = Self {
            root: Some(root.clone()),
            sessions: RwLock::new(HashMap::new()),
        };
        let dir = root.join("sessions");
        if dir.is_dir() {
            let entries = fs::read_dir(&dir).map_err(|e| SessionError::Persist(e.to_string()))?;
            for entry in entries.flatten() {
                let path = entry.path().join("session.json");
                if !path.is_file() {
                    continue;
                }
                match store.reload(&path) {
                    Ok(s) => {
                        store.sessions.write().insert(s.id.clone(), s);
                    }
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
        Ok(store)
    }

    fn reload(&self, path: &Path) -> Result<Arc<Session>, SessionError> {
        let text = fs::read_to_string(path).map_err(|e| SessionError::Persist(e.to_string()))?;
        let rec: SessionRecord = serde_json::from_str(&text).map_err(|e| SessionError::Persist(e.to_string()))?;
        let study = self.load_study(&rec.spec)?;
        let state_path = path.with_file_name("state.json");
        let state = if state_path.is_file() {
            Some(load_checkpoint(&state_path).map_err(StudyError::from)?)
        } else {
            None
        };
        let (status, error) = match rec.status {
            RunStatus::Running => (RunStatus::Failed, Some("run interrupted by a service restart".to_string())),
            s => (s, rec.error),
        };
        Ok(Arc::new(Session {
            id: rec.id,
            spec: rec.spec,
            study,
            inner: Mutex::new(Inner {
                overlay: rec.overlay,
                state,
                state_overlay: rec.state_overlay,
                status,
                error,
                history: rec.history,
                progress: None,
            }),
        }))
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn load_study(&self, spec: &SessionSpec) -> Result<Study, SessionError> {
        Ok(Study::load(
            &self.resolve_path(&spec.network),
            &self.resolve_path(&spec.timeseries),
            spec.hours,
            spec.days,
        )?)
    }

    /// Loads the inputs and registers a new idle session. Nothing is solved.
    pub fn create(&self, spec: SessionSpec) -> Result<Arc<Session>, SessionError> {
        spec.config.validate().map_err(|e| SessionError::Invalid(e.to_string()))?;
        let study = self.load_study(&spec)?;
        let overlay = Overlay::with_carbon_weight(spec.carbon_weight);
        overlay.apply(&study.case)?;
        let session = Arc::new(Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            spec,
            study,
            inner: Mutex::new(Inner {
                overlay,
                state: None,
                state_overlay: None,
                status: RunStatus::Idle,
                error: None,
                history: Vec::new(),
                progress: None,
            }),
        });
        if let Some(root) = &self.root {
            persist(root, &session, &session.inner.lock())?;
        }
        self.sessions.write().insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, SessionError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn patch(&self, id: &str, patch: &OverlayPatch) -> Result<Overlay, SessionError> {
        let session = self.get(id)?;
        let mut g = session.inner.lock();
        if g.status == RunStatus::Running {
            return Err(SessionError::Conflict("a run is active; assumptions are locked".into()));
        }
        let next = g.overlay.patched(patch);
        next.apply(&session.study.case).map_err(|e| SessionError::Invalid(e.to_string()))?;
        g.overlay = next.clone();
        if let Some(root) = &self.root {
            persist(root, &session, &g)?;
        }
        Ok(next)
    }

    fn claim(
        &self,
        id: &str,
        build: impl FnOnce(&Inner, &Session) -> Result<(Init<f64>, StopRule<f64>, usize, &'static str), SessionError>,
    ) -> Result<Job, SessionError> {
        let session = self.get(id)?;
        let job = {
            let mut g = session.inner.lock();
            if g.status == RunStatus::Running {
                return Err(SessionError::Conflict("a run is already active for this session".into()));
            }
            let (init, stop, iters, label) = build(&g, &session)?;
            g.status = RunStatus::Running;
            g.error = None;
            g.progress = None;
            Job {
                session: session.clone(),
                root: self.root.clone(),
                overlay: g.overlay.clone(),
                init,
                stop,
                iters,
                label,
            }
        };
        Ok(job)
    }

    /// Claims the session for a solve under the current overlay.
    pub fn begin_solve(&self, id: &str, req: SolveRequest) -> Result<Job, SessionError> {
        self.claim(id, |g, s| {
            let iters = req.iters.unwrap_or(s.spec.config.max_iterations);
            match req.init {
                InitMode::Cold => Ok((Init::Cold, StopRule::MaxIterations, iters, "cold")),
                InitMode::Current => {
                    let state = g.state.clone().ok_or_else(|| SessionError::Conflict("no current plan to start from".into()))?;
                    Ok((Init::Warm(state), StopRule::MaxIterations, iters, "current"))
                }
            }
        })
    }

    /// Claims the session for a warm-started run from the current plan under
    /// the current overlay. With an unchanged overlay the run stops as soon as
    /// it is back within tolerance of the previous best loss.
    pub fn begin_resolve(&self, id: &str, req: ResolveRequest) -> Result<Job, SessionError> {
        self.claim(id, |g, s| {
            let state = g.state.clone().ok_or_else(|| SessionError::Conflict("no current plan to warm start from; solve first".into()))?;
            let iters = req.iters.unwrap_or(s.spec.config.max_iterations);
            let rel_tol = s.spec.config.rel_tol;
            let reference = match req.reference {
                Some(r) => Some(r),
                None if g.state_overlay.as_ref() == Some(&g.overlay) => state.best_full_loss,
                None => None,
            };
            let stop = match reference {
                Some(reference) => StopRule::Converged { reference, rel_tol },
                None => StopRule::MaxIterations,
            };
            Ok((Init::Warm(state), stop, iters, "resolve"))
        })
    }
}
