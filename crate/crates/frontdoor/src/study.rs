//! Inputs, assumption overlays and CSV artifacts shared by the CLI and the service.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use gridplan_core::checkpoint::CheckpointError;
use gridplan_core::network::{DeviceKind, InvestmentCosts, NetworkError, ParameterBounds};
use gridplan_core::objective::ObjectiveSpec;
use gridplan_core::planner::{Init, LossRecord, PlanError, Planner, SolverConfig, StopRule};
use gridplan_core::scenario::{load_time_series, profile_roles, select_key_days, slice_days, ScenarioError, TimeSeriesTable};
use gridplan_core::{PlanState64, PlanningCase64, ScenarioSet64};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid overlay: {0}")]
    Overlay(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which scenarios of the sliced table the planner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DaySelection {
    #[default]
    All,
    /// Union of top-k extreme days, at most 4k scenarios.
    Key(usize),
}

impl FromStr for DaySelection {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(DaySelection::All);
        }
        let k = s
            .strip_prefix("key:")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|k| *k > 0)
            .ok_or_else(|| StudyError::Argument(format!("day selection `{s}` is not `all` or `key:<k>` with k ≥ 1")))?;
        Ok(DaySelection::Key(k))
    }
}

impl fmt::Display for DaySelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DaySelection::All => f.write_str("all"),
            DaySelection::Key(k) => write!(f, "key:{k}"),
        }
    }
}

impl Serialize for DaySelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DaySelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A loaded case together with the scenarios the planner trains on.
#[derive(Debug, Clone)]
pub struct Study {
    pub case: PlanningCase64,
    pub scenarios: ScenarioSet64,
    /// Scenarios available before day selection.
    pub available: usize,
}

impl Study {
    pub fn load(network: &Path, timeseries: &Path, hours: usize, days: DaySelection) -> Result<Self, StudyError> {
        let case = PlanningCase64::load(network)?;
        let table = load_time_series(timeseries, &profile_roles(&case.network))?;
        Self::from_table(case, &table, hours, days)
    }

    pub fn from_table(case: PlanningCase64, table: &TimeSeriesTable<f64>, hours: usize, days: DaySelection) -> Result<Self, StudyError> {
        let all = slice_days(table, &case.network, hours)?;
        let available = all.len();
        let scenarios = match days {
            DaySelection::All => all,
            DaySelection::Key(k) => select_key_days(&all, &case.network, &case.bounds, k)?,
        };
        Ok(Self {
            case,
            scenarios,
            available,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundOverride {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Assumptions layered over the base case: carbon weight, capital-cost
/// multipliers per device kind, and per-parameter bound overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Overlay {
    pub carbon_weight: f64,
    pub cost_multipliers: BTreeMap<DeviceKind, f64>,
    pub bounds: BTreeMap<usize, BoundOverride>,
}

/// Partial update of an [`Overlay`]; absent fields keep their value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayPatch {
    pub carbon_weight: Option<f64>,
    pub cost_multipliers: Option<BTreeMap<DeviceKind, f64>>,
    pub bounds: Option<BTreeMap<usize, BoundOverride>>,
}

impl Overlay {
    pub fn with_carbon_weight(carbon_weight: f64) -> Self {
        Self {
            carbon_weight,
            ..Default::default()
        }
    }

    pub fn patched(&self, patch: &OverlayPatch) -> Self {
        let mut next = self.clone();
        if let Some(w) = patch.carbon_weight {
            next.carbon_weight = w;
        }
        if let Some(m) = &patch.cost_multipliers {
            next.cost_multipliers.extend(m.iter().map(|(k, v)| (*k, *v)));
        }
        if let Some(b) = &patch.bounds {
            next.bounds.extend(b.iter().map(|(k, v)| (*k, *v)));
        }
        next
    }

    /// Emissions-aware objective; a zero weight is plain operating cost.
    pub fn objective(&self) -> ObjectiveSpec<f64> {
        ObjectiveSpec::emissions_aware(self.carbon_weight)
    }

    pub fn objective_id(&self) -> String {
        format!("emissions:{}", self.carbon_weight)
    }

    /// The base case with costs and bounds replaced. Topology and K never change.
    pub fn apply(&self, base: &PlanningCase64) -> Result<PlanningCase64, StudyError> {
        let bad = |m: String| Err(StudyError::Overlay(m));
        if !(self.carbon_weight >= 0.0) || !self.carbon_weight.is_finite() {
            return bad(format!("carbon weight {} must be finite and non-negative", self.carbon_weight));
        }
        for (kind, m) in &self.cost_multipliers {
            if !(*m > 0.0) || !m.is_finite() {
                return bad(format!("cost multiplier for {kind} must be positive, got {m}"));
            }
        }
        let k = base.parameter_count();
        let owners = base.network.parameter_owners();
        let gamma = base
            .costs
            .gamma()
            .iter()
            .zip(&owners)
            .map(|(g, owner)| {
                let kind = owner.map(|d| base.network.devices[d].kind());
                g * kind.and_then(|kd| self.cost_multipliers.get(&kd)).copied().unwrap_or(1.0)
            })
            .collect();
        let mut lower = base.bounds.lower().to_vec();
        let mut upper = base.bounds.upper().to_vec();
        for (&j, b) in &self.bounds {
            if j >= k {
                return bad(format!("bound override for parameter {j}, but K = {k}"));
            }
            lower[j] = b.lower.unwrap_or(lower[j]);
            upper[j] = b.upper.unwrap_or(upper[j]);
        }
        let bounds = ParameterBounds::new(lower, upper).map_err(|e| StudyError::Overlay(e.to_string()))?;
        let costs = InvestmentCosts::new(gamma).map_err(|e| StudyError::Overlay(e.to_string()))?;
        PlanningCase64::new(base.network.clone(), bounds, costs).map_err(|e| StudyError::Overlay(e.to_string()))
    }
}

/// Plans `study` under `overlay`, returning the overlaid case and the final state.
pub fn plan_study(
    study: &Study,
    overlay: &Overlay,
    config: SolverConfig<f64>,
    init: Init<f64>,
    stop: StopRule<f64>,
    observer: &mut dyn FnMut(&PlanState64) -> ControlFlow<()>,
) -> Result<(PlanningCase64, PlanState64), StudyError> {
    let case = overlay.apply(&study.case)?;
    let objective = overlay.objective();
    let planner = Planner::new(&case, &study.scenarios, &objective, &overlay.objective_id(), config)?;
    let state = planner.run(init, stop, observer)?;
    Ok((case, state))
}

/// One line of the plan table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub parameter_index: usize,
    pub device: String,
    pub kind: DeviceKind,
    pub eta_min: f64,
    pub eta_star: f64,
    pub eta_max: f64,
    pub gamma: f64,
    /// Latest planning gradient entry, when one has been computed.
    pub delta: Option<f64>,
}

pub fn plan_rows(case: &PlanningCase64, eta: &[f64], delta: Option<&[f64]>) -> Vec<PlanRow> {
    let owners = case.network.parameter_owners();
    (0..case.parameter_count())
        .map(|j| {
            let device = owners[j].map(|d| &case.network.devices[d]);
            PlanRow {
                parameter_index: j,
                device: device.map_or_else(String::new, |d| d.name().to_string()),
                kind: device.map_or(DeviceKind::Generator, |d| d.kind()),
                eta_min: case.bounds.lower()[j],
                eta_star: eta[j],
                eta_max: case.bounds.upper()[j],
                gamma: case.costs.gamma()[j],
                delta: delta.map(|d| d[j]),
            }
        })
        .collect()
}

pub const PLAN_HEADER: [&str; 7] = ["parameter_index", "device", "kind", "eta_min", "eta_star", "eta_max", "gamma"];
pub const LOSS_HEADER: [&str; 2] = ["iteration", "full_loss"];

fn plan_record(r: &PlanRow) -> [String; 7] {
    [
        r.parameter_index.to_string(),
        r.device.clone(),
        r.kind.to_string(),
        r.eta_min.to_string(),
        r.eta_star.to_string(),
        r.eta_max.to_string(),
        r.gamma.to_string(),
    ]
}

/// `parameter_index,device,kind,eta_min,eta_star,eta_max,gamma`
pub fn write_plan_csv<W: Write>(out: W, rows: &[PlanRow]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLAN_HEADER)?;
    for r in rows {
        w.write_record(plan_record(r))?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration,full_loss`
pub fn write_loss_csv<W: Write>(out: W, history: &[LossRecord<f64>]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_HEADER)?;
    for r in history {
        w.write_record([r.iteration.to_string(), r.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `value,parameter_index,device,kind,eta_min,eta_star,eta_max,gamma`
pub fn write_sweep_plans_csv<W: Write>(out: W, plans: &[(f64, Vec<PlanRow>)]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("value").chain(PLAN_HEADER))?;
    for (value, rows) in plans {
        for r in rows {
            w.write_record(std::iter::once(value.to_string()).chain(plan_record(r)))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridplan_core::synthetic::{random_case, SyntheticConfig};

    #[test]
    fn day_selection_parses() {
        assert_eq!("all".parse::<DaySelection>().unwrap(), DaySelection::All);
        assert_eq!("key:4".parse::<DaySelection>().unwrap(), DaySelection::Key(4));
        assert!("key:0".parse::<DaySelection>().is_err());
        assert!("some".parse::<DaySelection>().is_err());
        let json = serde_json::to_string(&DaySelection::Key(2)).unwrap();
        assert_eq!(json, "\"key:2\"");
    }

    #[test]
    fn overlay_scales_costs_by_kind_and_overrides_bounds() {
        let sc = random_case::<f64>(&SyntheticConfig::default());
        let base = &sc.case;
        let overlay = Overlay {
            carbon_weight: 10.0,
            cost_multipliers: [(DeviceKind::Battery, 2.0)].into_iter().collect(),
            bounds: [(0, BoundOverride { lower: None, upper: Some(base.bounds.upper()[0] + 5.0) })].into_iter().collect(),
        };
        let case = overlay.apply(base).unwrap();
        let owners = base.network.parameter_owners();
        for j in 0..base.parameter_count() {
            let battery = base.network.devices[owners[j].unwrap()].kind() == DeviceKind::Battery;
            let factor = if battery { 2.0 } else { 1.0 };
            assert_eq!(case.costs.gamma()[j], base.costs.gamma()[j] * factor);
        }
        assert_eq!(case.bounds.upper()[0], base.bounds.upper()[0] + 5.0);
        assert_eq!(case.network, base.network);
    }

    #[test]
    fn invalid_overlays_are_rejected() {
        let sc = random_case::<f64>(&SyntheticConfig::default());
        let neg = Overlay {
            cost_multipliers: [(DeviceKind::Generator, 0.0)].into_iter().collect(),
            ..Default::default()
        };
        assert!(matches!(neg.apply(&sc.case), Err(StudyError::Overlay(_))));
        let outside = Overlay {
            bounds: [(99, BoundOverride::default())].into_iter().collect(),
            ..Default::default()
        };
        assert!(outside.apply(&sc.case).is_err());
        let inverted = Overlay {
            bounds: [(0, BoundOverride { lower: Some(10.0), upper: Some(1.0) })].into_iter().collect(),
            ..Default::default()
        };
        assert!(inverted.apply(&sc.case).is_err());
        assert!(Overlay::with_carbon_weight(-1.0).apply(&sc.case).is_err());
    }

    #[test]
    fn patch_merges_fields() {
        let base = Overlay::with_carbon_weight(200.0);
        let patch: OverlayPatch = serde_json::from_str(r#"{"cost_multipliers": {"battery": 0.5}}"#).unwrap();
        let next = base.patched(&patch);
        assert_eq!(next.carbon_weight, 200.0);
        assert_eq!(next.cost_multipliers[&DeviceKind::Battery], 0.5);
        assert!(serde_json::from_str::<OverlayPatch>(r#"{"carbon": 1}"#).is_err());
    }

    #[test]
    fn csv_headers_are_fixed() {
        let sc = random_case::<f64>(&SyntheticConfig::default());
        let rows = plan_rows(&sc.case, sc.case.bounds.lower(), None);
        let mut buf = Vec::new();
        write_plan_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("parameter_index,device,kind,eta_min,eta_star,eta_max,gamma\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[LossRecord { iteration: 0, loss: 1.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,full_loss\n0,1.5\n");
    }
}
