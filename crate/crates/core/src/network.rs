//! Network description, the capacity parameter vector and its box.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const CASE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid bounds at parameter {index}: {reason}")]
    InvalidBounds { index: usize, reason: String },
    #[error("negative investment cost at parameter {0}")]
    NegativeCost(usize),
    #[error("network has {} violation(s): {}", .0.len(), join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unsupported case format version {0}")]
    Version(u32),
    #[error("case file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("case file: {0}")]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Generator,
    TransportLine,
    Battery,
    FixedLoad,
}

impl DeviceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Generator => "generator",
            DeviceKind::TransportLine => "transport_line",
            DeviceKind::Battery => "battery",
            DeviceKind::FixedLoad => "fixed_load",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DeviceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "generator" => Ok(DeviceKind::Generator),
            "transport_line" | "line" => Ok(DeviceKind::TransportLine),
            "battery" => Ok(DeviceKind::Battery),
            "fixed_load" | "load" => Ok(DeviceKind::FixedLoad),
            other => Err(format!("unknown device kind `{other}`")),
        }
    }
}

fn default_soc_fraction<T: Scalar>() -> T {
    T::lit(0.5)
}

/// A network device. Expandable devices carry a `parameter_index` into η;
/// non-expandable ones carry a fixed `capacity` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
pub enum Device<T: Scalar> {
    Generator {
        name: String,
        node: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parameter_index: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        capacity: Option<T>,
        /// $/MWh
        fuel_cost: T,
        /// ton CO2 / MWh
        emissions_rate: T,
        /// Profile id of the hourly availability factor; `None` means always 1.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        availability_profile: Option<String>,
    },
    TransportLine {
        name: String,
        from: String,
        to: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parameter_index: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        capacity: Option<T>,
    },
    Battery {
        name: String,
        node: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parameter_index: Option<usize>,
        /// Energy capacity, MWh.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        capacity: Option<T>,
        duration_hours: T,
        charge_efficiency: T,
        discharge_efficiency: T,
        #[serde(default = "default_soc_fraction")]
        boundary_soc_fraction: T,
    },
    FixedLoad {
        name: String,
        node: String,
        demand_profile: String,
        /// Value of lost load, $/MWh.
        shed_penalty: T,
        /// Loads are never expandable; present only so a bad file can be reported.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parameter_index: Option<usize>,
    },
}

impl<T: Scalar> Device<T> {
    pub fn name(&self) -> &str {
        match self {
            Device::Generator { name, .. }
            | Device::TransportLine { name, .. }
            | Device::Battery { name, .. }
            | Device::FixedLoad { name, .. } => name,
        }
    }

    pub fn kind(&self) -> DeviceKind {
        match self {
            Device::Generator { .. } => DeviceKind::Generator,
            Device::TransportLine { .. } => DeviceKind::TransportLine,
            Device::Battery { .. } => DeviceKind::Battery,
            Device::FixedLoad { .. } => DeviceKind::FixedLoad,
        }
    }

    pub fn parameter_index(&self) -> Option<usize> {
        match self {
            Device::Generator { parameter_index, .. }
            | Device::TransportLine { parameter_index, .. }
            | Device::Battery { parameter_index, .. }
            | Device::FixedLoad { parameter_index, .. } => *parameter_index,
        }
    }

    pub fn fixed_capacity(&self) -> Option<T> {
        match self {
            Device::Generator { capacity, .. }
            | Device::TransportLine { capacity, .. }
            | Device::Battery { capacity, .. } => *capacity,
            Device::FixedLoad { .. } => None,
        }
    }

    /// Capacity under a parameter vector: η entry for expandable devices,
    /// the fixed value otherwise.
    pub fn capacity_under(&self, eta: &[T]) -> T {
        match (self.parameter_index(), self.fixed_capacity()) {
            (Some(k), _) => eta[k],
            (None, Some(c)) => c,
            (None, None) => T::zero(),
        }
    }

    fn nodes(&self) -> Vec<&str> {
        match self {
            Device::TransportLine { from, to, .. } => vec![from, to],
            Device::Generator { node, .. } | Device::Battery { node, .. } | Device::FixedLoad { node, .. } => {
                vec![node]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<T: Scalar> {
    pub nodes: Vec<String>,
    pub devices: Vec<Device<T>>,
}

/// Device positions grouped by kind, in network order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceIndex {
    pub generators: Vec<usize>,
    pub lines: Vec<usize>,
    pub batteries: Vec<usize>,
    pub loads: Vec<usize>,
    node_pos: HashMap<String, usize>,
}

impl DeviceIndex {
    pub fn node(&self, id: &str) -> Option<usize> {
        self.node_pos.get(id).copied()
    }
}

impl<T: Scalar> Network<T> {
    /// K: one past the largest parameter index (0 when nothing is expandable).
    pub fn parameter_count(&self) -> usize {
        self.devices
            .iter()
            .filter_map(|d| d.parameter_index())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn index(&self) -> DeviceIndex {
        let mut idx = DeviceIndex {
            generators: vec![],
            lines: vec![],
            batteries: vec![],
            loads: vec![],
            node_pos: self.nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        };
        for (i, d) in self.devices.iter().enumerate() {
            match d.kind() {
                DeviceKind::Generator => idx.generators.push(i),
                DeviceKind::TransportLine => idx.lines.push(i),
                DeviceKind::Battery => idx.batteries.push(i),
                DeviceKind::FixedLoad => idx.loads.push(i),
            }
        }
        idx
    }

    /// Device owning each parameter index (None for gaps).
    pub fn parameter_owners(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.parameter_count()];
        for (i, d) in self.devices.iter().enumerate() {
            if let Some(k) = d.parameter_index() {
                owners[k].get_or_insert(i);
            }
        }
        owners
    }

    pub fn max_fuel_cost(&self) -> T {
        self.devices
            .iter()
            .filter_map(|d| match d {
                Device::Generator { fuel_cost, .. } => Some(*fuel_cost),
                _ => None,
            })
            .fold(T::zero(), |m, c| m.max(c))
    }

    /// Largest shedding penalty, zero without loads.
    pub fn max_shed_penalty(&self) -> T {
        self.devices
            .iter()
            .filter_map(|d| match d {
                Device::FixedLoad { shed_penalty, .. } => Some(*shed_penalty),
                _ => None,
            })
            .fold(T::zero(), |m, c| m.max(c))
    }

    pub fn mean_fuel_cost(&self) -> T {
        let costs: Vec<T> = self
            .devices
            .iter()
            .filter_map(|d| match d {
                Device::Generator { fuel_cost, .. } => Some(*fuel_cost),
                _ => None,
            })
            .collect();
        if costs.is_empty() {
            T::zero()
        } else {
            costs.iter().copied().sum::<T>() / T::from_usize(costs.len()).unwrap()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    UnknownNode(String),
    DuplicateNode(String),
    DuplicateDeviceName,
    LineSelfLoop,
    SharedParameterIndex(usize),
    ParameterIndexGap(usize),
    CapacitySource,
    LoadHasParameterIndex,
    NegativeFuelCost,
    NegativeEmissionsRate,
    ShedPenaltyTooLow,
    NonPositiveDuration,
    EfficiencyOutOfRange,
    BoundaryFractionOutOfRange,
    NegativeCapacity,
    NonFinite,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::UnknownNode(n) => write!(f, "references unknown node `{n}`"),
            Rule::DuplicateNode(n) => write!(f, "node `{n}` declared twice"),
            Rule::DuplicateDeviceName => write!(f, "device name used twice"),
            Rule::LineSelfLoop => write!(f, "line endpoints must be distinct"),
            Rule::SharedParameterIndex(k) => write!(f, "parameter index {k} owned by more than one device"),
            Rule::ParameterIndexGap(k) => write!(f, "parameter index {k} has no owning device"),
            Rule::CapacitySource => write!(f, "expandable-kind device needs exactly one of parameter_index or capacity"),
            Rule::LoadHasParameterIndex => write!(f, "fixed loads are not expandable"),
            Rule::NegativeFuelCost => write!(f, "fuel_cost must be >= 0"),
            Rule::NegativeEmissionsRate => write!(f, "emissions_rate must be >= 0"),
            Rule::ShedPenaltyTooLow => write!(f, "shed_penalty must exceed every fuel cost"),
            Rule::NonPositiveDuration => write!(f, "battery duration must be > 0"),
            Rule::EfficiencyOutOfRange => write!(f, "efficiencies must lie in (0, 1]"),
            Rule::BoundaryFractionOutOfRange => write!(f, "boundary state fraction must lie in [0, 1]"),
            Rule::NegativeCapacity => write!(f, "fixed capacity must be >= 0"),
            Rule::NonFinite => write!(f, "attribute is not finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending device name; `None` for network-level rules.
    pub device: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.device {
            Some(d) => write!(f, "device `{d}`: {}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

/// Checks every structural and attribute invariant; returns an empty list
/// when the network is well-formed.
pub fn validate_network<T: Scalar>(net: &Network<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |device: Option<&str>, rule: Rule| {
        out.push(Violation {
            device: device.map(str::to_owned),
            rule,
        })
    };

    let mut seen_nodes = HashSet::new();
    for n in &net.nodes {
        if !seen_nodes.insert(n.as_str()) {
            push(None, Rule::DuplicateNode(n.clone()));
        }
    }
    let mut seen_names = HashSet::new();
    let max_fuel = net.max_fuel_cost();

    for d in &net.devices {
        let name = Some(d.name());
        if !seen_names.insert(d.name()) {
            push(name, Rule::DuplicateDeviceName);
        }
        for n in d.nodes() {
            if !seen_nodes.contains(n) {
                push(name, Rule::UnknownNode(n.to_owned()));
            }
        }
        if let Some(c) = d.fixed_capacity() {
            if !c.is_finite() {
                push(name, Rule::NonFinite);
            } else if c < T::zero() {
                push(name, Rule::NegativeCapacity);
            }
        }
        let expandable_kind = d.kind() != DeviceKind::FixedLoad;
        if expandable_kind && d.parameter_index().is_some() == d.fixed_capacity().is_some() {
            push(name, Rule::CapacitySource);
        }
        match d {
            Device::Generator { fuel_cost, emissions_rate, .. } => {
                if !fuel_cost.is_finite() || !emissions_rate.is_finite() {
                    push(name, Rule::NonFinite);
                }
                if *fuel_cost < T::zero() {
                    push(name, Rule::NegativeFuelCost);
                }
                if *emissions_rate < T::zero() {
                    push(name, Rule::NegativeEmissionsRate);
                }
            }
            Device::TransportLine { from, to, .. } => {
                if from == to {
                    push(name, Rule::LineSelfLoop);
                }
            }
            Device::Battery {
                duration_hours,
                charge_efficiency,
                discharge_efficiency,
                boundary_soc_fraction,
                ..
            } => {
                if !(*duration_hours > T::zero()) || !duration_hours.is_finite() {
                    push(name, Rule::NonPositiveDuration);
                }
                let eff_ok = |e: T| e > T::zero() && e <= T::one();
                if !eff_ok(*charge_efficiency) || !eff_ok(*discharge_efficiency) {
                    push(name, Rule::EfficiencyOutOfRange);
                }
                if !(*boundary_soc_fraction >= T::zero() && *boundary_soc_fraction <= T::one()) {
                    push(name, Rule::BoundaryFractionOutOfRange);
                }
            }
            Device::FixedLoad {
                shed_penalty,
                parameter_index,
                ..
            } => {
                if parameter_index.is_some() {
                    push(name, Rule::LoadHasParameterIndex);
                }
                if !(*shed_penalty > max_fuel) || !shed_penalty.is_finite() {
                    push(name, Rule::ShedPenaltyTooLow);
                }
            }
        }
    }

    // parameter index bijection; loads are reported above and excluded here
    let mut owners: HashMap<usize, Vec<&str>> = HashMap::new();
    for d in net.devices.iter().filter(|d| d.kind() != DeviceKind::FixedLoad) {
        if let Some(k) = d.parameter_index() {
            owners.entry(k).or_default().push(d.name());
        }
    }
    let mut keys: Vec<usize> = owners.keys().copied().collect();
    keys.sort_unstable();
    for k in &keys {
        let names = &owners[k];
        if names.len() > 1 {
            push(Some(names[1]), Rule::SharedParameterIndex(*k));
        }
    }
    if let Some(&max) = keys.last() {
        for k in 0..=max {
            if !owners.contains_key(&k) {
                push(None, Rule::ParameterIndexGap(k));
            }
        }
    }
    out
}

/// Capacity vector η (MW for generators and lines, MWh for batteries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "")]
pub struct ParameterVector<T: Scalar>(pub Vec<T>);

impl<T: Scalar> ParameterVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Scalar> std::ops::Index<usize> for ParameterVector<T> {
    type Output = T;
    fn index(&self, k: usize) -> &T {
        &self.0[k]
    }
}

/// Box `[η^min, η^max]`; η^min is the existing capacity.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct ParameterBounds<T: Scalar> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> ParameterBounds<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, NetworkError> {
        if lower.len() != upper.len() {
            return Err(NetworkError::LengthMismatch {
                what: "upper bounds",
                got: upper.len(),
                expected: lower.len(),
            });
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            let reason = if !l.is_finite() || !u.is_finite() {
                "bounds must be finite"
            } else if *l < T::zero() {
                "lower bound must be >= 0"
            } else if l > u {
                "lower bound exceeds upper bound"
            } else {
                continue;
            };
            return Err(NetworkError::InvalidBounds {
                index: k,
                reason: reason.into(),
            });
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, eta: &[T]) -> bool {
        eta.len() == self.len()
            && eta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(e, (l, u))| e >= l && e <= u)
    }

    pub fn lower_vector(&self) -> ParameterVector<T> {
        ParameterVector(self.lower.clone())
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ParameterBounds<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(bound = "")]
        struct Raw<T: Scalar> {
            lower: Vec<T>,
            upper: Vec<T>,
        }
        let raw = Raw::<T>::deserialize(d)?;
        ParameterBounds::new(raw.lower, raw.upper).map_err(serde::de::Error::custom)
    }
}

/// Annualized capital costs γ per unit of capacity, charged per planning period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "")]
pub struct InvestmentCosts<T: Scalar>(Vec<T>);

impl<T: Scalar> InvestmentCosts<T> {
    pub fn new(gamma: Vec<T>) -> Result<Self, NetworkError> {
        if let Some(k) = gamma.iter().position(|g| !(*g >= T::zero()) || !g.is_finite()) {
            return Err(NetworkError::NegativeCost(k));
        }
        Ok(Self(gamma))
    }

    pub fn gamma(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Elementwise clamp onto the parameter box.
pub fn project_parameters<T: Scalar>(eta: &[T], bounds: &ParameterBounds<T>) -> Result<ParameterVector<T>, NetworkError> {
    if eta.len() != bounds.len() {
        return Err(NetworkError::LengthMismatch {
            what: "parameter vector",
            got: eta.len(),
            expected: bounds.len(),
        });
    }
    Ok(ParameterVector(
        eta.iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(e, (l, u))| e.max(*l).min(*u))
            .collect(),
    ))
}

/// Expansion spend γᵀ(η − η^min).
pub fn investment_cost<T: Scalar>(
    eta: &[T],
    gamma: &InvestmentCosts<T>,
    bounds: &ParameterBounds<T>,
) -> Result<T, NetworkError> {
    for (what, got) in [("investment costs", gamma.len()), ("parameter vector", eta.len())] {
        if got != bounds.len() {
            return Err(NetworkError::LengthMismatch {
                what,
                got,
                expected: bounds.len(),
            });
        }
    }
    Ok(eta
        .iter()
        .zip(&bounds.lower)
        .zip(&gamma.0)
        .map(|((e, l), g)| *g * (*e - *l))
        .sum())
}

/// A network together with its parameter box and capital costs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningCase<T: Scalar> {
    pub network: Network<T>,
    pub bounds: ParameterBounds<T>,
    pub costs: InvestmentCosts<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct CaseFile<T: Scalar> {
    version: u32,
    nodes: Vec<String>,
    devices: Vec<Device<T>>,
    bounds: ParameterBounds<T>,
    investment_costs: InvestmentCosts<T>,
}

impl<T: Scalar> PlanningCase<T> {
    /// Validates the network and the consistency of bounds and costs with K.
    pub fn new(network: Network<T>, bounds: ParameterBounds<T>, costs: InvestmentCosts<T>) -> Result<Self, NetworkError> {
        let violations = validate_network(&network);
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }
        let k = network.parameter_count();
        if bounds.len() != k {
            return Err(NetworkError::LengthMismatch {
                what: "bounds",
                got: bounds.len(),
                expected: k,
            });
        }
        if costs.len() != k {
            return Err(NetworkError::LengthMismatch {
                what: "investment costs",
                got: costs.len(),
                expected: k,
            });
        }
        Ok(Self { network, bounds, costs })
    }

    pub fn parameter_count(&self) -> usize {
        self.bounds.len()
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let file: CaseFile<T> = serde_json::from_str(text)?;
        if file.version != CASE_FORMAT_VERSION {
            return Err(NetworkError::Version(file.version));
        }
        Self::new(
            Network {
                nodes: file.nodes,
                devices: file.devices,
            },
            file.bounds,
            file.investment_costs,
        )
    }

    pub fn to_json(&self) -> String {
        let file = CaseFile {
            version: CASE_FORMAT_VERSION,
            nodes: self.network.nodes.clone(),
            devices: self.network.devices.clone(),
            bounds: self.bounds.clone(),
            investment_costs: self.costs.clone(),
        };
        serde_json::to_string_pretty(&file).expect("case serializes")
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
