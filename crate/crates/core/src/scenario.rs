//! Hourly time series, day slicing, and key-day selection.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{Device, Network, ParameterBounds};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("time series {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("time series parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("time series value out of range at row {row}, column `{column}`: {value} ({rule})")]
    OutOfRange {
        row: usize,
        column: String,
        value: f64,
        rule: &'static str,
    },
    #[error("profile `{profile}` referenced by device `{device}` is missing from the time series")]
    MissingProfile { device: String, profile: String },
    #[error("scenario length must be >= 1 hour")]
    ZeroLength,
    #[error("time series has {hours} hour(s), fewer than one {length}-hour scenario")]
    TooShort { hours: usize, length: usize },
    #[error("key-day count must be >= 1")]
    ZeroKeyDays,
    #[error("scenario shape mismatch: {0}")]
    Shape(String),
}

/// Role a profile column plays, used to range-check values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileRole {
    /// MW, >= 0
    Demand,
    /// fraction in [0, 1]
    Availability,
}

/// Profile roles referenced by the devices of a network.
pub fn profile_roles<T: Scalar>(net: &Network<T>) -> HashMap<String, ProfileRole> {
    let mut roles = HashMap::new();
    for d in &net.devices {
        match d {
            Device::Generator {
                availability_profile: Some(p),
                ..
            } => {
                roles.insert(p.clone(), ProfileRole::Availability);
            }
            Device::FixedLoad { demand_profile, .. } => {
                roles.insert(demand_profile.clone(), ProfileRole::Demand);
            }
            _ => {}
        }
    }
    roles
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable<T> {
    hours: usize,
    columns: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> TimeSeriesTable<T> {
    /// Builds a table, checking every value against its role. Unreferenced
    /// columns only need to be finite and non-negative.
    pub fn new(columns: Vec<(String, Vec<T>)>, roles: &HashMap<String, ProfileRole>) -> Result<Self, ScenarioError> {
        let hours = columns.first().map_or(0, |c| c.1.len());
        for (name, values) in &columns {
            if values.len() != hours {
                return Err(ScenarioError::Shape(format!(
                    "column `{name}` has {} rows, expected {hours}",
                    values.len()
                )));
            }
            let role = roles.get(name).copied().unwrap_or(ProfileRole::Demand);
            for (row, v) in values.iter().enumerate() {
                let rule = if !v.is_finite() {
                    "must be finite"
                } else if *v < T::zero() {
                    "must be >= 0"
                } else if role == ProfileRole::Availability && *v > T::one() {
                    "availability must be <= 1"
                } else {
                    continue;
                };
                return Err(ScenarioError::OutOfRange {
                    row,
                    column: name.clone(),
                    value: v.as_f64(),
                    rule,
                });
            }
        }
        Ok(Self { hours, columns })
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn column(&self, name: &str) -> Option<&[T]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("hour");
        for (n, _) in &self.columns {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for h in 0..self.hours {
            out.push_str(&h.to_string());
            for (_, v) in &self.columns {
                out.push(',');
                out.push_str(&v[h].to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a CSV time-series file: first column `hour` (0-based, consecutive),
/// one column per profile id.
pub fn load_time_series<T: Scalar>(path: &Path, roles: &HashMap<String, ProfileRole>) -> Result<TimeSeriesTable<T>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_time_series(&text, roles)
}

pub fn parse_time_series<T: Scalar>(text: &str, roles: &HashMap<String, ProfileRole>) -> Result<TimeSeriesTable<T>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ScenarioError::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0).map(str::trim) != Some("hour") {
        return Err(ScenarioError::Parse {
            row: 0,
            column: headers.get(0).unwrap_or("").to_owned(),
            message: "first column must be `hour`".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_owned()).collect();
    let mut data: Vec<Vec<T>> = vec![Vec::new(); names.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ScenarioError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let hour: usize = record.get(0).unwrap_or("").trim().parse().map_err(|_| ScenarioError::Parse {
            row,
            column: "hour".into(),
            message: "hour must be a non-negative integer".into(),
        })?;
        if hour != row {
            return Err(ScenarioError::Parse {
                row,
                column: "hour".into(),
                message: format!("expected hour {row}, found {hour}"),
            });
        }
        for (c, name) in names.iter().enumerate() {
            let cell = record.get(c + 1).map(str::trim).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| ScenarioError::Parse {
                row,
                column: name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            data[c].push(T::lit(v));
        }
    }
    TimeSeriesTable::new(names.into_iter().zip(data).collect(), roles)
}

/// One independent operating period (a day by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Scenario<T: Scalar> {
    pub id: usize,
    pub hours: usize,
    /// Per fixed load (network order) × hour, MW.
    pub demand: Vec<Vec<T>>,
    /// Per generator (network order) × hour, fraction of capacity.
    pub availability: Vec<Vec<T>>,
}

impl<T: Scalar> Scenario<T> {
    pub fn total_demand(&self, hour: usize) -> T {
        self.demand.iter().map(|d| d[hour]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ScenarioSet<T: Scalar> {
    scenarios: Vec<Scenario<T>>,
}

impl<T: Scalar> ScenarioSet<T> {
    pub fn new(scenarios: Vec<Scenario<T>>) -> Result<Self, ScenarioError> {
        let first = scenarios
            .first()
            .ok_or_else(|| ScenarioError::Shape("scenario set is empty".into()))?;
        let (t, nl, ng) = (first.hours, first.demand.len(), first.availability.len());
        if t == 0 {
            return Err(ScenarioError::ZeroLength);
        }
        for s in &scenarios {
            let rows_ok = s.demand.iter().chain(&s.availability).all(|r| r.len() == s.hours);
            if s.hours != t || s.demand.len() != nl || s.availability.len() != ng || !rows_ok {
                return Err(ScenarioError::Shape(format!("scenario {} differs in shape", s.id)));
            }
        }
        Ok(Self { scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn hours_per_scenario(&self) -> usize {
        self.scenarios[0].hours
    }

    pub fn scenarios(&self) -> &[Scenario<T>] {
        &self.scenarios
    }

    pub fn get(&self, i: usize) -> &Scenario<T> {
        &self.scenarios[i]
    }

    pub fn ids(&self) -> Vec<usize> {
        self.scenarios.iter().map(|s| s.id).collect()
    }

    /// Checks the scenario shapes against a network's load and generator counts.
    pub fn check_against(&self, net: &Network<T>) -> Result<(), ScenarioError> {
        let idx = net.index();
        let s = &self.scenarios[0];
        if s.demand.len() != idx.loads.len() || s.availability.len() != idx.generators.len() {
            return Err(ScenarioError::Shape(format!(
                "scenarios carry {} load and {} generator rows; network has {} and {}",
                s.demand.len(),
                s.availability.len(),
                idx.loads.len(),
                idx.generators.len()
            )));
        }
        Ok(())
    }
}

/// Cuts the table into consecutive `hours`-long scenarios; trailing hours
/// that do not fill a scenario are dropped with a warning.
pub fn slice_days<T: Scalar>(table: &TimeSeriesTable<T>, net: &Network<T>, hours: usize) -> Result<ScenarioSet<T>, ScenarioError> {
    if hours == 0 {
        return Err(ScenarioError::ZeroLength);
    }
    let count = table.hours() / hours;
    if count == 0 {
        return Err(ScenarioError::TooShort {
            hours: table.hours(),
            length: hours,
        });
    }
    let dropped = table.hours() - count * hours;
    if dropped > 0 {
        log::warn!("dropping {dropped} trailing hour(s) that do not fill a {hours}-hour scenario");
    }

    let idx = net.index();
    let mut demand_cols = Vec::new();
    for &d in &idx.loads {
        if let Device::FixedLoad { name, demand_profile, .. } = &net.devices[d] {
            let col = table.column(demand_profile).ok_or_else(|| ScenarioError::MissingProfile {
                device: name.clone(),
                profile: demand_profile.clone(),
            })?;
            demand_cols.push(col);
        }
    }
    let mut avail_cols: Vec<Option<&[T]>> = Vec::new();
    for &g in &idx.generators {
        if let Device::Generator {
            name,
            availability_profile,
            ..
        } = &net.devices[g]
        {
            match availability_profile {
                None => avail_cols.push(None),
                Some(p) => {
                    let col = table.column(p).ok_or_else(|| ScenarioError::MissingProfile {
                        device: name.clone(),
                        profile: p.clone(),
                    })?;
                    if col.iter().any(|v| *v > T::one()) {
                        return Err(ScenarioError::Shape(format!("profile `{p}` used as availability exceeds 1")));
                    }
                    avail_cols.push(Some(col));
                }
            }
        }
    }

    let scenarios = (0..count)
        .map(|i| {
            let span = i * hours..(i + 1) * hours;
            Scenario {
                id: i,
                hours,
                demand: demand_cols.iter().map(|c| c[span.clone()].to_vec()).collect(),
                availability: avail_cols
                    .iter()
                    .map(|c| match c {
                        Some(c) => c[span.clone()].to_vec(),
                        None => vec![T::one(); hours],
                    })
                    .collect(),
            }
        })
        .collect();
    ScenarioSet::new(scenarios)
}

/// Per-scenario statistics used for key-day ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayProfile<T> {
    pub id: usize,
    pub peak_load: T,
    pub peak_net_load: T,
    pub renewable_energy: T,
}

/// Ranking statistics. Renewables are generators with an availability
/// profile, weighted by existing capacity; when no renewable has existing
/// capacity each counts with unit weight.
pub fn day_profiles<T: Scalar>(set: &ScenarioSet<T>, net: &Network<T>, bounds: &ParameterBounds<T>) -> Vec<DayProfile<T>> {
    let idx = net.index();
    let existing = bounds.lower();
    let mut weights: Vec<(usize, T)> = idx
        .generators
        .iter()
        .enumerate()
        .filter_map(|(gpos, &d)| match &net.devices[d] {
            Device::Generator {
                availability_profile: Some(_),
                ..
            } => Some((gpos, net.devices[d].capacity_under(existing))),
            _ => None,
        })
        .collect();
    if weights.iter().all(|(_, w)| w.is_zero()) {
        weights.iter_mut().for_each(|(_, w)| *w = T::one());
    }
    set.scenarios()
        .iter()
        .map(|s| {
            let mut peak_load = T::neg_infinity();
            let mut peak_net = T::neg_infinity();
            let mut energy = T::zero();
            for t in 0..s.hours {
                let load = s.total_demand(t);
                let ren: T = weights.iter().map(|(g, w)| s.availability[*g][t] * *w).sum();
                peak_load = peak_load.max(load);
                peak_net = peak_net.max(load - ren);
                energy += ren;
            }
            DayProfile {
                id: s.id,
                peak_load,
                peak_net_load: peak_net,
                renewable_energy: energy,
            }
        })
        .collect()
}

/// Union of the top-k peak load, top-k peak net load, top-k renewable energy
/// and bottom-k renewable energy days, in calendar order. Ties go to the
/// earlier day.
pub fn select_key_days<T: Scalar>(
    set: &ScenarioSet<T>,
    net: &Network<T>,
    bounds: &ParameterBounds<T>,
    k: usize,
) -> Result<ScenarioSet<T>, ScenarioError> {
    if k == 0 {
        return Err(ScenarioError::ZeroKeyDays);
    }
    let profiles = day_profiles(set, net, bounds);
    let top = |key: &dyn Fn(&DayProfile<T>) -> T, descending: bool| -> Vec<usize> {
        let mut order: Vec<&DayProfile<T>> = profiles.iter().collect();
        order.sort_by(|a, b| {
            let (x, y) = (key(a), key(b));
            let ord = if descending { y.partial_cmp(&x) } else { x.partial_cmp(&y) };
            ord.unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
        });
        order.into_iter().take(k).map(|p| p.id).collect()
    };
    let mut chosen = BTreeSet::new();
    chosen.extend(top(&|p| p.peak_load, true));
    chosen.extend(top(&|p| p.peak_net_load, true));
    chosen.extend(top(&|p| p.renewable_energy, true));
    chosen.extend(top(&|p| p.renewable_energy, false));
    let mut picked: Vec<Scenario<T>> = set.scenarios().iter().filter(|s| chosen.contains(&s.id)).cloned().collect();
    picked.sort_by_key(|s| s.id);
    ScenarioSet::new(picked)
}
