//! Seeded synthetic planning cases: small networks with gas, coal, solar,
//! wind, batteries and transport lines plus matching hourly profiles.
//!
//! Used for the tutorial case, tests, and desk-scale studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{Device, InvestmentCosts, Network, ParameterBounds, PlanningCase};
use crate::scalar::Scalar;
use crate::scenario::{profile_roles, slice_days, ScenarioError, ScenarioSet, TimeSeriesTable};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub nodes: usize,
    /// Length of the generated table in 24-hour days.
    pub days: usize,
    /// Scenario length the capital costs are charged over.
    pub scenario_hours: usize,
    pub seed: u64,
    pub batteries: bool,
    /// Days whose solar and wind output collapses while demand stays off-peak.
    pub drought_days: Vec<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            nodes: 3,
            days: 8,
            scenario_hours: 24,
            seed: 7,
            batteries: true,
            drought_days: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase<T: Scalar> {
    pub case: PlanningCase<T>,
    pub table: TimeSeriesTable<T>,
}

impl<T: Scalar> SyntheticCase<T> {
    pub fn scenarios(&self, hours: usize) -> Result<ScenarioSet<T>, ScenarioError> {
        slice_days(&self.table, &self.case.network, hours)
    }
}

// annualized capital cost, $ per MW (MWh for storage) per year
const SOLAR_ANNUAL: f64 = 55_000.0;
const WIND_ANNUAL: f64 = 95_000.0;
const GAS_ANNUAL: f64 = 80_000.0;
const BATTERY_ANNUAL: f64 = 18_000.0;
const LINE_ANNUAL: f64 = 9_000.0;

struct Builder<T: Scalar> {
    devices: Vec<Device<T>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    gamma: Vec<f64>,
    period: f64,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, lower: f64, upper: f64, annual: f64) -> Option<usize> {
        self.lower.push(lower);
        self.upper.push(upper);
        self.gamma.push(annual * self.period);
        Some(self.lower.len() - 1)
    }
}

/// Random case with `cfg.nodes` nodes arranged on a chain plus one chord.
pub fn random_case<T: Scalar>(cfg: &SyntheticConfig) -> SyntheticCase<T> {
    assert!(cfg.nodes >= 1, "need at least one node");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = T::lit;
    let nodes: Vec<String> = (0..cfg.nodes).map(|i| format!("n{i}")).collect();
    let mut b: Builder<T> = Builder {
        devices: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        gamma: Vec::new(),
        period: cfg.scenario_hours as f64 / (365.0 * 24.0),
    };
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let hours = cfg.days * 24;

    let day_scale: Vec<f64> = (0..cfg.days).map(|_| rng.random_range(0.85..1.15)).collect();
    let clouds: Vec<f64> = (0..cfg.days).map(|_| rng.random_range(0.35..1.0)).collect();
    let winds: Vec<f64> = (0..cfg.days).map(|_| rng.random_range(0.1..0.9)).collect();
    let drought = |d: usize| cfg.drought_days.contains(&d);

    for (i, node) in nodes.iter().enumerate() {
        let base: f64 = rng.random_range(15.0..45.0);
        let demand: Vec<f64> = (0..hours)
            .map(|h| {
                let (d, hod) = (h / 24, (h % 24) as f64);
                let shape = 0.75 + 0.25 * ((hod - 18.0) / 24.0 * std::f64::consts::TAU).cos();
                let scale = if drought(d) { 0.9 } else { day_scale[d] };
                base * shape * scale * rng.random_range(0.97..1.03)
            })
            .collect();
        let profile = format!("load_{node}");
        columns.push((profile.clone(), demand));
        b.devices.push(Device::FixedLoad {
            name: format!("load_{node}"),
            node: node.clone(),
            demand_profile: profile,
            shed_penalty: l(1000.0),
            parameter_index: None,
        });

        if i % 2 == 0 {
            let existing = (base * rng.random_range(0.6..1.0)).round();
            let parameter_index = b.param(existing, existing + 120.0, GAS_ANNUAL);
            b.devices.push(Device::Generator {
                name: format!("gas_{node}"),
                node: node.clone(),
                parameter_index,
                capacity: None,
                fuel_cost: l(rng.random_range(35.0..50.0)),
                emissions_rate: l(rng.random_range(0.35..0.45)),
                availability_profile: None,
            });
        } else {
            b.devices.push(Device::Generator {
                name: format!("coal_{node}"),
                node: node.clone(),
                parameter_index: None,
                capacity: Some(l((base * rng.random_range(0.5..0.8)).round())),
                fuel_cost: l(rng.random_range(18.0..26.0)),
                emissions_rate: l(rng.random_range(0.9..1.05)),
                availability_profile: None,
            });
        }

        let solar_profile = format!("solar_{node}");
        let lat = rng.random_range(0.85..1.0);
        columns.push((
            solar_profile.clone(),
            (0..hours)
                .map(|h| {
                    let (d, hod) = (h / 24, (h % 24) as f64);
                    let sun = ((hod - 6.0) / 12.0 * std::f64::consts::PI).sin().max(0.0);
                    let c = if drought(d) { 0.04 } else { clouds[d] };
                    (sun * c * lat).clamp(0.0, 1.0)
                })
                .collect(),
        ));
        let parameter_index = b.param(0.0, 250.0, SOLAR_ANNUAL * rng.random_range(0.9..1.1));
        b.devices.push(Device::Generator {
            name: format!("solar_{node}"),
            node: node.clone(),
            parameter_index,
            capacity: None,
            fuel_cost: l(0.0),
            emissions_rate: l(0.0),
            availability_profile: Some(solar_profile),
        });

        if i % 3 == 1 {
            let wind_profile = format!("wind_{node}");
            let mut level: f64 = rng.random_range(0.2..0.7);
            let series = (0..hours)
                .map(|h| {
                    let d = h / 24;
                    level = (0.85 * level + 0.15 * winds[d] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                    if drought(d) {
                        0.03
                    } else {
                        level
                    }
                })
                .collect();
            columns.push((wind_profile.clone(), series));
            let parameter_index = b.param(0.0, 200.0, WIND_ANNUAL * rng.random_range(0.9..1.1));
            b.devices.push(Device::Generator {
                name: format!("wind_{node}"),
                node: node.clone(),
                parameter_index,
                capacity: None,
                fuel_cost: l(0.0),
                emissions_rate: l(0.0),
                availability_profile: Some(wind_profile),
            });
        }

        if cfg.batteries && i % 2 == 1 || cfg.batteries && cfg.nodes == 1 {
            let parameter_index = b.param(0.0, 300.0, BATTERY_ANNUAL * rng.random_range(0.9..1.1));
            b.devices.push(Device::Battery {
                name: format!("battery_{node}"),
                node: node.clone(),
                parameter_index,
                capacity: None,
                duration_hours: l(4.0),
                charge_efficiency: l(0.95),
                discharge_efficiency: l(0.95),
                boundary_soc_fraction: l(0.5),
            });
        }
    }

    let mut edges: Vec<(usize, usize)> = (1..cfg.nodes).map(|i| (i - 1, i)).collect();
    if cfg.nodes >= 3 {
        edges.push((0, cfg.nodes - 1));
    }
    for (a, c) in edges {
        let existing = rng.random_range(5.0..20.0_f64).round();
        let parameter_index = b.param(existing, existing + 100.0, LINE_ANNUAL * rng.random_range(0.8..1.2));
        b.devices.push(Device::TransportLine {
            name: format!("line_{}_{}", nodes[a], nodes[c]),
            from: nodes[a].clone(),
            to: nodes[c].clone(),
            parameter_index,
            capacity: None,
        });
    }

    let network = Network { nodes, devices: b.devices };
    let conv = |v: Vec<f64>| v.into_iter().map(l).collect::<Vec<T>>();
    let bounds = ParameterBounds::new(conv(b.lower), conv(b.upper)).expect("generated bounds are valid");
    let costs = InvestmentCosts::new(conv(b.gamma)).expect("generated costs are valid");
    let case = PlanningCase::new(network, bounds, costs).expect("generated network is valid");
    let roles = profile_roles(&case.network);
    let table = TimeSeriesTable::new(columns.into_iter().map(|(n, v)| (n, conv(v))).collect(), &roles)
        .expect("generated profiles are in range");
    SyntheticCase { case, table }
}

/// The fixed three-node case used in the README walkthrough.
pub fn tutorial_case<T: Scalar>() -> SyntheticCase<T> {
    random_case(&SyntheticConfig {
        nodes: 3,
        days: 14,
        scenario_hours: 24,
        seed: 2024,
        batteries: true,
        drought_days: vec![],
    })
}
