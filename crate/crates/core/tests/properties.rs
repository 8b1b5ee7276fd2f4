use gridplan_core::dispatch::{self, assemble, DispatchSettings};
use gridplan_core::network::{investment_cost, project_parameters, validate_network, InvestmentCosts, ParameterBounds};
use gridplan_core::objective::{self, ObjectiveSpec};
use gridplan_core::scenario::{select_key_days, Scenario, ScenarioSet};
use gridplan_core::synthetic::{random_case, SyntheticCase, SyntheticConfig};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0..100.0f64, k),
            prop::collection::vec(0.0..100.0f64, k),
            prop::collection::vec(-200.0..300.0f64, k),
            prop::collection::vec(-200.0..300.0f64, k),
        )
    })
}

fn bounds_from(a: &[f64], w: &[f64]) -> ParameterBounds<f64> {
    ParameterBounds::new(a.to_vec(), a.iter().zip(w).map(|(l, w)| l + w).collect()).unwrap()
}

fn norm_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn case(seed: u64, nodes: usize, days: usize, drought: Vec<usize>) -> SyntheticCase<f64> {
    random_case(&SyntheticConfig {
        nodes,
        days,
        scenario_hours: 24,
        seed,
        batteries: true,
        drought_days: drought,
    })
}

fn renumbered(days: &[Scenario<f64>]) -> ScenarioSet<f64> {
    ScenarioSet::new(
        days.iter()
            .enumerate()
            .map(|(i, s)| Scenario { id: i, ..s.clone() })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_contracting((lo, width, x, y) in boxes()) {
        let b = bounds_from(&lo, &width);
        let px = project_parameters(&x, &b).unwrap();
        let py = project_parameters(&y, &b).unwrap();
        prop_assert!(b.contains(px.as_slice()));
        prop_assert_eq!(project_parameters(px.as_slice(), &b).unwrap(), px.clone());
        prop_assert!(norm_inf(px.as_slice(), py.as_slice()) <= norm_inf(&x, &y) + 1e-12);
    }

    #[test]
    fn investment_cost_is_affine_and_monotone(
        (lo, width, x, y) in boxes(),
        t in 0.0..1.0f64,
        gamma_seed in 0.0..1000.0f64,
    ) {
        let b = bounds_from(&lo, &width);
        let k = lo.len();
        let gamma = InvestmentCosts::new((0..k).map(|j| gamma_seed * (j as f64 + 1.0) / k as f64).collect()).unwrap();
        let x = project_parameters(&x, &b).unwrap().0;
        let y = project_parameters(&y, &b).unwrap().0;
        let c = |e: &[f64]| investment_cost(e, &gamma, &b).unwrap();
        prop_assert_eq!(c(b.lower()), 0.0);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = c(&mix);
        let rhs = t * c(&x) + (1.0 - t) * c(&y);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        let hi: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a.max(*b)).collect();
        prop_assert!(c(&hi) >= c(&x) - 1e-9);
    }

    #[test]
    fn validate_network_is_pure(seed in 0u64..1000, nodes in 1usize..6) {
        let mut sc = case(seed, nodes, 1, vec![]);
        if seed % 2 == 0 {
            sc.case.network.nodes.push(sc.case.network.nodes[0].clone());
        }
        let first = validate_network(&sc.case.network);
        prop_assert_eq!(&first, &validate_network(&sc.case.network));
        prop_assert_eq!(first.is_empty(), seed % 2 == 1);
    }

    #[test]
    fn slicing_then_concatenating_reproduces_the_table(seed in 0u64..500, days in 1usize..4, hours in prop::sample::select(vec![1usize, 4, 5, 24])) {
        let sc = case(seed, 3, days, vec![]);
        let set = sc.scenarios(hours).unwrap();
        let covered = set.len() * hours;
        prop_assert_eq!(set.len(), days * 24 / hours);
        let net = &sc.case.network;
        let idx = net.index();
        for (pos, &d) in idx.loads.iter().enumerate() {
            let profile = match &net.devices[d] {
                gridplan_core::network::Device::FixedLoad { demand_profile, .. } => demand_profile,
                _ => unreachable!(),
            };
            let joined: Vec<f64> = set.scenarios().iter().flat_map(|s| s.demand[pos].clone()).collect();
            prop_assert_eq!(&joined[..], &sc.table.column(profile).unwrap()[..covered]);
        }
    }

    #[test]
    fn key_days_are_a_bounded_subset_and_order_free(
        seed in 0u64..500,
        k in 1usize..4,
        perm in Just(()).prop_perturb(|_, mut rng| {
            let mut p: Vec<usize> = (0..10).collect();
            for i in (1..p.len()).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        }),
    ) {
        let sc = case(seed, 3, 10, vec![seed as usize % 10]);
        let set = sc.scenarios(24).unwrap();
        let net = &sc.case.network;
        let b = &sc.case.bounds;
        let picked = select_key_days(&set, net, b, k).unwrap();
        prop_assert!(picked.len() <= 4 * k && picked.len() >= 1);
        for s in picked.scenarios() {
            prop_assert_eq!(s, set.get(s.id));
        }

        let shuffled: Vec<Scenario<f64>> = perm.iter().map(|&i| set.get(i).clone()).collect();
        let again = select_key_days(&renumbered(&shuffled), net, b, k).unwrap();
        let mut original: Vec<usize> = again.scenarios().iter().map(|s| perm[s.id]).collect();
        original.sort_unstable();
        let expected: Vec<usize> = picked.ids();
        prop_assert_eq!(original, expected);
    }

    #[test]
    fn emissions_objective_is_affine_in_weight(seed in 0u64..200, w in 0.0..500.0f64) {
        let sc = case(seed, 2, 1, vec![]);
        let set = sc.scenarios(6).unwrap();
        let b = &sc.case.bounds;
        let eta: Vec<f64> = b.lower().iter().zip(b.upper()).map(|(l, u)| l + 0.3 * (u - l)).collect();
        let settings = DispatchSettings::for_network(&sc.case.network);
        let prob = assemble(&sc.case.network, set.get(0), &eta, &settings).unwrap();
        let sol = dispatch::solve(&prob).unwrap();
        let base = objective::evaluate(&ObjectiveSpec::emissions_aware(0.0), &prob, &sol).unwrap();
        let weighted = objective::evaluate(&ObjectiveSpec::emissions_aware(w), &prob, &sol).unwrap();
        let expected = base + w * prob.emissions(&sol.x);
        prop_assert!((weighted - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
    }
}
