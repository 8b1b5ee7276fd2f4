use std::ops::ControlFlow;

use gridplan_core::dispatch::{self, assemble, DispatchSettings};
use gridplan_core::objective::ObjectiveSpec;
use gridplan_core::planner::{Init, Planner, SolverConfig, StopRule};
use gridplan_core::synthetic::{random_case, SyntheticCase, SyntheticConfig};
use gridplan_core::{PlanningCase32, ScenarioSet32};

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        nodes: 3,
        days: 1,
        scenario_hours: 6,
        seed,
        ..Default::default()
    }
}

#[test]
fn single_precision_dispatch_tracks_double() {
    for seed in 0..5 {
        let wide: SyntheticCase<f64> = random_case(&config(seed));
        let narrow: SyntheticCase<f32> = random_case(&config(seed));
        let (sw, sn) = (wide.scenarios(6).unwrap(), narrow.scenarios(6).unwrap());
        let b = &wide.case.bounds;
        let eta: Vec<f64> = b.lower().iter().zip(b.upper()).map(|(l, u)| l + 0.2 * (u - l)).collect();
        let eta32: Vec<f32> = eta.iter().map(|e| *e as f32).collect();

        let pw = assemble(&wide.case.network, sw.get(0), &eta, &DispatchSettings::for_network(&wide.case.network)).unwrap();
        let pn = assemble(&narrow.case.network, sn.get(0), &eta32, &DispatchSettings::for_network(&narrow.case.network)).unwrap();
        let cw = pw.operational_cost(&dispatch::solve(&pw).unwrap().x);
        let cn = pn.operational_cost(&dispatch::solve(&pn).unwrap().x) as f64;
        assert!((cw - cn).abs() <= 1e-3 * cw.abs().max(1.0), "seed {seed}: {cw} vs {cn}");
    }
}

#[test]
fn single_precision_planner_runs_and_stays_in_bounds() {
    let sc: SyntheticCase<f32> = random_case(&config(3));
    let case: PlanningCase32 = sc.case.clone();
    let set: ScenarioSet32 = sc.scenarios(3).unwrap();
    let obj = ObjectiveSpec::OperationalCost;
    let cfg = SolverConfig {
        step_size: 0.5,
        batch_size: 1,
        max_iterations: 20,
        eval_every: 5,
        ..Default::default()
    };
    let planner = Planner::new(&case, &set, &obj, "cost", cfg).unwrap();
    let state = planner
        .run(Init::Cold, StopRule::MaxIterations, &mut |_| ControlFlow::Continue(()))
        .unwrap();
    assert!(case.bounds.contains(state.plan().as_slice()));
    let first = state.loss_history.first().unwrap().loss;
    assert!(state.best_full_loss.unwrap() <= first);
}
