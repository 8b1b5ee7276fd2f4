use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use gridplan_core::synthetic::{random_case, SyntheticCase, SyntheticConfig};
use gridplan_frontdoor::service::router;
use gridplan_frontdoor::session::SessionStore;
use gridplan_frontdoor::study::Overlay;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const REL_TOL: f64 = 0.02;

fn write_case(dir: &Path, seed: u64) {
    let sc: SyntheticCase<f64> = random_case(&SyntheticConfig {
        nodes: 4,
        days: 2,
        scenario_hours: 4,
        seed,
        batteries: true,
        drought_days: vec![],
    });
    sc.case.save(&dir.join("network.json")).unwrap();
    std::fs::write(dir.join("timeseries.csv"), sc.table.to_csv()).unwrap();
}

fn spec(dir: &Path, carbon_weight: f64) -> Value {
    json!({
        "network": dir.join("network.json"),
        "timeseries": dir.join("timeseries.csv"),
        "hours": 4,
        "carbon_weight": carbon_weight,
        "config": {
            "step_size": 1.0,
            "batch_size": 4,
            "max_iterations": 150,
            "eval_every": 1,
            "rel_tol": REL_TOL,
            "rng_seed": 3
        }
    })
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let code = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (code, value)
}

async fn create(app: &Router, spec: Value) -> String {
    let (code, v) = call(app, Method::POST, "/sessions", Some(spec)).await;
    assert_eq!(code, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn wait(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (code, v) = call(app, Method::GET, &format!("/sessions/{id}/status"), None).await;
        assert_eq!(code, StatusCode::OK);
        if v["status"] != "running" {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "run did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn run(app: &Router, id: &str, action: &str, body: Option<Value>) -> Value {
    let (code, v) = call(app, Method::POST, &format!("/sessions/{id}/{action}"), body).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["status"], "running");
    let done = wait(app, id).await;
    assert_ne!(done["status"], "failed", "{done}");
    done
}

async fn history(app: &Router, id: &str) -> Value {
    let (code, v) = call(app, Method::GET, &format!("/sessions/{id}/history"), None).await;
    assert_eq!(code, StatusCode::OK);
    v
}

fn first_within(curve: &Value, reference: f64) -> Option<u64> {
    curve
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["loss"].as_f64().unwrap() <= reference * (1.0 + REL_TOL))
        .map(|r| r["iteration"].as_u64().unwrap())
}

fn app() -> (Router, Arc<SessionStore>) {
    let store = Arc::new(SessionStore::in_memory());
    (router(store.clone()), store)
}

#[tokio::test(flavor = "multi_thread")]
async fn solve_then_poll_reports_progress_and_a_bounded_plan() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 100);
    let (app, _) = app();
    let id = create(&app, spec(tmp.path(), 0.0)).await;

    let (code, v) = call(&app, Method::GET, &format!("/sessions/{id}/status"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["status"], "idle");
    assert_eq!(v["runs_completed"], 0);

    let done = run(&app, &id, "solve", Some(json!({ "iters": 40 }))).await;
    assert_eq!(done["iteration"], 40);
    assert_eq!(done["runs_completed"], 1);
    assert!(done["latest_full_loss"].as_f64().unwrap() > 0.0);

    let (code, plan) = call(&app, Method::GET, &format!("/sessions/{id}/plan"), None).await;
    assert_eq!(code, StatusCode::OK);
    let rows = plan["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        let (lo, x, hi) = (r["eta_min"].as_f64().unwrap(), r["eta_star"].as_f64().unwrap(), r["eta_max"].as_f64().unwrap());
        assert!(lo <= x && x <= hi, "{r}");
        assert!(r["delta"].is_number());
    }

    let (code, list) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(list["sessions"], json!([id]));
}

#[tokio::test(flavor = "multi_thread")]
async fn resolving_after_a_carbon_patch_beats_a_fresh_cold_solve() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 101);
    let (app, _) = app();
    let warm = create(&app, spec(tmp.path(), 200.0)).await;
    run(&app, &warm, "solve", None).await;
    let (code, overlay) = call(&app, Method::PATCH, &format!("/sessions/{warm}/assumptions"), Some(json!({ "carbon_weight": 150.0 }))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(overlay["carbon_weight"], 150.0);
    run(&app, &warm, "resolve", None).await;

    let cold = create(&app, spec(tmp.path(), 150.0)).await;
    run(&app, &cold, "solve", None).await;

    let cold_h = history(&app, &cold).await;
    let cold_run = &cold_h["runs"][0];
    let reference = cold_run["full_loss"].as_f64().unwrap();
    let cold_iters = first_within(&cold_run["loss_curve"], reference).unwrap();
    let warm_h = history(&app, &warm).await;
    let resolve = &warm_h["runs"][1];
    assert_eq!(resolve["overlay"]["carbon_weight"], 150.0);
    let warm_iters = first_within(&resolve["loss_curve"], reference).expect("resolve reaches the cold loss");
    assert!(warm_iters < cold_iters, "resolve {warm_iters} vs cold {cold_iters}");
}

#[tokio::test(flavor = "multi_thread")]
async fn resolving_an_unchanged_overlay_stops_immediately() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 102);
    let (app, _) = app();
    let id = create(&app, spec(tmp.path(), 50.0)).await;
    run(&app, &id, "solve", None).await;
    let (code, _) = call(&app, Method::PATCH, &format!("/sessions/{id}/assumptions"), Some(json!({}))).await;
    assert_eq!(code, StatusCode::OK);
    let done = run(&app, &id, "resolve", None).await;
    assert_eq!(done["status"], "converged");
    assert_eq!(done["converged_at"], 0);
    let h = history(&app, &id).await;
    assert_eq!(h["runs"].as_array().unwrap().len(), 2);
    assert_eq!(h["runs"][1]["iterations"], 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_are_isolated() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 103);
    let (app, _) = app();
    let a = create(&app, spec(tmp.path(), 0.0)).await;
    let b = create(&app, spec(tmp.path(), 0.0)).await;
    assert_ne!(a, b);
    let (code, _) = call(&app, Method::PATCH, &format!("/sessions/{a}/assumptions"), Some(json!({ "carbon_weight": 300.0 }))).await;
    assert_eq!(code, StatusCode::OK);
    run(&app, &a, "solve", Some(json!({ "iters": 10 }))).await;

    let (_, status_b) = call(&app, Method::GET, &format!("/sessions/{b}/status"), None).await;
    assert_eq!(status_b["runs_completed"], 0);
    let (code, plan_b) = call(&app, Method::GET, &format!("/sessions/{b}/plan"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert!(plan_b["iteration"].is_null());
    for r in plan_b["rows"].as_array().unwrap() {
        assert_eq!(r["eta_star"], r["eta_min"]);
    }
    let hb = history(&app, &b).await;
    assert_eq!(hb["overlay"]["carbon_weight"], 0.0);
    assert!(hb["runs"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_map_to_status_codes() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 104);
    let (app, _) = app();

    let (code, v) = call(&app, Method::GET, "/sessions/nope/status", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    let (code, _) = call(&app, Method::POST, "/sessions/nope/solve", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let (code, _) = call(&app, Method::POST, "/sessions", Some(json!({ "network": "x" }))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let mut bad = spec(tmp.path(), 0.0);
    bad["network"] = json!(tmp.path().join("missing.json"));
    let (code, _) = call(&app, Method::POST, "/sessions", Some(bad)).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let id = create(&app, spec(tmp.path(), 0.0)).await;
    let (code, _) = call(&app, Method::POST, &format!("/sessions/{id}/resolve"), None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&app, Method::POST, &format!("/sessions/{id}/solve"), Some(json!({ "init": "current" }))).await;
    assert_eq!(code, StatusCode::CONFLICT);

    for patch in [
        json!({ "carbon_weight": -1.0 }),
        json!({ "cost_multipliers": { "battery": 0.0 } }),
        json!({ "bounds": { "9999": { "upper": 1.0 } } }),
        json!({ "unknown": 1 }),
    ] {
        let (code, _) = call(&app, Method::PATCH, &format!("/sessions/{id}/assumptions"), Some(patch.clone())).await;
        assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY, "{patch}");
    }
    let (code, _) = call(&app, Method::POST, &format!("/sessions/{id}/solve"), Some(json!({ "iters": "many" }))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let (code, _) = call(&app, Method::POST, &format!("/sessions/{id}/solve"), Some(json!({ "iters": 150 }))).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let (code, _) = call(&app, Method::POST, &format!("/sessions/{id}/solve"), None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&app, Method::PATCH, &format!("/sessions/{id}/assumptions"), Some(json!({ "carbon_weight": 1.0 }))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    wait(&app, &id).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn history_losses_reproduce_and_restart_restores_the_plan() {
    let tmp = TempDir::new().unwrap();
    write_case(tmp.path(), 105);
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let store = Arc::new(SessionStore::open(&data).unwrap());
    let app = router(store.clone());
    let id = create(&app, spec(tmp.path(), 80.0)).await;
    run(&app, &id, "solve", Some(json!({ "iters": 30 }))).await;
    call(&app, Method::PATCH, &format!("/sessions/{id}/assumptions"), Some(json!({ "cost_multipliers": { "battery": 2.0 } }))).await;
    run(&app, &id, "resolve", Some(json!({ "iters": 30 }))).await;

    let h = history(&app, &id).await;
    let runs = h["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["init"], "cold");
    assert_eq!(runs[1]["init"], "resolve");

    let session = store.get(&id).unwrap();
    let state = session.state().unwrap();
    let last: Overlay = serde_json::from_value(runs[1]["overlay"].clone()).unwrap();
    let replay = session.evaluate(&last, state.plan().as_slice()).unwrap();
    let recorded = runs[1]["full_loss"].as_f64().unwrap();
    assert!((replay - recorded).abs() <= 1e-9 * recorded.abs(), "{replay} vs {recorded}");

    let (_, plan) = call(&app, Method::GET, &format!("/sessions/{id}/plan"), None).await;
    assert_eq!(plan["full_loss"].as_f64().unwrap(), recorded);
    drop((app, session, store));

    let reopened = Arc::new(SessionStore::open(&data).unwrap());
    let app = router(reopened);
    let (code, again) = call(&app, Method::GET, &format!("/sessions/{id}/plan"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(again, plan);
    assert_eq!(history(&app, &id).await, h);
}
