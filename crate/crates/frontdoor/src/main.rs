use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use gridplan_core::checkpoint::{load_checkpoint, save_checkpoint};
use gridplan_core::network::{investment_cost, DeviceKind};
use gridplan_core::planner::{Init, SolverConfig, StopRule};
use gridplan_core::synthetic::{random_case, tutorial_case, SyntheticCase, SyntheticConfig};
use gridplan_core::{PlanState64, PlanningCase64};
use gridplan_frontdoor::service;
use gridplan_frontdoor::session::SessionStore;
use gridplan_frontdoor::study::{
    plan_rows, plan_study, write_loss_csv, write_plan_csv, write_sweep_plans_csv, DaySelection, Overlay, PlanRow, Study,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gridplan", version, about = "Capacity expansion planning by implicit gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan one case and write checkpoint, loss history and plan tables.
    Solve(SolveArgs),
    /// Plan a list of assumption values in order, optionally warm-chained.
    Sweep(SweepArgs),
    /// Serve interactive study sessions over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic network and time-series table.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Cost,
    Emissions,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    timeseries: PathBuf,
    /// Hours per scenario.
    #[arg(long, default_value_t = 24)]
    hours: usize,
    /// `all` or `key:<k>`.
    #[arg(long, default_value = "all")]
    days: DaySelection,
    #[arg(long, value_enum, default_value = "cost")]
    objective: ObjectiveArg,
    /// $ per ton CO₂, used with `--objective emissions`.
    #[arg(long, default_value_t = 0.0)]
    carbon_weight: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Step decay constant κ; the step is α / (1 + i/κ).
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    #[arg(long, default_value_t = 0.02)]
    rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Final checkpoint path; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint to warm start from.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SweepParam {
    BatteryCostMult,
    GeneratorCostMult,
    TransportLineCostMult,
    CarbonWeight,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    solve: SolveArgs,
    #[arg(long, value_enum)]
    sweep_param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Warm start each value from the previous plan.
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    warm_chain: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GRIDPLAN_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Directory for session state; in-memory when absent.
    #[arg(long, env = "GRIDPLAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// The fixed three-node walkthrough case; ignores the shape flags.
    #[arg(long)]
    tutorial: bool,
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    #[arg(long, default_value_t = 14)]
    days: usize,
    /// Scenario length the capital costs are charged over.
    #[arg(long, default_value_t = 24)]
    hours: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    no_batteries: bool,
    #[arg(long, value_delimiter = ',')]
    drought_days: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    scenarios: usize,
    available_scenarios: usize,
    iterations: usize,
    converged_at: Option<usize>,
    best_full_loss: Option<f64>,
    investment_cost: f64,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct SweepSummary {
    value: f64,
    init: &'static str,
    iterations: usize,
    converged_at: Option<usize>,
    full_loss: Option<f64>,
    investment_cost: f64,
}

impl SolveArgs {
    fn config(&self) -> SolverConfig<f64> {
        SolverConfig {
            step_size: self.alpha,
            decay: self.decay,
            batch_size: self.batch,
            max_iterations: self.iters,
            eval_every: self.eval_every,
            rel_tol: self.rel_tol,
            rng_seed: self.seed,
            ..Default::default()
        }
    }

    fn overlay(&self) -> Overlay {
        match self.objective {
            ObjectiveArg::Cost => {
                if self.carbon_weight != 0.0 {
                    log::warn!("--carbon-weight is ignored with --objective cost");
                }
                Overlay::default()
            }
            ObjectiveArg::Emissions => Overlay::with_carbon_weight(self.carbon_weight),
        }
    }

    fn study(&self) -> Result<Study> {
        let study = Study::load(&self.network, &self.timeseries, self.hours, self.days)
            .with_context(|| format!("loading {} and {}", self.network.display(), self.timeseries.display()))?;
        log::info!("{} of {} scenarios selected ({})", study.scenarios.len(), study.available, self.days);
        Ok(study)
    }

    fn init(&self) -> Result<Init<f64>> {
        Ok(match &self.warm_start {
            Some(p) => Init::Warm(load_checkpoint(p).with_context(|| format!("reading warm start {}", p.display()))?),
            None => Init::Cold,
        })
    }
}

fn progress(state: &PlanState64) -> ControlFlow<()> {
    if let Some(r) = state.loss_history.last() {
        log::info!("iteration {:>5}  full loss {:.6e}", r.iteration, r.loss);
    }
    ControlFlow::Continue(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn rows_for(case: &PlanningCase64, state: &PlanState64) -> Vec<PlanRow> {
    plan_rows(case, state.plan().as_slice(), state.last_gradient.as_ref().map(|g| g.delta.as_slice()))
}

fn solve(args: &SolveArgs) -> Result<()> {
    let study = args.study()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let started = Instant::now();
    let (case, state) = plan_study(&study, &args.overlay(), args.config(), args.init()?, StopRule::MaxIterations, &mut progress)?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint.json"));
    save_checkpoint(&state, &checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    write_loss_csv(create(&args.out.join("loss_history.csv"))?, &state.loss_history)?;
    write_plan_csv(create(&args.out.join("plan.csv"))?, &rows_for(&case, &state))?;
    let summary = Summary {
        scenarios: study.scenarios.len(),
        available_scenarios: study.available,
        iterations: state.iteration,
        converged_at: state.converged_at,
        best_full_loss: state.best_full_loss,
        investment_cost: investment_cost(state.plan().as_slice(), &case.costs, &case.bounds)?,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    serde_json::to_writer_pretty(create(&args.out.join("summary.json"))?, &summary)?;
    println!(
        "planned {} parameters over {} scenarios in {} iterations; best loss {:.6e}",
        case.parameter_count(),
        summary.scenarios,
        summary.iterations,
        summary.best_full_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = &args.solve;
    let study = base.study()?;
    fs::create_dir_all(&base.out).with_context(|| format!("creating {}", base.out.display()))?;
    let mut previous: Option<PlanState64> = None;
    let mut plans = Vec::new();
    let mut summary = Vec::new();
    for &value in &args.values {
        let mut overlay = base.overlay();
        let kind = match args.sweep_param {
            SweepParam::BatteryCostMult => Some(DeviceKind::Battery),
            SweepParam::GeneratorCostMult => Some(DeviceKind::Generator),
            SweepParam::TransportLineCostMult => Some(DeviceKind::TransportLine),
            SweepParam::CarbonWeight => None,
        };
        match kind {
            Some(k) => {
                overlay.cost_multipliers.insert(k, value);
            }
            None => overlay.carbon_weight = value,
        }
        let (init, label) = match (&previous, args.warm_chain) {
            (Some(p), true) => (Init::Warm(p.clone()), "warm"),
            _ => match base.init()? {
                Init::Cold => (Init::Cold, "cold"),
                warm => (warm, "warm"),
            },
        };
        let (case, state) = plan_study(&study, &overlay, base.config(), init, StopRule::MaxIterations, &mut progress)
            .with_context(|| format!("sweep value {value}"))?;
        println!(
            "value {value}: {label} start, converged at {:?}, best loss {:.6e}",
            state.converged_at,
            state.best_full_loss.unwrap_or(f64::NAN)
        );
        summary.push(SweepSummary {
            value,
            init: label,
            iterations: state.iteration,
            converged_at: state.converged_at,
            full_loss: state.best_full_loss,
            investment_cost: investment_cost(state.plan().as_slice(), &case.costs, &case.bounds)?,
        });
        plans.push((value, rows_for(&case, &state)));
        previous = Some(state);
    }
    write_sweep_plans_csv(create(&base.out.join("sweep_plans.csv"))?, &plans)?;
    let mut w = csv::Writer::from_writer(create(&base.out.join("sweep_summary.csv"))?);
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    if let Some(last) = previous {
        let checkpoint = base.checkpoint.clone().unwrap_or_else(|| base.out.join("checkpoint.json"));
        save_checkpoint(&last, &checkpoint)?;
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let store = match &args.data_root {
        Some(root) => {
            fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
            SessionStore::open(root).with_context(|| format!("opening sessions under {}", root.display()))?
        }
        None => SessionStore::in_memory(),
    };
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port).parse().context("bind address")?;
    let app = service::router(Arc::new(store));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn generate(args: &GenerateArgs) -> Result<()> {
    if args.nodes == 0 || args.days == 0 {
        bail!("--nodes and --days must be positive");
    }
    let sc: SyntheticCase<f64> = if args.tutorial {
        tutorial_case()
    } else {
        random_case(&SyntheticConfig {
            nodes: args.nodes,
            days: args.days,
            scenario_hours: args.hours,
            seed: args.seed,
            batteries: !args.no_batteries,
            drought_days: args.drought_days.clone(),
        })
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let network = args.out.join("network.json");
    sc.case.save(&network).with_context(|| format!("writing {}", network.display()))?;
    let table = args.out.join("timeseries.csv");
    fs::write(&table, sc.table.to_csv()).with_context(|| format!("writing {}", table.display()))?;
    println!(
        "wrote {} ({} parameters) and {} ({} hours)",
        network.display(),
        sc.case.parameter_count(),
        table.display(),
        sc.table.hours()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Solve(a) => solve(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Serve(a) => serve(&a),
        Command::Generate(a) => generate(&a),
    }
}
