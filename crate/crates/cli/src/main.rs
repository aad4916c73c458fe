use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asc_core::costmap::{
    feasibility_region, penalty_free_mask, safe_velocity_boundary, solve_map, CostMap, SafeBoundary, DEFAULT_THRESHOLD,
};
use asc_core::driver::{
    default_demand_values, DriverModel, DEFAULT_BRAKE_DISTANCE, DEFAULT_DEMAND_POINTS, DEFAULT_EXPERT_SHARPNESS,
    DEFAULT_NAUGHTY_SHARPNESS,
};
use asc_core::dynamics::{ControlGrid, DynamicsParams, StateGrid};
use asc_core::sim::{run_batch, DemandSource, EpisodeConfig, World, DEFAULT_ALPHA};
use asc_core::solver::{
    CostSpec, EvalOptions, PolicyIterationOptions, TerminalSpec, DEFAULT_BETA, DEFAULT_EVAL_TOL, DEFAULT_MAX_SWEEPS,
    DEFAULT_MEAN_REL_TOL,
};
use asc_core::supervisor::{JoystickCommand, DEFAULT_W_MAX};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

const EXIT_COMPUTE: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "asc", version, about = "Assist-as-needed shared control: maps, boundaries, simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an expected-time-to-stop map by policy iteration.
    Solve(SolveArgs),
    /// Extract the safe-velocity boundary from solved maps.
    Boundary(BoundaryArgs),
    /// Run seeded closed-loop episodes.
    Simulate(SimulateArgs),
    /// Penalized completion time t + alpha * collisions.
    Score(ScoreArgs),
    /// Serve live sessions over WebSocket.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DriverArg {
    Blind,
    Expert,
    Naughty,
    Custom,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum CostArg {
    Plain,
    Penalized,
}

#[derive(Args, Clone, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "blind")]
    driver: DriverArg,
    /// Model sharpness; defaults per model.
    #[arg(long)]
    sharpness: Option<f64>,
    /// Expert braking distance (m).
    #[arg(long, default_value_t = DEFAULT_BRAKE_DISTANCE)]
    d_brake: f64,
    /// JSON file with `demand_values` and per-node `pmf` rows (custom driver).
    #[arg(long)]
    custom: Option<PathBuf>,
    #[arg(long, default_value_t = 57)]
    nx: usize,
    #[arg(long, default_value_t = 55)]
    nv: usize,
    #[arg(long, default_value_t = DEFAULT_DEMAND_POINTS)]
    nd: usize,
    /// JSON file overriding the dynamics parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "plain")]
    cost: CostArg,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 23)]
    nu: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_TOL)]
    eval_tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_SWEEPS)]
    max_sweeps: usize,
    #[arg(long, default_value_t = DEFAULT_MEAN_REL_TOL)]
    mean_rel_tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundaryArgs {
    /// Map solved with the plain cost.
    #[arg(long)]
    map: PathBuf,
    /// Map solved with the penalized cost; sets the operating region.
    #[arg(long)]
    penalized: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Explicit feasibility cutoff instead of the two-means split.
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SourceArg {
    Model,
    Constant,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `constant` drives with --vd/--wd instead of the driver model.
    #[arg(long, value_enum, default_value = "model")]
    source: SourceArg,
    #[arg(long, default_value_t = 0.54, allow_negative_numbers = true)]
    vd: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    wd: f64,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enable the supervisor.
    #[arg(long)]
    asc: bool,
    #[arg(long)]
    boundary: Option<PathBuf>,
    /// Plain map to derive the boundary from when --boundary is absent.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    penalized: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// World JSON; defaults to a straight approach with --gap metres free.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    gap: f64,
    #[arg(long, default_value_t = 20.0)]
    t_limit: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_W_MAX)]
    w_max: f64,
    /// Directory for per-episode NDJSON traces.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Aggregate summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, allow_negative_numbers = true)]
    t: f64,
    #[arg(long, allow_negative_numbers = true)]
    collisions: i64,
    #[arg(long, default_value_t = DEFAULT_ALPHA, allow_negative_numbers = true)]
    alpha: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    boundary: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

enum Failure {
    Usage(String),
    Compute(String),
}

impl From<asc_core::Error> for Failure {
    fn from(e: asc_core::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_params(path: Option<&Path>) -> Result<DynamicsParams<f64>, Failure> {
    let params = match path {
        None => DynamicsParams::default(),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    Ok(params)
}

struct Built {
    params: DynamicsParams<f64>,
    grid: StateGrid<f64>,
    model: DriverModel<f64>,
}

fn build_model(args: &ModelArgs) -> Result<Built, Failure> {
    let params = load_params(args.params.as_deref())?;
    let grid = StateGrid::uniform(&params, args.nx, args.nv).map_err(|e| usage(e.to_string()))?;
    let demand = default_demand_values(&params, args.nd);
    let bad = |e: asc_core::Error| usage(e.to_string());
    let model = match args.driver {
        DriverArg::Blind => DriverModel::blind(&grid, demand).map_err(bad)?,
        DriverArg::Naughty => {
            DriverModel::naughty_child(&grid, demand, args.sharpness.unwrap_or(DEFAULT_NAUGHTY_SHARPNESS)).map_err(bad)?
        }
        DriverArg::Expert => DriverModel::expert(
            &grid,
            demand,
            args.sharpness.unwrap_or(DEFAULT_EXPERT_SHARPNESS),
            args.d_brake,
        )
        .map_err(bad)?,
        DriverArg::Custom => {
            let path = args.custom.as_ref().ok_or_else(|| usage("--driver custom needs --custom <file>"))?;
            DriverModel::load_custom(&grid, path)?
        }
    };
    Ok(Built { params, grid, model })
}

fn cmd_solve(a: SolveArgs) -> Outcome {
    let Built { params, grid, model } = build_model(&a.model)?;
    let controls = ControlGrid::uniform(&params, a.nu).map_err(|e| usage(e.to_string()))?;
    let cost = match a.cost {
        CostArg::Plain => CostSpec::plain(),
        CostArg::Penalized => CostSpec::penalized(a.beta),
    };
    cost.validate().map_err(|e| usage(e.to_string()))?;
    let opts = PolicyIterationOptions {
        eval: EvalOptions { tol: a.eval_tol, max_sweeps: a.max_sweeps },
        mean_rel_tol: a.mean_rel_tol,
        max_iterations: a.max_iterations,
    };
    let map = solve_map(&grid, &controls, &model, &params, cost, TerminalSpec::one_cell(&grid), opts)?;
    map.save(&a.out)?;
    let mut out = std::io::stdout().lock();
    for (k, m) in map.trace.mean_j.iter().enumerate() {
        writeln!(out, "iteration {k} mean_J {m:.9} changes {}", map.trace.policy_changes[k])?;
    }
    let converged = map.solver.as_ref().is_some_and(|s| s.converged);
    if converged {
        Ok(())
    } else {
        Err(Failure::Compute("policy iteration did not converge".into()))
    }
}

fn boundary_from_maps(map: &Path, penalized: Option<&Path>, threshold: f64, cutoff: Option<f64>) -> Result<SafeBoundary<f64>, Failure> {
    let plain = CostMap::<f64>::load(map)?;
    let mask = match penalized {
        Some(p) => {
            let pen = CostMap::<f64>::load(p)?;
            if pen.grid != plain.grid || pen.params != plain.params {
                return Err(Failure::Compute("plain and penalized maps use different grids or dynamics".into()));
            }
            feasibility_region(&pen, cutoff)?
        }
        None => penalty_free_mask(&plain),
    };
    Ok(safe_velocity_boundary(&plain, &mask, threshold)?)
}

fn cmd_boundary(a: BoundaryArgs) -> Outcome {
    if !(a.threshold > 0.0) {
        return Err(usage("--threshold must be positive"));
    }
    let b = boundary_from_maps(&a.map, a.penalized.as_deref(), a.threshold, a.cutoff)?;
    b.save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeLine {
    episode: usize,
    t_d: f64,
    c_d: u32,
    score: f64,
    completed: bool,
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    if a.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    if !(a.t_limit > 0.0 && a.alpha > 0.0 && a.w_max > 0.0 && a.gap > 0.0) {
        return Err(usage("--t-limit, --alpha, --w-max and --gap must be positive"));
    }
    let built = build_model(&a.model)?;
    let params = built.params;
    let boundary = match (a.asc, &a.boundary, &a.map) {
        (false, _, _) => None,
        (true, Some(b), _) => Some(SafeBoundary::<f64>::load(b)?),
        (true, None, Some(m)) => Some(boundary_from_maps(m, a.penalized.as_deref(), a.threshold, None)?),
        (true, None, None) => return Err(usage("--asc needs --boundary or --map")),
    };
    let world = match &a.world {
        Some(p) => World::load(p)?,
        None => World::straight_approach(&params, a.gap),
    };
    let cfg = EpisodeConfig { params, w_max: a.w_max, t_limit: a.t_limit, alpha: a.alpha, ..Default::default() };
    let source = match a.source {
        SourceArg::Model => DemandSource::Model { model: &built.model, grid: &built.grid },
        SourceArg::Constant => DemandSource::Constant(JoystickCommand::new(a.vd, a.wd)),
    };
    let runs = run_batch(&world, &source, boundary.as_ref(), &cfg, a.seed, a.episodes)?;

    if let Some(dir) = &a.log_dir {
        std::fs::create_dir_all(dir)?;
        for (i, r) in runs.iter().enumerate() {
            let f = std::fs::File::create(dir.join(format!("episode_{i:04}.ndjson")))?;
            r.write_ndjson(std::io::BufWriter::new(f))?;
        }
    }

    let mut out = std::io::stdout().lock();
    for (i, r) in runs.iter().enumerate() {
        let s = r.summary;
        let line = EpisodeLine { episode: i, t_d: s.t_d, c_d: s.c_d, score: s.score, completed: s.completed };
        writeln!(out, "{}", serde_json::to_string(&line).unwrap())?;
    }
    let n = runs.len() as f64;
    let c_d: u32 = runs.iter().map(|r| r.summary.c_d).sum();
    let summary = json!({
        "episodes": runs.len(),
        "t_d": runs.iter().map(|r| r.summary.t_d).sum::<f64>() / n,
        "c_d": c_d,
        "score": runs.iter().map(|r| r.summary.score).sum::<f64>() / n,
        "episodes_with_collision": runs.iter().filter(|r| r.summary.c_d > 0).count(),
        "completed": runs.iter().filter(|r| r.summary.completed).count(),
        "config": {
            "model": a.model,
            "source": a.source,
            "vd": a.vd,
            "wd": a.wd,
            "seed": a.seed,
            "asc": a.asc,
            "threshold": a.threshold,
            "gap": a.gap,
            "world": a.world,
            "episode": cfg,
        },
    });
    let text = serde_json::to_string(&summary).unwrap();
    writeln!(out, "{text}")?;
    if let Some(p) = &a.out {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Outcome {
    if !(a.t >= 0.0) || a.collisions < 0 || !(a.alpha > 0.0) {
        return Err(usage("need --t >= 0, --collisions >= 0 and --alpha > 0"));
    }
    let c = u32::try_from(a.collisions).map_err(|_| usage("--collisions too large"))?;
    println!("{}", asc_core::sim::score(a.t, c, a.alpha));
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Outcome {
    let map = CostMap::<f64>::load(&a.map)?;
    let boundary = SafeBoundary::<f64>::load(&a.boundary)?;
    let world = World::load(&a.world)?;
    let cfg = asc_service::SessionConfig::new(world, boundary)?;
    cfg.check_params(&map.params)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on ws://{}/ws", listener.local_addr()?);
        asc_service::serve(listener, cfg).await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Command::Solve(a) => cmd_solve(a),
        Command::Boundary(a) => cmd_boundary(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Score(a) => cmd_score(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Compute(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_COMPUTE)
        }
    }
}
