use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scs_patrol::experiments::{
    self, CompareRequest, ExperimentError, ExperimentPlan, Metric, BROADCAST_HEADER,
    COMPARISON_HEADER, DMG_HEADER,
};
use scs_patrol::metrics::broadcast_stats;
use scs_patrol::motion::{self, MixingNorm};
use scs_patrol::sim::{self, Meeting, Record, Traversal};
use scs_patrol::{bounds, GridSpec, MeetingRule, SimConfig, Strategy, StrategyKind, Topology};

const OUT_ENV: &str = "SCS_PATROL_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "scs-patrol",
    version,
    about = "Randomized patrolling on synchronized grids of circles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and stream its events as JSON lines.
    Simulate(SimulateArgs),
    /// Run an experiment plan and write CSV results plus a manifest.
    Sweep(SweepArgs),
    /// Mean broadcast time of one team.
    Broadcast(BroadcastArgs),
    /// Export the motion graph transition matrix as CSV.
    Dmg(DmgArgs),
    /// Mixing time of the motion graph for one or more grids.
    Mixing(MixingArgs),
    /// Closed-form idle, meeting and broadcast values as one JSON object.
    Bounds(BoundsArgs),
    /// Join sweep results with the closed-form bounds.
    Compare(CompareArgs),
    /// Dump the walking graph as JSON.
    WalkingGraph(GridArgs),
}

#[derive(Debug, Clone, Args)]
struct GridArgs {
    #[arg(long, default_value_t = 10)]
    rows: usize,
    /// Defaults to `--rows`.
    #[arg(long)]
    cols: Option<usize>,
}

impl GridArgs {
    fn grid(&self) -> Result<GridSpec, CliError> {
        GridSpec::new(self.rows, self.cols.unwrap_or(self.rows)).map_err(config)
    }
}

#[derive(Debug, Clone, Args)]
struct StrategyArgs {
    /// deterministic, random or quasi-random.
    #[arg(long, default_value = "random")]
    strategy: String,
    /// Shift probability of the randomized strategies.
    #[arg(long, default_value_t = Strategy::DEFAULT_P)]
    p: f64,
    /// colocated or link-only.
    #[arg(long, default_value = "colocated")]
    meetings: String,
    /// Horizon in time units; defaults to 4n.
    #[arg(long)]
    duration: Option<u64>,
}

impl StrategyArgs {
    fn strategies(&self) -> Result<Vec<Strategy>, CliError> {
        let kinds: Vec<StrategyKind> = if self.strategy == "all" {
            StrategyKind::ALL.to_vec()
        } else {
            self.strategy
                .split(',')
                .map(|s| s.trim().parse().map_err(config))
                .collect::<Result<_, _>>()?
        };
        kinds
            .into_iter()
            .map(|k| Strategy::new(k, self.p).map_err(config))
            .collect()
    }

    fn strategy(&self) -> Result<Strategy, CliError> {
        match self.strategies()?.as_slice() {
            [s] => Ok(*s),
            _ => Err(CliError::Config("exactly one strategy expected".into())),
        }
    }

    fn meetings(&self) -> Result<MeetingRule, CliError> {
        self.meetings.parse().map_err(config)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long, short = 'k', default_value_t = 1)]
    robots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// JSON plan file; the other flags override its fields when given.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Comma-separated grid sizes such as `10,15x20`; defaults to `--rows`/`--cols`.
    #[arg(long)]
    grids: Option<String>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Comma-separated strategies or `all`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    /// Team sizes: `all`, a list `2,5,10` or an inclusive range `1..99`.
    #[arg(long)]
    robots: Option<String>,
    /// Comma-separated subset of idle, isolation, broadcast, mixing.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Broadcast trials per cell; defaults to n.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    meetings: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BroadcastArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long, short = 'k', default_value_t = 2)]
    robots: usize,
    /// Defaults to n.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = experiments::DEFAULT_BASE_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DmgArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MixingArgs {
    /// Comma-separated grid sizes; defaults to `--rows`/`--cols`.
    #[arg(long)]
    grids: Option<String>,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    /// spectral or frobenius.
    #[arg(long, default_value = "spectral")]
    norm: String,
    #[arg(long, default_value_t = 2_000)]
    t_max: usize,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    /// Motion graph size; defaults to rows × cols.
    #[arg(long, short = 'n')]
    n: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, short = 'k')]
    robots: usize,
    #[arg(long, default_value_t = bounds::GRID_DEGREE)]
    delta: f64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long, default_value_t = Strategy::DEFAULT_P)]
    p: f64,
    /// Team sizes as in `sweep`; defaults to every k present.
    #[arg(long)]
    robots: Option<String>,
    #[arg(long, default_value = "idle,isolation,broadcast")]
    metrics: String,
    #[arg(long, default_value_t = bounds::GRID_DEGREE)]
    delta: f64,
    /// Results directory to read.
    #[arg(long, env = OUT_ENV, default_value = "results")]
    out: PathBuf,
    /// Destination CSV; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn config<E: ToString>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime<E: ToString>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() {
            config(e)
        } else {
            runtime(e)
        }
    }
}

fn parse_grids(list: &str) -> Result<Vec<GridSpec>, CliError> {
    list.split(',')
        .map(|item| {
            let item = item.trim();
            let (r, c) = item.split_once('x').unwrap_or((item, item));
            let r = r
                .parse()
                .map_err(|_| config(format!("bad grid `{item}`")))?;
            let c = c
                .parse()
                .map_err(|_| config(format!("bad grid `{item}`")))?;
            GridSpec::new(r, c).map_err(config)
        })
        .collect()
}

/// `all`, `a..b` or `a..=b` (both inclusive), or a comma list.
fn parse_ks(text: &str) -> Result<Option<Vec<usize>>, CliError> {
    let text = text.trim();
    if text == "all" {
        return Ok(None);
    }
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| config(format!("bad team size `{s}`")))
    };
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(config(format!("empty range `{text}`")));
        }
        return Ok(Some((a..=b).collect()));
    }
    text.split(',')
        .map(num)
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn parse_metrics(list: &str) -> Result<Vec<Metric>, CliError> {
    if list == "all" {
        return Ok(Metric::ALL.to_vec());
    }
    list.split(',')
        .map(|m| m.trim().parse().map_err(config))
        .collect()
}

fn parse_norm(s: &str) -> Result<MixingNorm, CliError> {
    s.parse().map_err(config)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// A closed pipe on standard output (`| head`) is not a failure.
fn io_failure(e: io::Error) -> Result<(), CliError> {
    if e.kind() == io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(runtime(e))
    }
}

fn csv_failure(e: scs_patrol::experiments::CsvError) -> Result<(), CliError> {
    match e.into_kind() {
        scs_patrol::experiments::CsvErrorKind::Io(io) => io_failure(io),
        other => Err(runtime(format!("{other:?}"))),
    }
}

fn emit(text: &str) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").or_else(io_failure)
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let grid = args.grid.grid()?;
    let strategy = args.strategy.strategy()?;
    let mut cfg = SimConfig::new(grid, args.robots, strategy)
        .with_seed(args.seed)
        .with_meetings(args.strategy.meetings()?)
        .with_reps(1);
    if let Some(d) = args.strategy.duration {
        cfg = cfg.with_duration(d);
    }
    cfg.validate().map_err(config)?;
    let topo = Topology::new(grid);
    let mut out = open_out(args.out.as_deref())?;
    let mut failure = None;
    let mut last_tick = 0;
    sim::run_streaming(&topo, &cfg, |_, ev| {
        if failure.is_some() {
            return;
        }
        last_tick = ev.tick;
        let traversals = ev
            .traversals
            .iter()
            .map(|&arc| Record::Traversal(Traversal { tick: ev.tick, arc }));
        let meetings = ev.meetings.iter().map(|(v, r)| {
            Record::Meeting(Meeting {
                tick: ev.tick,
                vertex: *v,
                robots: r.clone(),
            })
        });
        for rec in traversals.chain(meetings) {
            if let Err(e) = sim::write_record(&mut out, &rec) {
                failure = Some(e);
                return;
            }
        }
    })
    .map_err(config)?;
    if let Some(e) = failure {
        return io_failure(e);
    }
    sim::write_record(
        &mut out,
        &Record::End {
            final_tick: last_tick,
        },
    )
    .and_then(|()| out.flush())
    .or_else(io_failure)
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut plan = match &args.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentPlan>(&text)
                .map_err(|e| config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentPlan::default(),
    };
    if let Some(g) = &args.grids {
        plan.grids = parse_grids(g)?;
    } else if let Some(r) = args.rows {
        plan.grids = vec![GridSpec::new(r, args.cols.unwrap_or(r)).map_err(config)?];
    }
    if args.strategy.is_some() || args.p.is_some() {
        let sa = StrategyArgs {
            strategy: args.strategy.clone().unwrap_or_else(|| "all".into()),
            p: args.p.unwrap_or(Strategy::DEFAULT_P),
            meetings: "colocated".into(),
            duration: None,
        };
        plan.strategies = sa.strategies()?;
    }
    if let Some(k) = &args.robots {
        plan.ks = parse_ks(k)?;
    }
    if let Some(m) = &args.metrics {
        plan.metrics = parse_metrics(m)?;
    }
    if let Some(r) = args.reps {
        plan.reps = r;
    }
    if args.trials.is_some() {
        plan.trials = args.trials;
    }
    if args.duration.is_some() {
        plan.duration = args.duration;
    }
    if let Some(s) = args.seed {
        plan.base_seed = s;
    }
    if let Some(j) = args.jobs {
        plan.jobs = j;
    }
    if let Some(m) = &args.meetings {
        plan.meetings = m.parse().map_err(config)?;
    }
    if let Some(e) = args.epsilon {
        plan.epsilon = e;
    }
    if let Some(n) = &args.norm {
        plan.mixing_norm = parse_norm(n)?;
    }
    if let Some(o) = args.out {
        plan.out_dir = o;
    }
    let res = experiments::run_plan(&plan)?;
    eprintln!(
        "wrote {} idle, {} isolation, {} broadcast and {} mixing rows to {}",
        res.idle.len(),
        res.isolation.len(),
        res.broadcast.len(),
        res.mixing.len(),
        plan.out_dir.display()
    );
    Ok(())
}

fn broadcast(args: BroadcastArgs) -> Result<(), CliError> {
    let grid = args.grid.grid()?;
    let strategy = args.strategy.strategy()?;
    let mut cfg =
        SimConfig::new(grid, args.robots, strategy).with_meetings(args.strategy.meetings()?);
    if let Some(d) = args.strategy.duration {
        cfg = cfg.with_duration(d);
    }
    cfg.validate().map_err(config)?;
    if args.robots < 2 {
        return Err(config("broadcast needs at least two robots"));
    }
    let trials = args.trials.unwrap_or(grid.circles());
    if trials == 0 {
        return Err(config("trials must be positive"));
    }
    let topo = Topology::new(grid);
    let mut times = Vec::with_capacity(trials);
    let mut incomplete = 0;
    for i in 0..trials {
        let seed = experiments::derive_seed(
            args.seed,
            &grid,
            args.robots,
            &strategy,
            "broadcast",
            i as u64,
        );
        let out =
            sim::run_broadcast(&topo, &cfg, &mut sim::rng_from_seed(seed)).map_err(runtime)?;
        incomplete += usize::from(!out.completed);
        times.push(out.time);
    }
    let s = broadcast_stats(&times, &grid, cfg.duration as f64, true).map_err(runtime)?;
    let row = experiments::BroadcastRow {
        grid: grid.label(),
        strategy: strategy.kind().name().into(),
        p: strategy.p(),
        k: args.robots,
        trials: s.trials,
        mean_broadcast: s.mean_broadcast,
        cap_hits: incomplete,
    };
    experiments::write_rows(io::stdout().lock(), &[row], &BROADCAST_HEADER).or_else(csv_failure)
}

fn dmg(args: DmgArgs) -> Result<(), CliError> {
    let topo = Topology::new(args.grid.grid()?);
    let rows = experiments::dmg_rows(&topo).map_err(runtime)?;
    let out = open_out(args.out.as_deref())?;
    experiments::write_rows(out, &rows, &DMG_HEADER).or_else(csv_failure)
}

fn mixing(args: MixingArgs) -> Result<(), CliError> {
    let grids = match &args.grids {
        Some(g) => parse_grids(g)?,
        None => vec![args.grid.grid()?],
    };
    let norm = parse_norm(&args.norm)?;
    if args.epsilon.is_nan() || args.epsilon <= 0.0 || args.t_max == 0 {
        return Err(config("epsilon and t_max must be positive"));
    }
    if let Some(j) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(config)?;
    }
    let mut stdout = io::stdout().lock();
    if let Err(e) = writeln!(stdout, "n,t_mix,epsilon") {
        return io_failure(e);
    }
    for grid in grids {
        let topo = Topology::new(grid);
        let row =
            experiments::mixing_row(&topo, args.epsilon, args.t_max, norm).map_err(
                |e| match e {
                    motion::MotionError::NoConvergence { .. } => {
                        runtime(format!("{}: {e}", grid.label()))
                    }
                    other => runtime(other),
                },
            )?;
        if let Err(e) = writeln!(stdout, "{},{},{}", row.n, row.t_mix, row.epsilon)
            .and_then(|()| stdout.flush())
        {
            return io_failure(e);
        }
    }
    Ok(())
}

fn bounds_cmd(args: BoundsArgs) -> Result<(), CliError> {
    let n = match args.n {
        Some(n) => n,
        None => args.grid.grid()?.circles(),
    };
    let report = bounds::report(n, args.robots, args.delta).map_err(config)?;
    emit(&serde_json::to_string(&report).map_err(runtime)?)
}

fn compare(args: CompareArgs) -> Result<(), CliError> {
    let kind: StrategyKind = args.strategy.parse().map_err(config)?;
    let req = CompareRequest {
        grid: args.grid.grid()?,
        strategy: Strategy::new(kind, args.p).map_err(config)?,
        ks: match &args.robots {
            Some(k) => parse_ks(k)?,
            None => None,
        },
        metrics: parse_metrics(&args.metrics)?,
        delta: args.delta,
    };
    let rows = experiments::compare_with_theory(&args.out, &req)?;
    let out = open_out(args.output.as_deref())?;
    experiments::write_rows(out, &rows, &COMPARISON_HEADER).or_else(csv_failure)
}

fn walking_graph(args: GridArgs) -> Result<(), CliError> {
    let topo = Topology::new(args.grid()?);
    let g = topo.walking_graph();
    let doc = serde_json::json!({
        "grid": topo.grid().label(),
        "vertex_count": g.vertex_count(),
        "formula_vertex_count": g.formula_vertex_count(),
        "arc_count": g.arc_count(),
        "graph": g,
    });
    emit(&serde_json::to_string_pretty(&doc).map_err(runtime)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Broadcast(a) => broadcast(a),
        Command::Dmg(a) => dmg(a),
        Command::Mixing(a) => mixing(a),
        Command::Bounds(a) => bounds_cmd(a),
        Command::Compare(a) => compare(a),
        Command::WalkingGraph(a) => walking_graph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Config(msg) | CliError::Runtime(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
