//! Sweeps over grids, strategies and team sizes, with derived seeds and CSV
//! persistence.
//!
//! Every random stream is seeded by [`derive_seed`], a hash of the cell
//! coordinates, so results do not depend on scheduling or plan order. Rows
//! are sorted before they are written and files are rewritten after every
//! grid, which keeps finished grids on disk if a later one fails.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::{self, BoundsError};
use crate::metrics::{broadcast_stats, GapTracker, IdleSummary, IsolationSummary, MetricsError};
use crate::motion::{self, MixingNorm, MotionError};
use crate::sim::{
    rng_from_seed, run_broadcast, run_streaming, MeetingRule, SimConfig, SimError, Strategy,
};
use crate::topology::{GridSpec, Topology};

pub use csv::{Error as CsvError, ErrorKind as CsvErrorKind};

/// Base seed of the committed reference results.
pub const DEFAULT_BASE_SEED: u64 = 20_170_515;

pub const IDLE_FILE: &str = "idle.csv";
pub const ISOLATION_FILE: &str = "isolation.csv";
pub const BROADCAST_FILE: &str = "broadcast.csv";
pub const MIXING_FILE: &str = "mixing.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

const SEED_SCHEME: &str = "first 8 bytes (little endian) of SHA-256 over \
    `scs-patrol|<domain>|<base>|<rows>x<cols>|<k>|<strategy>|<p>|<index>`, \
    domain `walk` for repetition runs and `broadcast` for broadcast trials";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{} cell(s) failed: {}", .0.len(), .0.join("; "))]
    CellFailures(Vec<String>),
    #[error("no {metric} result for grid {grid}, {strategy} p={p}, k={k}")]
    MissingCell {
        metric: Metric,
        grid: String,
        strategy: String,
        p: f64,
        k: usize,
    },
}

impl ExperimentError {
    /// Whether the error comes from the configuration rather than a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ExperimentError::InvalidPlan(_)
                | ExperimentError::Sim(_)
                | ExperimentError::Bounds(_)
                | ExperimentError::MissingCell { .. }
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Idle,
    Isolation,
    Broadcast,
    Mixing,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Idle,
        Metric::Isolation,
        Metric::Broadcast,
        Metric::Mixing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Idle => "idle",
            Metric::Isolation => "isolation",
            Metric::Broadcast => "broadcast",
            Metric::Mixing => "mixing",
        }
    }

    /// Smallest team the metric is defined for.
    pub fn min_robots(self) -> usize {
        match self {
            Metric::Isolation | Metric::Broadcast => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExperimentError::InvalidPlan(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub grids: Vec<GridSpec>,
    pub strategies: Vec<Strategy>,
    /// Team sizes; `None` sweeps `1..n` (from 2 for pairwise metrics).
    pub ks: Option<Vec<usize>>,
    pub metrics: Vec<Metric>,
    pub reps: usize,
    /// Broadcast trials per cell; `None` uses one per circle.
    pub trials: Option<usize>,
    /// Horizon in time units; `None` uses `4n`.
    pub duration: Option<u64>,
    pub base_seed: u64,
    pub meetings: MeetingRule,
    pub epsilon: f64,
    pub mixing_norm: MixingNorm,
    pub mixing_t_max: usize,
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            grids: vec![GridSpec::square(10).expect("non-empty grid")],
            strategies: vec![
                Strategy::random(),
                Strategy::quasi_random(),
                Strategy::deterministic(),
            ],
            ks: None,
            metrics: vec![Metric::Idle],
            reps: SimConfig::DEFAULT_REPS,
            trials: None,
            duration: None,
            base_seed: DEFAULT_BASE_SEED,
            meetings: MeetingRule::default(),
            epsilon: 0.25,
            mixing_norm: MixingNorm::default(),
            mixing_t_max: 2_000,
            jobs: 0,
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidPlan(m));
        if self.grids.is_empty() {
            return bad("no grids".into());
        }
        if self.metrics.is_empty() {
            return bad("no metrics".into());
        }
        let walks = self.metrics.iter().any(|&m| m != Metric::Mixing);
        if walks && self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if self.trials == Some(0) {
            return bad("broadcast trials must be positive".into());
        }
        if self.duration == Some(0) {
            return bad("duration must be positive".into());
        }
        if self.metrics.contains(&Metric::Mixing)
            && (self.epsilon.is_nan() || self.epsilon <= 0.0 || self.mixing_t_max == 0)
        {
            return bad(format!(
                "mixing needs epsilon > 0 and t_max > 0, got {} and {}",
                self.epsilon, self.mixing_t_max
            ));
        }
        for s in &self.strategies {
            Strategy::new(s.kind(), s.p())?;
        }
        if let Some(ks) = &self.ks {
            if ks.is_empty() {
                return bad("empty k list".into());
            }
            for g in &self.grids {
                for &k in ks {
                    if k == 0 || k > g.circles() {
                        return bad(format!(
                            "k = {k} is outside 1..={} on grid {}",
                            g.circles(),
                            g.label()
                        ));
                    }
                }
                let pairwise = self.metrics.iter().any(|m| m.min_robots() == 2);
                let only_pairwise = self.metrics.iter().all(|m| m.min_robots() == 2);
                if pairwise && only_pairwise && ks.iter().all(|&k| k < 2) {
                    return bad("isolation and broadcast need k >= 2".into());
                }
            }
        }
        Ok(())
    }

    /// Team sizes of `metric` on `grid`. Single robots are skipped for the
    /// pairwise metrics.
    pub fn ks_for(&self, grid: &GridSpec, metric: Metric) -> Vec<usize> {
        let n = grid.circles();
        let mut ks = match &self.ks {
            Some(ks) => ks.clone(),
            None => (1..n.max(2)).collect(),
        };
        ks.retain(|&k| k >= metric.min_robots() && k <= n);
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn duration_for(&self, grid: &GridSpec) -> u64 {
        self.duration.unwrap_or_else(|| grid.default_duration())
    }

    pub fn trials_for(&self, grid: &GridSpec) -> usize {
        self.trials.unwrap_or_else(|| grid.circles())
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }
}

/// Seed of run `index` in a cell; a pure function of its coordinates.
pub fn derive_seed(
    base: u64,
    grid: &GridSpec,
    k: usize,
    strategy: &Strategy,
    domain: &str,
    index: u64,
) -> u64 {
    let key = format!(
        "scs-patrol|{domain}|{base}|{}|{k}|{}|{:?}|{index}",
        grid.label(),
        strategy.kind().name(),
        strategy.p()
    );
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleRow {
    pub grid: String,
    pub strategy: String,
    pub p: f64,
    pub k: usize,
    pub reps: usize,
    pub max_idle: f64,
    pub avg_idle: f64,
    pub min_idle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationRow {
    pub grid: String,
    pub strategy: String,
    pub p: f64,
    pub k: usize,
    pub reps: usize,
    pub max_isolation: f64,
    pub avg_isolation: f64,
    pub min_isolation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRow {
    pub grid: String,
    pub strategy: String,
    pub p: f64,
    pub k: usize,
    pub trials: usize,
    pub mean_broadcast: f64,
    pub cap_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub grid: String,
    pub n: usize,
    pub epsilon: f64,
    pub t_mix: usize,
}

/// Sort key shared by all per-cell files.
type CellKey = (usize, usize, crate::sim::StrategyKind, u64, usize);

fn cell_key(grid: &GridSpec, s: &Strategy, k: usize) -> CellKey {
    (grid.rows(), grid.cols(), s.kind(), s.p().to_bits(), k)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanResults {
    pub idle: BTreeMap<CellKey, IdleRow>,
    pub isolation: BTreeMap<CellKey, IsolationRow>,
    pub broadcast: BTreeMap<CellKey, BroadcastRow>,
    pub mixing: BTreeMap<(usize, usize), MixingRow>,
}

impl PlanResults {
    pub fn idle_rows(&self) -> Vec<IdleRow> {
        self.idle.values().cloned().collect()
    }

    pub fn isolation_rows(&self) -> Vec<IsolationRow> {
        self.isolation.values().cloned().collect()
    }

    pub fn broadcast_rows(&self) -> Vec<BroadcastRow> {
        self.broadcast.values().cloned().collect()
    }

    pub fn mixing_rows(&self) -> Vec<MixingRow> {
        self.mixing.values().cloned().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct ManifestCell {
    grid: String,
    strategy: String,
    p: f64,
    k: usize,
    metrics: Vec<Metric>,
    duration: u64,
    seeds: Vec<u64>,
    broadcast_trials: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    rng: &'static str,
    seed_scheme: &'static str,
    plan: &'a ExperimentPlan,
    completed_grids: Vec<String>,
    cells: &'a [ManifestCell],
    wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
struct Cell {
    grid: GridSpec,
    strategy: Strategy,
    k: usize,
    walk: bool,
    isolation: bool,
    idle: bool,
    broadcast: bool,
}

enum CellOutput {
    Walk(Option<IdleRow>, Option<IsolationRow>),
    Broadcast(BroadcastRow),
}

fn cells_for(plan: &ExperimentPlan, grid: &GridSpec) -> Vec<Cell> {
    let mut by_k: BTreeMap<(usize, usize), Cell> = BTreeMap::new();
    for (si, s) in plan.strategies.iter().enumerate() {
        for metric in [Metric::Idle, Metric::Isolation, Metric::Broadcast] {
            if !plan.wants(metric) {
                continue;
            }
            for k in plan.ks_for(grid, metric) {
                let cell = by_k.entry((si, k)).or_insert(Cell {
                    grid: *grid,
                    strategy: *s,
                    k,
                    walk: false,
                    isolation: false,
                    idle: false,
                    broadcast: false,
                });
                match metric {
                    Metric::Idle => cell.idle = true,
                    Metric::Isolation => cell.isolation = true,
                    _ => cell.broadcast = true,
                }
                cell.walk = cell.idle || cell.isolation;
            }
        }
    }
    by_k.into_values().collect()
}

/// Idle and isolation of one cell from the same repetitions, without
/// keeping logs. Exclusive strategies are checked for one robot per circle
/// at every tick.
fn run_walk_cell(
    topo: &Topology,
    plan: &ExperimentPlan,
    cell: &Cell,
    seeds: &[u64],
) -> Result<(Option<IdleRow>, Option<IsolationRow>), String> {
    let duration = plan.duration_for(&cell.grid);
    let arcs = topo.walking_graph().arc_count();
    let exclusive = cell.strategy.keeps_circles_exclusive();
    let mut idle_logs = Vec::with_capacity(seeds.len());
    let mut iso_logs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let config = SimConfig::new(cell.grid, cell.k, cell.strategy)
            .with_duration(duration)
            .with_meetings(plan.meetings)
            .with_seed(seed);
        let mut arc_gaps = GapTracker::new(arcs);
        let mut robot_gaps = GapTracker::new(cell.k);
        let mut occupied = vec![false; topo.circles()];
        let mut violation = None;
        run_streaming(topo, &config, |state, ev| {
            for a in &ev.traversals {
                arc_gaps.observe(a.0, ev.tick);
            }
            for (_, group) in &ev.meetings {
                for &r in group {
                    robot_gaps.observe(r, ev.tick);
                }
            }
            if exclusive && violation.is_none() {
                occupied.iter_mut().for_each(|o| *o = false);
                for c in &state.assignment {
                    if std::mem::replace(&mut occupied[c.0], true) {
                        violation = Some(state.tick);
                    }
                }
            }
        })
        .map_err(|e| e.to_string())?;
        if let Some(tick) = violation {
            return Err(format!(
                "two robots share a circle at tick {tick} (seed {seed})"
            ));
        }
        idle_logs.push(arc_gaps.gaps(duration as f64));
        iso_logs.push(robot_gaps.gaps(duration as f64));
    }
    let grid = cell.grid.label();
    let strategy = cell.strategy.kind().name().to_string();
    let idle = if cell.idle {
        let s = IdleSummary::from_per_log(&idle_logs).map_err(|e| e.to_string())?;
        Some(IdleRow {
            grid: grid.clone(),
            strategy: strategy.clone(),
            p: cell.strategy.p(),
            k: cell.k,
            reps: s.reps,
            max_idle: s.max_idle,
            avg_idle: s.avg_idle,
            min_idle: s.min_idle,
        })
    } else {
        None
    };
    let isolation = if cell.isolation && cell.k >= 2 {
        let s = IsolationSummary::from_per_log(&iso_logs).map_err(|e| e.to_string())?;
        Some(IsolationRow {
            grid,
            strategy,
            p: cell.strategy.p(),
            k: cell.k,
            reps: s.reps,
            max_isolation: s.max_isolation,
            avg_isolation: s.avg_isolation,
            min_isolation: s.min_isolation,
        })
    } else {
        None
    };
    Ok((idle, isolation))
}

fn run_broadcast_cell(
    topo: &Topology,
    plan: &ExperimentPlan,
    cell: &Cell,
) -> Result<BroadcastRow, String> {
    let duration = plan.duration_for(&cell.grid);
    let trials = plan.trials_for(&cell.grid);
    let config = SimConfig::new(cell.grid, cell.k, cell.strategy)
        .with_duration(duration)
        .with_meetings(plan.meetings);
    let mut times = Vec::with_capacity(trials);
    let mut incomplete = 0;
    for i in 0..trials {
        let seed = derive_seed(
            plan.base_seed,
            &cell.grid,
            cell.k,
            &cell.strategy,
            "broadcast",
            i as u64,
        );
        let out =
            run_broadcast(topo, &config, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
        incomplete += usize::from(!out.completed);
        times.push(out.time);
    }
    let s =
        broadcast_stats(&times, &cell.grid, duration as f64, true).map_err(|e| e.to_string())?;
    Ok(BroadcastRow {
        grid: cell.grid.label(),
        strategy: cell.strategy.kind().name().to_string(),
        p: cell.strategy.p(),
        k: cell.k,
        trials: s.trials,
        mean_broadcast: s.mean_broadcast,
        cap_hits: incomplete,
    })
}

fn run_cell(
    topo: &Topology,
    plan: &ExperimentPlan,
    cell: &Cell,
    seeds: &[u64],
) -> Result<Vec<CellOutput>, String> {
    let mut out = Vec::new();
    if cell.walk {
        let (idle, iso) = run_walk_cell(topo, plan, cell, seeds)?;
        out.push(CellOutput::Walk(idle, iso));
    }
    if cell.broadcast {
        out.push(CellOutput::Broadcast(run_broadcast_cell(topo, plan, cell)?));
    }
    Ok(out)
}

/// Writes a header line and then one line per row.
pub fn write_rows<W: io::Write, T: Serialize>(
    w: W,
    rows: &[T],
    header: &[&str],
) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes rows under `header`, replacing the file.
pub fn write_csv<T: Serialize>(
    path: &Path,
    rows: &[T],
    header: &[&str],
) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("csv.tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    write_rows(io::BufWriter::new(file), rows, header).map_err(csv_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

pub const IDLE_HEADER: [&str; 8] = [
    "grid", "strategy", "p", "k", "reps", "max_idle", "avg_idle", "min_idle",
];
pub const ISOLATION_HEADER: [&str; 8] = [
    "grid",
    "strategy",
    "p",
    "k",
    "reps",
    "max_isolation",
    "avg_isolation",
    "min_isolation",
];
pub const BROADCAST_HEADER: [&str; 7] = [
    "grid",
    "strategy",
    "p",
    "k",
    "trials",
    "mean_broadcast",
    "cap_hits",
];
pub const MIXING_HEADER: [&str; 4] = ["grid", "n", "epsilon", "t_mix"];

fn write_results(plan: &ExperimentPlan, res: &PlanResults) -> Result<(), ExperimentError> {
    let dir = &plan.out_dir;
    if plan.wants(Metric::Idle) {
        write_csv(&dir.join(IDLE_FILE), &res.idle_rows(), &IDLE_HEADER)?;
    }
    if plan.wants(Metric::Isolation) {
        write_csv(
            &dir.join(ISOLATION_FILE),
            &res.isolation_rows(),
            &ISOLATION_HEADER,
        )?;
    }
    if plan.wants(Metric::Broadcast) {
        write_csv(
            &dir.join(BROADCAST_FILE),
            &res.broadcast_rows(),
            &BROADCAST_HEADER,
        )?;
    }
    if plan.wants(Metric::Mixing) {
        write_csv(&dir.join(MIXING_FILE), &res.mixing_rows(), &MIXING_HEADER)?;
    }
    Ok(())
}

fn write_manifest(
    plan: &ExperimentPlan,
    cells: &[ManifestCell],
    done: &[GridSpec],
    started: Instant,
) -> Result<(), ExperimentError> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        rng: "ChaCha8 (rand_chacha 0.3) seeded with seed_from_u64",
        seed_scheme: SEED_SCHEME,
        plan,
        completed_grids: done.iter().map(|g| g.label()).collect(),
        cells,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let path = plan.out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

/// Runs every cell of `plan`, writing CSVs and the manifest into its output
/// directory. Failed cells are reported together once all others finish.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanResults, ExperimentError> {
    plan.validate()?;
    fs::create_dir_all(&plan.out_dir).map_err(io_err(&plan.out_dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .map_err(|e| ExperimentError::InvalidPlan(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let mut res = PlanResults::default();
    let mut manifest_cells = Vec::new();
    let mut failures = Vec::new();
    let mut done = Vec::new();

    for grid in &plan.grids {
        let topo = Topology::new(*grid);
        let cells = cells_for(plan, grid);
        let seeded: Vec<(Cell, Vec<u64>)> = cells
            .into_iter()
            .map(|c| {
                let seeds = if c.walk {
                    (0..plan.reps as u64)
                        .map(|i| derive_seed(plan.base_seed, grid, c.k, &c.strategy, "walk", i))
                        .collect()
                } else {
                    Vec::new()
                };
                (c, seeds)
            })
            .collect();
        let outputs: Vec<Result<Vec<CellOutput>, String>> = pool.install(|| {
            seeded
                .par_iter()
                .map(|(c, seeds)| {
                    panic::catch_unwind(AssertUnwindSafe(|| run_cell(&topo, plan, c, seeds)))
                        .unwrap_or_else(|p| Err(panic_message(p)))
                })
                .collect()
        });
        for ((cell, seeds), out) in seeded.into_iter().zip(outputs) {
            let key = cell_key(grid, &cell.strategy, cell.k);
            manifest_cells.push(ManifestCell {
                grid: grid.label(),
                strategy: cell.strategy.kind().name().to_string(),
                p: cell.strategy.p(),
                k: cell.k,
                metrics: [
                    (cell.idle, Metric::Idle),
                    (cell.isolation && cell.k >= 2, Metric::Isolation),
                    (cell.broadcast, Metric::Broadcast),
                ]
                .into_iter()
                .filter_map(|(on, m)| on.then_some(m))
                .collect(),
                duration: plan.duration_for(grid),
                seeds,
                broadcast_trials: cell.broadcast.then(|| plan.trials_for(grid)),
            });
            match out {
                Ok(items) => {
                    for item in items {
                        match item {
                            CellOutput::Walk(idle, iso) => {
                                if let Some(r) = idle {
                                    res.idle.insert(key, r);
                                }
                                if let Some(r) = iso {
                                    res.isolation.insert(key, r);
                                }
                            }
                            CellOutput::Broadcast(r) => {
                                res.broadcast.insert(key, r);
                            }
                        }
                    }
                }
                Err(e) => failures.push(format!(
                    "{} {} p={} k={}: {e}",
                    grid.label(),
                    cell.strategy.kind(),
                    cell.strategy.p(),
                    cell.k
                )),
            }
        }
        if plan.wants(Metric::Mixing) {
            match pool
                .install(|| mixing_row(&topo, plan.epsilon, plan.mixing_t_max, plan.mixing_norm))
            {
                Ok(row) => {
                    res.mixing.insert((grid.rows(), grid.cols()), row);
                }
                Err(e) => failures.push(format!("{} mixing: {e}", grid.label())),
            }
        }
        done.push(*grid);
        write_results(plan, &res)?;
        write_manifest(plan, &manifest_cells, &done, started)?;
    }
    if failures.is_empty() {
        Ok(res)
    } else {
        Err(ExperimentError::CellFailures(failures))
    }
}

/// Mixing time of a grid's motion graph.
pub fn mixing_row(
    topo: &Topology,
    epsilon: f64,
    t_max: usize,
    norm: MixingNorm,
) -> Result<MixingRow, MotionError> {
    let (_, m) = motion::build_motion_graph(topo)?;
    let t_mix = motion::mixing_time_with(&m, epsilon, t_max, norm)?;
    Ok(MixingRow {
        grid: topo.grid().label(),
        n: topo.circles(),
        epsilon,
        t_mix,
    })
}

/// Which cells to join with the closed-form bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRequest {
    pub grid: GridSpec,
    pub strategy: Strategy,
    /// `None` takes every `k` present in the first requested metric's file.
    pub ks: Option<Vec<usize>>,
    pub metrics: Vec<Metric>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub grid: String,
    pub strategy: String,
    pub p: f64,
    pub k: usize,
    pub n: usize,
    pub avg_idle: Option<f64>,
    pub idle_bound: Option<f64>,
    pub idle_gap: Option<f64>,
    pub avg_isolation: Option<f64>,
    pub isolation_bound: Option<u64>,
    pub isolation_gap: Option<f64>,
    pub mean_broadcast: Option<f64>,
    pub broadcast_bound: Option<f64>,
    pub broadcast_gap: Option<f64>,
}

/// `(bound − empirical) / bound`; positive when the run stays below.
pub fn relative_gap(empirical: f64, bound: f64) -> f64 {
    (bound - empirical) / bound
}

fn pick<'a, R>(
    rows: &'a [R],
    metric: Metric,
    req: &CompareRequest,
    k: usize,
    coords: impl Fn(&R) -> (&str, &str, f64, usize),
) -> Result<&'a R, ExperimentError> {
    let grid = req.grid.label();
    let strategy = req.strategy.kind().name();
    rows.iter()
        .find(|r| coords(r) == (grid.as_str(), strategy, req.strategy.p(), k))
        .ok_or_else(|| ExperimentError::MissingCell {
            metric,
            grid: grid.clone(),
            strategy: strategy.to_string(),
            p: req.strategy.p(),
            k,
        })
}

/// Joins empirical averages found in `results_dir` with the closed-form
/// bounds for every requested `k`. A requested cell absent from the files
/// is an error; the pairwise metrics are left empty for `k = 1`.
pub fn compare_with_theory(
    results_dir: &Path,
    req: &CompareRequest,
) -> Result<Vec<ComparisonRow>, ExperimentError> {
    let metrics: Vec<Metric> = req
        .metrics
        .iter()
        .copied()
        .filter(|&m| m != Metric::Mixing)
        .collect();
    if metrics.is_empty() {
        return Err(ExperimentError::InvalidPlan("nothing to compare".into()));
    }
    let idle: Vec<IdleRow> = if metrics.contains(&Metric::Idle) {
        read_csv(&results_dir.join(IDLE_FILE))?
    } else {
        Vec::new()
    };
    let iso: Vec<IsolationRow> = if metrics.contains(&Metric::Isolation) {
        read_csv(&results_dir.join(ISOLATION_FILE))?
    } else {
        Vec::new()
    };
    let bc: Vec<BroadcastRow> = if metrics.contains(&Metric::Broadcast) {
        read_csv(&results_dir.join(BROADCAST_FILE))?
    } else {
        Vec::new()
    };
    let n = req.grid.circles();
    let label = req.grid.label();
    let strategy = req.strategy.kind().name();
    let ks = match &req.ks {
        Some(ks) => ks.clone(),
        None => {
            let mut ks: Vec<usize> = match metrics[0] {
                Metric::Idle => idle
                    .iter()
                    .filter(|r| {
                        r.grid == label && r.strategy == strategy && r.p == req.strategy.p()
                    })
                    .map(|r| r.k)
                    .collect(),
                Metric::Isolation => iso
                    .iter()
                    .filter(|r| {
                        r.grid == label && r.strategy == strategy && r.p == req.strategy.p()
                    })
                    .map(|r| r.k)
                    .collect(),
                _ => bc
                    .iter()
                    .filter(|r| {
                        r.grid == label && r.strategy == strategy && r.p == req.strategy.p()
                    })
                    .map(|r| r.k)
                    .collect(),
            };
            ks.sort_unstable();
            ks.dedup();
            ks
        }
    };
    let mut out = Vec::with_capacity(ks.len());
    for k in ks {
        let mut row = ComparisonRow {
            grid: label.clone(),
            strategy: strategy.to_string(),
            p: req.strategy.p(),
            k,
            n,
            avg_idle: None,
            idle_bound: None,
            idle_gap: None,
            avg_isolation: None,
            isolation_bound: None,
            isolation_gap: None,
            mean_broadcast: None,
            broadcast_bound: None,
            broadcast_gap: None,
        };
        if metrics.contains(&Metric::Idle) {
            let r = pick(&idle, Metric::Idle, req, k, |r| {
                (&r.grid, &r.strategy, r.p, r.k)
            })?;
            let b = bounds::idle_bound(n, k)?;
            row.avg_idle = Some(r.avg_idle);
            row.idle_bound = Some(b);
            row.idle_gap = Some(relative_gap(r.avg_idle, b));
        }
        if k >= 2 && metrics.contains(&Metric::Isolation) {
            let r = pick(&iso, Metric::Isolation, req, k, |r| {
                (&r.grid, &r.strategy, r.p, r.k)
            })?;
            let b = bounds::isolation_bound(n, k)?;
            row.avg_isolation = Some(r.avg_isolation);
            row.isolation_bound = Some(b);
            row.isolation_gap = Some(relative_gap(r.avg_isolation, b as f64));
        }
        if k >= 2 && metrics.contains(&Metric::Broadcast) {
            let r = pick(&bc, Metric::Broadcast, req, k, |r| {
                (&r.grid, &r.strategy, r.p, r.k)
            })?;
            let b = bounds::broadcast_regular_bound(n, k, req.delta)?;
            row.mean_broadcast = Some(r.mean_broadcast);
            row.broadcast_bound = Some(b);
            row.broadcast_gap = Some(relative_gap(r.mean_broadcast, b));
        }
        out.push(row);
    }
    Ok(out)
}

pub const COMPARISON_HEADER: [&str; 14] = [
    "grid",
    "strategy",
    "p",
    "k",
    "n",
    "avg_idle",
    "idle_bound",
    "idle_gap",
    "avg_isolation",
    "isolation_bound",
    "isolation_gap",
    "mean_broadcast",
    "broadcast_bound",
    "broadcast_gap",
];

/// Row of the motion-graph export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmgRow {
    pub i: usize,
    pub j: usize,
    pub c_ij: u8,
    pub m_ij: f64,
}

pub const DMG_HEADER: [&str; 4] = ["i", "j", "c_ij", "m_ij"];

/// Arcs of the grid's motion graph in `(i, j)` order.
pub fn dmg_rows(topo: &Topology) -> Result<Vec<DmgRow>, MotionError> {
    let (g, _) = motion::build_motion_graph(topo)?;
    let mut rows: Vec<DmgRow> = g
        .arcs()
        .iter()
        .map(|a| DmgRow {
            i: a.from.0,
            j: a.to.0,
            c_ij: a.links,
            m_ij: 0.5f64.powi(a.links as i32),
        })
        .collect();
    rows.sort_by_key(|r| (r.i, r.j));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::StrategyKind;

    fn tiny_plan(dir: &Path) -> ExperimentPlan {
        ExperimentPlan {
            grids: vec![GridSpec::square(3).unwrap()],
            ks: Some(vec![1, 2, 5, 9]),
            metrics: vec![Metric::Idle, Metric::Isolation, Metric::Broadcast],
            reps: 3,
            trials: Some(4),
            out_dir: dir.to_path_buf(),
            jobs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let g = GridSpec::square(10).unwrap();
        let s = Strategy::random();
        let base = derive_seed(1, &g, 5, &s, "walk", 0);
        assert_eq!(base, derive_seed(1, &g, 5, &s, "walk", 0));
        let others = [
            derive_seed(2, &g, 5, &s, "walk", 0),
            derive_seed(1, &GridSpec::square(11).unwrap(), 5, &s, "walk", 0),
            derive_seed(1, &g, 6, &s, "walk", 0),
            derive_seed(1, &g, 5, &Strategy::quasi_random(), "walk", 0),
            derive_seed(
                1,
                &g,
                5,
                &Strategy::new(StrategyKind::Random, 0.4).unwrap(),
                "walk",
                0,
            ),
            derive_seed(1, &g, 5, &s, "broadcast", 0),
            derive_seed(1, &g, 5, &s, "walk", 1),
        ];
        assert!(others.iter().all(|&o| o != base));
    }

    #[test]
    fn validation_catches_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny_plan(dir.path());
        assert!(p.validate().is_ok());
        p.ks = Some(vec![10]);
        assert!(p.validate().unwrap_err().is_config_error());
        p.ks = Some(vec![0]);
        assert!(p.validate().is_err());
        p.ks = Some(vec![1]);
        p.metrics = vec![Metric::Broadcast];
        assert!(p.validate().is_err());
        p.metrics = vec![];
        assert!(p.validate().is_err());
    }

    #[test]
    fn default_ks_follow_the_metric() {
        let p = ExperimentPlan::default();
        let g = GridSpec::square(10).unwrap();
        assert_eq!(p.ks_for(&g, Metric::Idle), (1..100).collect::<Vec<_>>());
        assert_eq!(
            p.ks_for(&g, Metric::Isolation),
            (2..100).collect::<Vec<_>>()
        );
    }

    #[test]
    fn plan_writes_sorted_files_with_exact_headers() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_plan(&tiny_plan(dir.path())).unwrap();
        assert_eq!(res.idle.len(), 12);
        assert_eq!(res.isolation.len(), 9);
        assert_eq!(res.broadcast.len(), 9);
        let idle = fs::read_to_string(dir.path().join(IDLE_FILE)).unwrap();
        assert!(idle.starts_with("grid,strategy,p,k,reps,max_idle,avg_idle,min_idle\n"));
        let rows: Vec<IdleRow> = read_csv(&dir.path().join(IDLE_FILE)).unwrap();
        assert_eq!(rows, res.idle_rows());
        let det_full = rows
            .iter()
            .find(|r| r.strategy == "deterministic" && r.k == 9)
            .unwrap();
        assert_eq!(
            (det_full.max_idle, det_full.avg_idle, det_full.min_idle),
            (1.0, 1.0, 1.0)
        );
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest["cells"].as_array().unwrap().len(), 12);
        assert_eq!(manifest["completed_grids"][0], "3x3");
    }

    #[test]
    fn plan_order_does_not_change_results() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = tiny_plan(a.path());
        let mut pb = tiny_plan(b.path());
        pb.strategies.reverse();
        pb.ks = Some(vec![9, 5, 2, 1]);
        pb.jobs = 1;
        run_plan(&pa).unwrap();
        run_plan(&pb).unwrap();
        for f in [IDLE_FILE, ISOLATION_FILE, BROADCAST_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn comparison_joins_and_reports_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        run_plan(&tiny_plan(dir.path())).unwrap();
        let mut req = CompareRequest {
            grid: GridSpec::square(3).unwrap(),
            strategy: Strategy::random(),
            ks: None,
            metrics: vec![Metric::Idle, Metric::Isolation],
            delta: bounds::GRID_DEGREE,
        };
        let rows = compare_with_theory(dir.path(), &req).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.k).collect::<Vec<_>>(),
            vec![1, 2, 5, 9]
        );
        assert_eq!(rows[0].avg_isolation, None);
        assert_eq!(rows[1].isolation_bound, Some(9));
        let r = &rows[2];
        let gap = relative_gap(r.avg_idle.unwrap(), r.idle_bound.unwrap());
        assert_eq!(r.idle_gap, Some(gap));
        req.ks = Some(vec![3]);
        assert!(matches!(
            compare_with_theory(dir.path(), &req),
            Err(ExperimentError::MissingCell { k: 3, .. })
        ));
    }

    #[test]
    fn mixing_rows_for_small_grids() {
        let row = mixing_row(
            &Topology::new(GridSpec::new(1, 2).unwrap()),
            0.25,
            10,
            MixingNorm::Spectral,
        )
        .unwrap();
        assert_eq!((row.n, row.t_mix), (2, 1));
    }

    #[test]
    fn dmg_export_is_sorted_and_stochastic() {
        let topo = Topology::new(GridSpec::square(3).unwrap());
        let rows = dmg_rows(&topo).unwrap();
        assert!(rows.windows(2).all(|w| (w[0].i, w[0].j) < (w[1].i, w[1].j)));
        for i in 0..9 {
            let s: f64 = rows.iter().filter(|r| r.i == i).map(|r| r.m_ij).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(rows.iter().all(|r| r.m_ij == 0.5f64.powi(r.c_ij as i32)));
    }
}
