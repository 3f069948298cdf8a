//! Tick-based engine for `k` synchronized robots under the deterministic,
//! random and quasi-random shifting strategies.
//!
//! Robots are placed at tick 0 on distinct circles, a quarter-tick past their
//! synchronized waypoint; nothing is observed at tick 0. Each [`Simulator::step`]
//! advances every robot one quarter arc, evaluates all shift decisions against
//! the occupancy before the step and applies them together.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ArcId, CircleId, GridSpec, Topology, VertexId, VertexKind, TICKS_PER_UNIT};

/// Seeded stream used for every simulation.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("shift probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("cannot place {robots} robots on {circles} circles")]
    TooManyRobots { robots: usize, circles: usize },
    #[error("at least {min} robots are required, got {got}")]
    TooFewRobots { min: usize, got: usize },
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown meeting rule `{0}`")]
    UnknownMeetingRule(String),
    #[error("repetitions must be positive")]
    NoRepetitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Deterministic,
    Random,
    QuasiRandom,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Random,
        StrategyKind::QuasiRandom,
        StrategyKind::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Deterministic => "deterministic",
            StrategyKind::Random => "random",
            StrategyKind::QuasiRandom => "quasi-random",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deterministic" | "det" => Ok(StrategyKind::Deterministic),
            "random" => Ok(StrategyKind::Random),
            "quasi-random" | "quasi" | "q-random" => Ok(StrategyKind::QuasiRandom),
            other => Err(SimError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    kind: StrategyKind,
    p: f64,
}

impl Strategy {
    pub const DEFAULT_P: f64 = 0.5;

    pub fn new(kind: StrategyKind, p: f64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::BadProbability(p));
        }
        Ok(Self { kind, p })
    }

    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            p: Self::DEFAULT_P,
        }
    }

    pub fn deterministic() -> Self {
        Self::of(StrategyKind::Deterministic)
    }

    pub fn random() -> Self {
        Self::of(StrategyKind::Random)
    }

    pub fn quasi_random() -> Self {
        Self::of(StrategyKind::QuasiRandom)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    /// Shift probability; unused by the deterministic rule.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Whether the strategy keeps at most one robot per circle.
    pub fn keeps_circles_exclusive(&self) -> bool {
        self.kind != StrategyKind::Random
    }
}

/// Which co-located robots count as meeting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeetingRule {
    /// Any two robots on the same waypoint at the same tick.
    #[default]
    Colocated,
    /// Only robots arriving at a link from its two different circles.
    LinkOnly,
}

impl MeetingRule {
    pub fn name(self) -> &'static str {
        match self {
            MeetingRule::Colocated => "colocated",
            MeetingRule::LinkOnly => "link-only",
        }
    }
}

impl FromStr for MeetingRule {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "colocated" | "any" | "all" => Ok(MeetingRule::Colocated),
            "link-only" | "link" => Ok(MeetingRule::LinkOnly),
            other => Err(SimError::UnknownMeetingRule(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub robots: usize,
    pub strategy: Strategy,
    /// Horizon in time units.
    pub duration: u64,
    pub seed: u64,
    pub reps: usize,
    pub meetings: MeetingRule,
}

impl SimConfig {
    pub const DEFAULT_REPS: usize = 10;

    /// Config with the default horizon `4n`, ten repetitions and seed 0.
    pub fn new(grid: GridSpec, robots: usize, strategy: Strategy) -> Self {
        Self {
            grid,
            robots,
            strategy,
            duration: grid.default_duration(),
            seed: 0,
            reps: Self::DEFAULT_REPS,
            meetings: MeetingRule::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_duration(mut self, duration: u64) -> Self {
        self.duration = duration;
        self
    }

    pub fn with_meetings(mut self, rule: MeetingRule) -> Self {
        self.meetings = rule;
        self
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn ticks(&self) -> u64 {
        self.duration * TICKS_PER_UNIT
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.robots == 0 {
            return Err(SimError::TooFewRobots { min: 1, got: 0 });
        }
        if self.robots > self.grid.circles() {
            return Err(SimError::TooManyRobots {
                robots: self.robots,
                circles: self.grid.circles(),
            });
        }
        if self.reps == 0 {
            return Err(SimError::NoRepetitions);
        }
        Strategy::new(self.strategy.kind, self.strategy.p)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimState {
    pub tick: u64,
    /// Current circle of each robot, indexed by robot.
    pub assignment: Vec<CircleId>,
}

impl SimState {
    pub fn robots(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen: Vec<CircleId> = self.assignment.clone();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    pub fn vertex_of(&self, topo: &Topology, robot: usize) -> VertexId {
        topo.position_of(self.assignment[robot], self.tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Traversal {
    pub tick: u64,
    pub arc: ArcId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meeting {
    pub tick: u64,
    pub vertex: VertexId,
    /// Robot indices, ascending; always at least two.
    pub robots: Vec<usize>,
}

/// Events produced by a single tick.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub tick: u64,
    /// Distinct arcs completed during the tick, ascending.
    pub traversals: Vec<ArcId>,
    /// Meeting groups by ascending vertex.
    pub meetings: Vec<(VertexId, Vec<usize>)>,
    pub shifts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventLog {
    pub robots: usize,
    pub traversals: Vec<Traversal>,
    pub meetings: Vec<Meeting>,
    pub final_tick: u64,
}

impl EventLog {
    fn new(robots: usize) -> Self {
        Self {
            robots,
            ..Self::default()
        }
    }

    fn record(&mut self, ev: &StepEvents) {
        self.traversals.extend(
            ev.traversals
                .iter()
                .map(|&arc| Traversal { tick: ev.tick, arc }),
        );
        self.meetings
            .extend(ev.meetings.iter().map(|(v, r)| Meeting {
                tick: ev.tick,
                vertex: *v,
                robots: r.clone(),
            }));
        self.final_tick = ev.tick;
    }

    /// Writes the log as JSON lines, per tick: traversals, then meetings,
    /// then a closing `end` record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut mi = 0;
        let mut ti = 0;
        while ti < self.traversals.len() || mi < self.meetings.len() {
            let tick = match (self.traversals.get(ti), self.meetings.get(mi)) {
                (Some(t), Some(m)) => t.tick.min(m.tick),
                (Some(t), None) => t.tick,
                (None, Some(m)) => m.tick,
                (None, None) => unreachable!(),
            };
            while let Some(t) = self.traversals.get(ti).filter(|t| t.tick == tick) {
                write_record(&mut w, &Record::Traversal(*t))?;
                ti += 1;
            }
            while let Some(m) = self.meetings.get(mi).filter(|m| m.tick == tick) {
                write_record(&mut w, &Record::Meeting(m.clone()))?;
                mi += 1;
            }
        }
        write_record(
            &mut w,
            &Record::End {
                final_tick: self.final_tick,
            },
        )
    }
}

/// One line of the streamed event log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Record {
    Traversal(Traversal),
    Meeting(Meeting),
    End { final_tick: u64 },
}

pub fn write_record<W: Write>(w: &mut W, rec: &Record) -> io::Result<()> {
    let mut line = serde_json::to_vec(rec).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)
}

/// Stepwise state machine bound to one topology.
#[derive(Debug, Clone)]
pub struct Simulator<'t> {
    topo: &'t Topology,
    strategy: Strategy,
    rule: MeetingRule,
    occupancy: Vec<u32>,
    by_vertex: Vec<(VertexId, usize)>,
    next: Vec<CircleId>,
}

impl<'t> Simulator<'t> {
    pub fn new(topo: &'t Topology, strategy: Strategy, rule: MeetingRule) -> Self {
        Self {
            topo,
            strategy,
            rule,
            occupancy: vec![0; topo.circles()],
            by_vertex: Vec::new(),
            next: Vec::new(),
        }
    }

    pub fn topology(&self) -> &'t Topology {
        self.topo
    }

    /// Draws `k` distinct circles uniformly; robot `i` gets the `i`-th draw.
    pub fn place<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<SimState, SimError> {
        place_robots(self.topo.grid(), k, rng)
    }

    /// Advances the state by one tick and returns the tick's events.
    pub fn step<R: Rng + ?Sized>(&mut self, state: &mut SimState, rng: &mut R) -> StepEvents {
        let topo = self.topo;
        let tick = state.tick + 1;
        for c in &state.assignment {
            self.occupancy[c.0] += 1;
        }

        let mut traversals: Vec<ArcId> = state
            .assignment
            .iter()
            .map(|&c| topo.arc_into(c, tick))
            .collect();
        traversals.sort_unstable();
        traversals.dedup();

        self.by_vertex.clear();
        self.by_vertex.extend(
            state
                .assignment
                .iter()
                .enumerate()
                .map(|(r, &c)| (topo.position_of(c, tick), r)),
        );
        self.by_vertex.sort_unstable();
        let meetings = self.group_meetings(&state.assignment);

        self.next.clear();
        let mut shifts = 0;
        for &c in &state.assignment {
            let target = match topo.partner_at(c, tick) {
                Some(d) if self.decide(self.occupancy[d.0] == 0, rng) => d,
                _ => c,
            };
            shifts += usize::from(target != c);
            self.next.push(target);
        }
        for c in &state.assignment {
            self.occupancy[c.0] -= 1;
        }
        std::mem::swap(&mut state.assignment, &mut self.next);
        state.tick = tick;

        StepEvents {
            tick,
            traversals,
            meetings,
            shifts,
        }
    }

    fn decide<R: Rng + ?Sized>(&self, neighbor_free: bool, rng: &mut R) -> bool {
        match self.strategy.kind {
            StrategyKind::Deterministic => neighbor_free,
            StrategyKind::Random => rng.gen_bool(self.strategy.p),
            StrategyKind::QuasiRandom => neighbor_free && rng.gen_bool(self.strategy.p),
        }
    }

    fn group_meetings(&self, assignment: &[CircleId]) -> Vec<(VertexId, Vec<usize>)> {
        let wg = self.topo.walking_graph();
        let mut out = Vec::new();
        for group in self.by_vertex.chunk_by(|a, b| a.0 == b.0) {
            if group.len() < 2 {
                continue;
            }
            let vertex = group[0].0;
            if self.rule == MeetingRule::LinkOnly {
                let VertexKind::Link { a, b } = wg.vertex(vertex) else {
                    continue;
                };
                let from_a = group.iter().any(|&(_, r)| assignment[r] == a);
                let from_b = group.iter().any(|&(_, r)| assignment[r] == b);
                if !(from_a && from_b) {
                    continue;
                }
            }
            out.push((vertex, group.iter().map(|&(_, r)| r).collect()));
        }
        out
    }
}

/// Uniform placement of `k` robots on distinct circles.
pub fn place_robots<R: Rng + ?Sized>(
    grid: &GridSpec,
    k: usize,
    rng: &mut R,
) -> Result<SimState, SimError> {
    let n = grid.circles();
    if k > n {
        return Err(SimError::TooManyRobots {
            robots: k,
            circles: n,
        });
    }
    let assignment = index::sample(rng, n, k).into_iter().map(CircleId).collect();
    Ok(SimState {
        tick: 0,
        assignment,
    })
}

/// One seeded run over the configured horizon.
pub fn run(config: &SimConfig) -> Result<EventLog, SimError> {
    let topo = Topology::new(config.grid);
    run_on(&topo, config)
}

/// Like [`run`] but reuses a prebuilt topology for `config.grid`.
pub fn run_on(topo: &Topology, config: &SimConfig) -> Result<EventLog, SimError> {
    run_observed(topo, config, |_, _| {})
}

/// Runs and also hands every tick's events and post-step state to `observe`.
pub fn run_observed<F>(
    topo: &Topology,
    config: &SimConfig,
    mut observe: F,
) -> Result<EventLog, SimError>
where
    F: FnMut(&SimState, &StepEvents),
{
    let mut log = EventLog::new(config.robots);
    run_streaming(topo, config, |state, ev| {
        log.record(ev);
        observe(state, ev);
    })?;
    Ok(log)
}

/// Runs without keeping a log; `observe` sees every tick.
pub fn run_streaming<F>(topo: &Topology, config: &SimConfig, mut observe: F) -> Result<(), SimError>
where
    F: FnMut(&SimState, &StepEvents),
{
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let mut sim = Simulator::new(topo, config.strategy, config.meetings);
    let mut state = sim.place(config.robots, &mut rng)?;
    for _ in 0..config.ticks() {
        let ev = sim.step(&mut state, &mut rng);
        observe(&state, &ev);
    }
    Ok(())
}

/// Outcome of one broadcast trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BroadcastOutcome {
    /// `min(horizon, completion time)` in time units.
    pub time: f64,
    pub completed: bool,
}

/// Places robots, informs one uniformly chosen robot and spreads the message
/// over meeting groups until everyone holds it or the horizon elapses.
pub fn run_broadcast<R: Rng + ?Sized>(
    topo: &Topology,
    config: &SimConfig,
    rng: &mut R,
) -> Result<BroadcastOutcome, SimError> {
    config.validate()?;
    if config.robots < 2 {
        return Err(SimError::TooFewRobots {
            min: 2,
            got: config.robots,
        });
    }
    let mut sim = Simulator::new(topo, config.strategy, config.meetings);
    let mut state = sim.place(config.robots, rng)?;
    let mut informed = vec![false; config.robots];
    informed[rng.gen_range(0..config.robots)] = true;
    let mut count = 1;
    for _ in 0..config.ticks() {
        let ev = sim.step(&mut state, rng);
        for (_, group) in &ev.meetings {
            if group.iter().any(|&r| informed[r]) {
                for &r in group {
                    if !informed[r] {
                        informed[r] = true;
                        count += 1;
                    }
                }
            }
        }
        if count == config.robots {
            return Ok(BroadcastOutcome {
                time: ev.tick as f64 / TICKS_PER_UNIT as f64,
                completed: true,
            });
        }
    }
    Ok(BroadcastOutcome {
        time: config.duration as f64,
        completed: false,
    })
}
