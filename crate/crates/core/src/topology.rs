//! Grid of tangent unit circles, its synchronization schedule, and the
//! walking graph of quarter-arc waypoints.
//!
//! Every circle carries four waypoints at its east, north, west and south
//! points (quarter indices 0, 1, 2, 3). A waypoint shared with a neighboring
//! circle is a communication link; the others touch the bounding box. One
//! simulation tick moves every robot a quarter turn, so a full tour takes
//! four ticks (one time unit).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ticks per time unit (one full tour of a circle).
pub const TICKS_PER_UNIT: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("grid dimensions must be positive, got {rows}x{cols}")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("circle {0} is outside the grid")]
    UnknownCircle(usize),
    #[error("vertex {vertex} does not lie on circle {circle}")]
    NotOnCircle { vertex: usize, circle: usize },
    #[error("schedule has {got} entries for a grid of {expected} circles")]
    ScheduleSize { expected: usize, got: usize },
    #[error("phase {0} is not a quarter offset in 0..4")]
    BadPhase(u8),
    #[error("adjacent circles {a} and {b} travel in the same direction")]
    SameDirection { a: usize, b: usize },
    #[error("adjacent circles {a} and {b} never meet at their shared link")]
    NoMeeting { a: usize, b: usize },
    #[error("no synchronized phase assignment exists for this grid")]
    Unschedulable,
}

/// Circle index, row-major over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CircleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct VertexId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ArcId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GridSpec {
    rows: usize,
    cols: usize,
}

#[derive(Deserialize)]
struct RawGrid {
    rows: usize,
    cols: usize,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = TopologyError;

    fn try_from(raw: RawGrid) -> Result<Self, Self::Error> {
        GridSpec::new(raw.rows, raw.cols)
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self, TopologyError> {
        if rows == 0 || cols == 0 {
            return Err(TopologyError::EmptyGrid { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self, TopologyError> {
        Self::new(side, side)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of circles `n = rows * cols`.
    pub fn circles(&self) -> usize {
        self.rows * self.cols
    }

    /// Default horizon in time units: `4n`, which is `4N²` on square grids.
    pub fn default_duration(&self) -> u64 {
        4 * self.circles() as u64
    }

    pub fn circle(&self, row: usize, col: usize) -> CircleId {
        debug_assert!(row < self.rows && col < self.cols);
        CircleId(row * self.cols + col)
    }

    pub fn coords(&self, c: CircleId) -> (usize, usize) {
        (c.0 / self.cols, c.0 % self.cols)
    }

    pub fn contains(&self, c: CircleId) -> bool {
        c.0 < self.circles()
    }

    /// Label used in CSV rows, e.g. `10x10`.
    pub fn label(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// The circle tangent to `c` at quarter point `q`, if any.
    pub fn neighbor(&self, c: CircleId, q: u8) -> Option<CircleId> {
        let (r, col) = self.coords(c);
        match q {
            0 if col + 1 < self.cols => Some(self.circle(r, col + 1)),
            1 if r > 0 => Some(self.circle(r - 1, col)),
            2 if col > 0 => Some(self.circle(r, col - 1)),
            3 if r + 1 < self.rows => Some(self.circle(r + 1, col)),
            _ => None,
        }
    }

    /// Adjacent pairs `(a, b)` with `a < b`, each listed once, with the quarter
    /// point of `a` at which they touch.
    pub fn adjacent_pairs(&self) -> Vec<(CircleId, CircleId, u8)> {
        let mut out = Vec::new();
        for i in 0..self.circles() {
            let c = CircleId(i);
            for q in [0u8, 3] {
                if let Some(d) = self.neighbor(c, q) {
                    out.push((c, d, q));
                }
            }
        }
        out
    }
}

/// Quarter point across the tangency: east faces west, north faces south.
fn opposite(q: u8) -> u8 {
    (q + 2) % 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    Ccw,
    Cw,
}

impl Direction {
    /// Quarter-index increment per tick.
    pub fn step(self) -> u8 {
        match self {
            Direction::Ccw => 1,
            Direction::Cw => 3,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Ccw => Direction::Cw,
            Direction::Cw => Direction::Ccw,
        }
    }
}

/// Travel direction and tick-0 quarter point of every circle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    directions: Vec<Direction>,
    phases: Vec<u8>,
}

impl Schedule {
    /// Builds and validates an explicit schedule.
    pub fn new(
        grid: &GridSpec,
        directions: Vec<Direction>,
        phases: Vec<u8>,
    ) -> Result<Self, TopologyError> {
        let expected = grid.circles();
        for got in [directions.len(), phases.len()] {
            if got != expected {
                return Err(TopologyError::ScheduleSize { expected, got });
            }
        }
        if let Some(&bad) = phases.iter().find(|&&p| p >= 4) {
            return Err(TopologyError::BadPhase(bad));
        }
        let sched = Self { directions, phases };
        sched.verify(grid)?;
        Ok(sched)
    }

    pub fn direction(&self, c: CircleId) -> Direction {
        self.directions[c.0]
    }

    pub fn phase(&self, c: CircleId) -> u8 {
        self.phases[c.0]
    }

    /// Quarter point occupied by the circle's virtual robot at `tick`.
    pub fn quarter_at(&self, c: CircleId, tick: u64) -> u8 {
        let step = self.directions[c.0].step() as u64;
        ((self.phases[c.0] as u64 + step * (tick % 4)) % 4) as u8
    }

    /// Ticks in `0..4` at which both circles' virtual robots sit on the
    /// tangency point between them.
    pub fn meeting_ticks(&self, a: CircleId, qa: u8, b: CircleId) -> Vec<u64> {
        (0..TICKS_PER_UNIT)
            .filter(|&t| self.quarter_at(a, t) == qa && self.quarter_at(b, t) == opposite(qa))
            .collect()
    }

    /// Checks the checkerboard and meeting properties.
    pub fn verify(&self, grid: &GridSpec) -> Result<(), TopologyError> {
        for (a, b, qa) in grid.adjacent_pairs() {
            if self.direction(a) == self.direction(b) {
                return Err(TopologyError::SameDirection { a: a.0, b: b.0 });
            }
            if self.meeting_ticks(a, qa, b).len() != 1 {
                return Err(TopologyError::NoMeeting { a: a.0, b: b.0 });
            }
        }
        Ok(())
    }

    /// Every circle's direction reversed while keeping the synchronized
    /// positions (the points a quarter-tick after tick 0) in place. A robot
    /// that left quarter `q` at tick 0 now arrives at `q` at tick 1, so the
    /// tick-0 quarter moves one step forward along the old direction.
    pub fn reversed(&self) -> Self {
        let directions = self.directions.iter().map(|d| d.reversed()).collect();
        let phases = self
            .phases
            .iter()
            .zip(&self.directions)
            .map(|(&p, d)| (p + d.step()) % 4)
            .collect();
        Self { directions, phases }
    }
}

/// Checkerboard schedule: CCW where `row + col` is even. Even rows start at
/// the north point and odd rows at the south point, which puts every pair of
/// neighbors on their shared link at exactly one tick per unit. Falls back to
/// a row-major phase search if the closed form ever fails verification.
pub fn build_schedule(grid: &GridSpec) -> Schedule {
    let n = grid.circles();
    let directions: Vec<Direction> = (0..n)
        .map(|i| {
            let (r, c) = grid.coords(CircleId(i));
            if (r + c) % 2 == 0 {
                Direction::Ccw
            } else {
                Direction::Cw
            }
        })
        .collect();
    let phases: Vec<u8> = (0..n)
        .map(|i| {
            if grid.coords(CircleId(i)).0.is_multiple_of(2) {
                1
            } else {
                3
            }
        })
        .collect();
    let sched = Schedule { directions, phases };
    if sched.verify(grid).is_ok() {
        return sched;
    }
    search_phases(grid, sched.directions).expect("checkerboard grids are always schedulable")
}

/// Depth-first search over quarter phases in row-major order, pruning on the
/// meeting property against already-assigned west and north neighbors.
pub fn search_phases(
    grid: &GridSpec,
    directions: Vec<Direction>,
) -> Result<Schedule, TopologyError> {
    let n = grid.circles();
    let mut sched = Schedule {
        directions,
        phases: vec![0; n],
    };
    fn go(grid: &GridSpec, sched: &mut Schedule, i: usize) -> bool {
        if i == grid.circles() {
            return true;
        }
        let c = CircleId(i);
        for p in 0..4u8 {
            sched.phases[i] = p;
            let ok = [2u8, 1].into_iter().all(|q| match grid.neighbor(c, q) {
                Some(d) => {
                    sched.direction(c) != sched.direction(d)
                        && sched.meeting_ticks(c, q, d).len() == 1
                }
                None => true,
            });
            if ok && go(grid, sched, i + 1) {
                return true;
            }
        }
        false
    }
    if go(grid, &mut sched, 0) {
        Ok(sched)
    } else {
        Err(TopologyError::Unschedulable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VertexKind {
    /// Tangency of two circles; `a < b`.
    Link { a: CircleId, b: CircleId },
    /// Point where a circle touches the bounding box.
    Box { circle: CircleId },
}

impl VertexKind {
    pub fn is_link(&self) -> bool {
        matches!(self, VertexKind::Link { .. })
    }

    pub fn touches(&self, c: CircleId) -> bool {
        match *self {
            VertexKind::Link { a, b } => a == c || b == c,
            VertexKind::Box { circle } => circle == c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Arc {
    pub id: ArcId,
    pub owner: CircleId,
    pub tail: VertexId,
    pub head: VertexId,
}

/// Directed quarter-arc graph over link and box waypoints.
#[derive(Debug, Clone, Serialize)]
pub struct WalkingGraph {
    grid: GridSpec,
    vertices: Vec<VertexKind>,
    arcs: Vec<Arc>,
    /// `points[c][q]`: waypoint at quarter `q` of circle `c`.
    points: Vec<[VertexId; 4]>,
    /// Each circle's four waypoints in travel order starting at its tick-0 point.
    cycles: Vec<[VertexId; 4]>,
}

/// Constructs the walking graph. Vertex ids are assigned scanning circles
/// row-major and quarter points in order E, N, W, S; arc `4c + q` is the arc
/// of circle `c` leaving quarter point `q`.
pub fn build_walking_graph(grid: &GridSpec, sched: &Schedule) -> WalkingGraph {
    let n = grid.circles();
    let mut vertices = Vec::new();
    let mut points = vec![[VertexId(usize::MAX); 4]; n];
    for i in 0..n {
        let c = CircleId(i);
        for q in 0..4u8 {
            if points[i][q as usize].0 != usize::MAX {
                continue;
            }
            let id = VertexId(vertices.len());
            match grid.neighbor(c, q) {
                Some(d) => {
                    vertices.push(VertexKind::Link {
                        a: c.min(d),
                        b: c.max(d),
                    });
                    points[d.0][opposite(q) as usize] = id;
                }
                None => vertices.push(VertexKind::Box { circle: c }),
            }
            points[i][q as usize] = id;
        }
    }

    let mut arcs = Vec::with_capacity(4 * n);
    let mut cycles = Vec::with_capacity(n);
    for (i, pts) in points.iter().enumerate() {
        let c = CircleId(i);
        let step = sched.direction(c).step();
        for q in 0..4u8 {
            arcs.push(Arc {
                id: ArcId(4 * i + q as usize),
                owner: c,
                tail: pts[q as usize],
                head: pts[((q + step) % 4) as usize],
            });
        }
        let mut cycle = [VertexId(0); 4];
        for (t, slot) in cycle.iter_mut().enumerate() {
            *slot = pts[sched.quarter_at(c, t as u64) as usize];
        }
        cycles.push(cycle);
    }

    WalkingGraph {
        grid: *grid,
        vertices,
        arcs,
        points,
        cycles,
    }
}

impl WalkingGraph {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn vertex(&self, v: VertexId) -> VertexKind {
        self.vertices[v.0]
    }

    pub fn vertices(&self) -> &[VertexKind] {
        &self.vertices
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn arc(&self, a: ArcId) -> &Arc {
        &self.arcs[a.0]
    }

    pub fn point(&self, c: CircleId, q: u8) -> VertexId {
        self.points[c.0][q as usize]
    }

    pub fn cycle(&self, c: CircleId) -> &[VertexId; 4] {
        &self.cycles[c.0]
    }

    /// The other circle at a link, `None` at a box point.
    pub fn link_partner(
        &self,
        v: VertexId,
        c: CircleId,
    ) -> Result<Option<CircleId>, TopologyError> {
        let kind = *self.vertices.get(v.0).ok_or(TopologyError::NotOnCircle {
            vertex: v.0,
            circle: c.0,
        })?;
        if !kind.touches(c) {
            return Err(TopologyError::NotOnCircle {
                vertex: v.0,
                circle: c.0,
            });
        }
        Ok(match kind {
            VertexKind::Link { a, b } => Some(if a == c { b } else { a }),
            VertexKind::Box { .. } => None,
        })
    }

    /// Vertex count claimed by the closed-form `4(N + M)`; coincides with the
    /// constructed count only on the 3x3 grid.
    pub fn formula_vertex_count(&self) -> usize {
        4 * (self.grid.rows + self.grid.cols)
    }
}

/// Grid, schedule and walking graph bundled with per-tick lookup tables used
/// by the simulator and the motion-graph builder.
#[derive(Debug, Clone)]
pub struct Topology {
    grid: GridSpec,
    schedule: Schedule,
    walking: WalkingGraph,
    /// `vertex_at[4c + t]`: waypoint of circle `c` at tick `t mod 4`.
    vertex_at: Vec<VertexId>,
    /// `arc_into[4c + t]`: arc of circle `c` traversed during `(t-1, t]`.
    arc_into: Vec<ArcId>,
    /// `partner_at[4c + t]`: neighbor sharing the waypoint at tick `t mod 4`.
    partner_at: Vec<Option<CircleId>>,
}

impl Topology {
    pub fn new(grid: GridSpec) -> Self {
        let schedule = build_schedule(&grid);
        Self::with_schedule(grid, schedule)
    }

    pub fn with_schedule(grid: GridSpec, schedule: Schedule) -> Self {
        let walking = build_walking_graph(&grid, &schedule);
        let n = grid.circles();
        let mut vertex_at = Vec::with_capacity(4 * n);
        let mut arc_into = Vec::with_capacity(4 * n);
        let mut partner_at = Vec::with_capacity(4 * n);
        for i in 0..n {
            let c = CircleId(i);
            for t in 0..TICKS_PER_UNIT {
                let q = schedule.quarter_at(c, t);
                let prev = schedule.quarter_at(c, t + 3);
                vertex_at.push(walking.point(c, q));
                arc_into.push(ArcId(4 * i + prev as usize));
                partner_at.push(grid.neighbor(c, q));
            }
        }
        Self {
            grid,
            schedule,
            walking,
            vertex_at,
            arc_into,
            partner_at,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn walking_graph(&self) -> &WalkingGraph {
        &self.walking
    }

    pub fn circles(&self) -> usize {
        self.grid.circles()
    }

    /// Waypoint occupied by the circle's synchronized robot at `tick`.
    pub fn position_of(&self, c: CircleId, tick: u64) -> VertexId {
        self.vertex_at[4 * c.0 + (tick % 4) as usize]
    }

    /// Arc of circle `c` whose head is reached at `tick`.
    pub fn arc_into(&self, c: CircleId, tick: u64) -> ArcId {
        self.arc_into[4 * c.0 + (tick % 4) as usize]
    }

    /// Neighbor whose link the circle's robot sits on at `tick`, if any.
    pub fn partner_at(&self, c: CircleId, tick: u64) -> Option<CircleId> {
        self.partner_at[4 * c.0 + (tick % 4) as usize]
    }
}
