//! Discrete motion graph over circles, its transition matrix under the random
//! strategy, and the stationarity / mixing-time analyses built on it.
//!
//! A robot committed to circle `i` right after tick 0 travels four quarter
//! arcs before it is back at a synchronized position. Each time it reaches a
//! link it either stays or shifts, so one time unit is a binary decision tree
//! whose leaves are the circles reachable in exactly one tour. The transition
//! probability to a leaf is `(1/2)^c` with `c` the number of links passed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{largest_singular_value, CenteredOperator, DenseMatrix, PowerIterationConfig};
use crate::topology::{CircleId, Topology, TICKS_PER_UNIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error(
        "two distinct decision sequences from circle {from} reach circle {to}; \
         the one-tour path is not unique"
    )]
    DuplicatePath { from: usize, to: usize },
    #[error("leaf probabilities from {from} to {to} sum to {sum}, expected {expected}")]
    ProbabilityMismatch {
        from: usize,
        to: usize,
        sum: f64,
        expected: f64,
    },
    #[error("mixing did not reach epsilon = {epsilon} within {t_max} steps (last norm {last})")]
    NoConvergence {
        epsilon: f64,
        t_max: usize,
        last: f64,
    },
    #[error("invalid mixing parameters: epsilon = {epsilon}, t_max = {t_max}")]
    BadMixingParams { epsilon: f64, t_max: usize },
    #[error("transition matrix must be square with {n}x{n} entries, got {len}")]
    BadShape { n: usize, len: usize },
}

/// One leaf of the per-tour decision tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TourLeaf {
    pub target: CircleId,
    /// Bit `b` set means the robot shifted at the `b`-th link it reached.
    pub decisions: u8,
    pub links: u8,
}

/// Enumerates every decision sequence of one tour starting on circle `start`.
pub fn enumerate_tours(topo: &Topology, start: CircleId) -> Vec<TourLeaf> {
    let mut leaves = Vec::with_capacity(16);
    let mut stack = vec![(start, 1u64, 0u8, 0u8)];
    while let Some((circle, tick, decisions, links)) = stack.pop() {
        if tick > TICKS_PER_UNIT {
            leaves.push(TourLeaf {
                target: circle,
                decisions,
                links,
            });
            continue;
        }
        match topo.partner_at(circle, tick) {
            Some(other) => {
                stack.push((circle, tick + 1, decisions, links + 1));
                stack.push((other, tick + 1, decisions | (1 << links), links + 1));
            }
            None => stack.push((circle, tick + 1, decisions, links)),
        }
    }
    leaves.sort_by_key(|l| (l.target, l.decisions));
    leaves
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MotionArc {
    pub from: CircleId,
    pub to: CircleId,
    pub links: u8,
}

/// Digraph on circles; `(i, j)` present iff one tour leads from `i` to `j`.
#[derive(Debug, Clone, Serialize)]
pub struct MotionGraph {
    n: usize,
    arcs: Vec<MotionArc>,
}

impl MotionGraph {
    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn arcs(&self) -> &[MotionArc] {
        &self.arcs
    }

    pub fn out_degree(&self, c: CircleId) -> usize {
        self.arcs.iter().filter(|a| a.from == c).count()
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.n).all(|i| self.arcs.iter().any(|a| a.from.0 == i && a.to.0 == i))
    }

    pub fn is_strongly_connected(&self) -> bool {
        let mut fwd = vec![Vec::new(); self.n];
        let mut bwd = vec![Vec::new(); self.n];
        for a in &self.arcs {
            fwd[a.from.0].push(a.to.0);
            bwd[a.to.0].push(a.from.0);
        }
        reaches_all(&fwd) && reaches_all(&bwd)
    }
}

fn reaches_all(adj: &[Vec<usize>]) -> bool {
    if adj.is_empty() {
        return true;
    }
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Row-stochastic transition matrix stored as sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    /// Wraps a dense row-major matrix; zero entries are dropped.
    pub fn from_dense(n: usize, data: &[f64]) -> Result<Self, MotionError> {
        if data.len() != n * n {
            return Err(MotionError::BadShape { n, len: data.len() });
        }
        let rows = data
            .chunks(n.max(1))
            .take(n)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Ok(Self { n, rows })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map_or(0.0, |&(_, v)| v)
    }

    pub fn sparse_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                rows[j].push((i, v));
            }
        }
        Self { n: self.n, rows }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, v)| v).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for row in &self.rows {
            for &(j, v) in row {
                s[j] += v;
            }
        }
        s
    }

    /// `u * M` for a row vector `u`.
    pub fn left_mul(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &ui) in self.rows.iter().zip(u) {
            for &(j, v) in row {
                out[j] += ui * v;
            }
        }
        out
    }
}

/// Builds the motion graph and its transition matrix, checking that every
/// circle reachable in one tour is reached by exactly one decision sequence.
pub fn build_motion_graph(topo: &Topology) -> Result<(MotionGraph, TransitionMatrix), MotionError> {
    let n = topo.circles();
    let mut arcs = Vec::new();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let leaves = enumerate_tours(topo, CircleId(i));
        let mut row: Vec<(usize, f64)> = Vec::new();
        for pair in leaves.windows(2) {
            if pair[0].target == pair[1].target {
                return Err(MotionError::DuplicatePath {
                    from: i,
                    to: pair[0].target.0,
                });
            }
        }
        for leaf in &leaves {
            let expected = 0.5f64.powi(leaf.links as i32);
            let sum: f64 = leaves
                .iter()
                .filter(|l| l.target == leaf.target)
                .map(|l| 0.5f64.powi(l.links as i32))
                .sum();
            if sum != expected {
                return Err(MotionError::ProbabilityMismatch {
                    from: i,
                    to: leaf.target.0,
                    sum,
                    expected,
                });
            }
            arcs.push(MotionArc {
                from: CircleId(i),
                to: leaf.target,
                links: leaf.links,
            });
            row.push((leaf.target.0, expected));
        }
        rows.push(row);
    }
    Ok((MotionGraph { n, arcs }, TransitionMatrix { n, rows }))
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryReport {
    pub n: usize,
    pub max_row_error: f64,
    pub max_col_error: f64,
    /// `‖uM − u‖∞` for the uniform vector `u`.
    pub stationary_residual: f64,
    pub entries_in_unit_interval: bool,
    pub irreducible: bool,
    pub aperiodic: bool,
    pub tolerance: f64,
}

impl StationaryReport {
    pub fn rows_ok(&self) -> bool {
        self.max_row_error < self.tolerance
    }

    pub fn cols_ok(&self) -> bool {
        self.max_col_error < self.tolerance
    }

    pub fn uniform_is_stationary(&self) -> bool {
        self.stationary_residual < self.tolerance
    }

    pub fn passed(&self) -> bool {
        self.rows_ok()
            && self.cols_ok()
            && self.uniform_is_stationary()
            && self.entries_in_unit_interval
            && self.irreducible
            && self.aperiodic
    }
}

pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Checks double stochasticity, uniform stationarity, irreducibility and
/// aperiodicity (every diagonal entry positive).
pub fn stationary_check(m: &TransitionMatrix) -> StationaryReport {
    let n = m.size();
    let max_err = |s: Vec<f64>| s.into_iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    let u = vec![1.0 / n as f64; n];
    let residual = m
        .left_mul(&u)
        .iter()
        .zip(&u)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let entries_ok = m
        .sparse_rows()
        .iter()
        .flatten()
        .all(|&(_, v)| (0.0..=1.0).contains(&v));
    let graph = MotionGraph {
        n,
        arcs: m
            .sparse_rows()
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.iter()
                    .filter(|(_, v)| *v > 0.0)
                    .map(move |&(j, _)| MotionArc {
                        from: CircleId(i),
                        to: CircleId(j),
                        links: 0,
                    })
            })
            .collect(),
    };
    StationaryReport {
        n,
        max_row_error: max_err(m.row_sums()),
        max_col_error: max_err(m.col_sums()),
        stationary_residual: residual,
        entries_in_unit_interval: entries_ok,
        irreducible: graph.is_strongly_connected(),
        aperiodic: (0..n).all(|i| m.get(i, i) > 0.0),
        tolerance: STOCHASTIC_TOL,
    }
}

/// Matrix norm used to measure `Mᵗ − M*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingNorm {
    /// Largest singular value; bounds `‖π(Mᵗ − M*)‖₂` for unit `π`.
    #[default]
    Spectral,
    /// Entrywise Euclidean norm, an upper bound on the spectral norm.
    Frobenius,
}

impl MixingNorm {
    pub fn name(self) -> &'static str {
        match self {
            MixingNorm::Spectral => "spectral",
            MixingNorm::Frobenius => "frobenius",
        }
    }
}

impl std::str::FromStr for MixingNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spectral" | "2" => Ok(MixingNorm::Spectral),
            "frobenius" | "fro" => Ok(MixingNorm::Frobenius),
            other => Err(format!("unknown norm `{other}`")),
        }
    }
}

/// Power-iteration settings used for `‖Mᵗ − M*‖₂`.
pub fn norm_config() -> PowerIterationConfig {
    PowerIterationConfig::default()
}

fn frobenius_distance(power: &DenseMatrix) -> f64 {
    let uniform = 1.0 / power.rows() as f64;
    power
        .as_slice()
        .iter()
        .map(|&x| (x - uniform) * (x - uniform))
        .sum::<f64>()
        .sqrt()
}

/// `‖Mᵗ − M*‖` for `t = 1..=t_max`, spectral values to full power-iteration
/// precision.
pub fn distance_profile(m: &TransitionMatrix, t_max: usize, norm: MixingNorm) -> Vec<f64> {
    let mut power = m.to_dense();
    let mut warm = Vec::new();
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        if t > 1 {
            power = power.mul_sparse(m.sparse_rows(), m.size());
        }
        out.push(match norm {
            MixingNorm::Spectral => {
                largest_singular_value(&CenteredOperator(&power), &mut warm, norm_config()).sigma
            }
            MixingNorm::Frobenius => frobenius_distance(&power),
        });
    }
    out
}

/// Smallest `t` with `‖Mᵗ − M*‖₂ < epsilon`, where `M*` has every entry `1/n`.
pub fn mixing_time(m: &TransitionMatrix, epsilon: f64, t_max: usize) -> Result<usize, MotionError> {
    mixing_time_with(m, epsilon, t_max, MixingNorm::Spectral)
}

/// [`mixing_time`] under a chosen norm.
///
/// Power iteration only ever under-estimates the spectral norm, so once an
/// estimate reaches `epsilon` the step is known to be unmixed and the
/// iteration for that `t` stops early.
pub fn mixing_time_with(
    m: &TransitionMatrix,
    epsilon: f64,
    t_max: usize,
    norm: MixingNorm,
) -> Result<usize, MotionError> {
    if epsilon.is_nan() || epsilon <= 0.0 || t_max == 0 {
        return Err(MotionError::BadMixingParams { epsilon, t_max });
    }
    let mut power = m.to_dense();
    let mut warm = Vec::new();
    let mut last = f64::NAN;
    for t in 1..=t_max {
        if t > 1 {
            power = power.mul_sparse(m.sparse_rows(), m.size());
        }
        last = match norm {
            MixingNorm::Spectral => {
                let cfg = PowerIterationConfig {
                    stop_at_or_above: Some(epsilon),
                    ..norm_config()
                };
                largest_singular_value(&CenteredOperator(&power), &mut warm, cfg).sigma
            }
            MixingNorm::Frobenius => frobenius_distance(&power),
        };
        if last < epsilon {
            return Ok(t);
        }
    }
    Err(MotionError::NoConvergence {
        epsilon,
        t_max,
        last,
    })
}
