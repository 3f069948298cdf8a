//! Idle, isolation and broadcast statistics over repeated runs.
//!
//! All gaps are interior gaps, `(t_last − t_first) / (count − 1)` in time
//! units. An arc or robot with fewer than two events scores the horizon,
//! which is what saturates the curves of sparse deterministic teams.

use serde::Serialize;
use thiserror::Error;

use crate::sim::EventLog;
use crate::topology::{GridSpec, TICKS_PER_UNIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no event logs to aggregate")]
    NoLogs,
    #[error("isolation needs at least two robots, got {0}")]
    TooFewRobots(usize),
    #[error("log has {got} robots, expected {expected}")]
    RobotMismatch { expected: usize, got: usize },
    #[error("expected {expected} broadcast trials, got {got}")]
    TrialCount { expected: usize, got: usize },
}

fn to_units(tick: u64) -> f64 {
    tick as f64 / TICKS_PER_UNIT as f64
}

/// Mean interior gap of a sorted tick sequence, or `cap` with < 2 events.
pub fn mean_gap(ticks: &[u64], cap: f64) -> f64 {
    match ticks {
        [first, .., last] => to_units(last - first) / (ticks.len() - 1) as f64,
        _ => cap,
    }
}

/// Streaming form of [`mean_gap`] for many keys at once; only the first and
/// last tick and the count are needed for interior gaps.
#[derive(Debug, Clone)]
pub struct GapTracker {
    first: Vec<u64>,
    last: Vec<u64>,
    count: Vec<u64>,
}

impl GapTracker {
    pub fn new(keys: usize) -> Self {
        Self {
            first: vec![0; keys],
            last: vec![0; keys],
            count: vec![0; keys],
        }
    }

    /// Records an event; ticks must be nondecreasing per key.
    pub fn observe(&mut self, key: usize, tick: u64) {
        if self.count[key] == 0 {
            self.first[key] = tick;
        }
        debug_assert!(tick >= self.last[key]);
        self.last[key] = tick;
        self.count[key] += 1;
    }

    pub fn mean_gap(&self, key: usize, cap: f64) -> f64 {
        match self.count[key] {
            0 | 1 => cap,
            m => to_units(self.last[key] - self.first[key]) / (m - 1) as f64,
        }
    }

    pub fn gaps(&self, cap: f64) -> Vec<f64> {
        (0..self.count.len())
            .map(|k| self.mean_gap(k, cap))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdleSummary {
    /// Mean over logs of each arc's idle time.
    pub per_arc: Vec<f64>,
    pub max_idle: f64,
    pub avg_idle: f64,
    pub min_idle: f64,
    pub reps: usize,
}

impl IdleSummary {
    /// Aggregates per-log, per-arc idle times.
    pub fn from_per_log(per_log: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let reps = per_log.len();
        let first = per_log.first().ok_or(MetricsError::NoLogs)?;
        let mut per_arc = vec![0.0; first.len()];
        for log in per_log {
            for (acc, v) in per_arc.iter_mut().zip(log) {
                *acc += v;
            }
        }
        per_arc.iter_mut().for_each(|v| *v /= reps as f64);
        let (max_idle, avg_idle, min_idle) = extremes(&per_arc);
        Ok(Self {
            per_arc,
            max_idle,
            avg_idle,
            min_idle,
            reps,
        })
    }
}

/// Idle time of every arc in one log.
pub fn arc_idle(log: &EventLog, arc_count: usize, duration: u64) -> Vec<f64> {
    let mut tracker = GapTracker::new(arc_count);
    for t in &log.traversals {
        tracker.observe(t.arc.0, t.tick);
    }
    tracker.gaps(duration as f64)
}

/// Per-arc idle time averaged over logs, then max / mean / min over arcs.
pub fn idle_stats(
    logs: &[EventLog],
    arc_count: usize,
    duration: u64,
) -> Result<IdleSummary, MetricsError> {
    let per_log: Vec<Vec<f64>> = logs
        .iter()
        .map(|l| arc_idle(l, arc_count, duration))
        .collect();
    IdleSummary::from_per_log(&per_log)
}

fn extremes(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    (max, avg, min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationSummary {
    pub max_isolation: f64,
    pub avg_isolation: f64,
    pub min_isolation: f64,
    /// `(max, avg, min)` of each log before averaging.
    pub per_log: Vec<(f64, f64, f64)>,
    pub reps: usize,
}

impl IsolationSummary {
    /// Aggregates per-log, per-robot isolation times.
    pub fn from_per_log(per_log: &[Vec<f64>]) -> Result<Self, MetricsError> {
        if per_log.is_empty() {
            return Err(MetricsError::NoLogs);
        }
        let stats: Vec<(f64, f64, f64)> = per_log.iter().map(|r| extremes(r)).collect();
        let reps = stats.len() as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| stats.iter().map(f).sum::<f64>() / reps;
        Ok(Self {
            max_isolation: mean(|s| s.0),
            avg_isolation: mean(|s| s.1),
            min_isolation: mean(|s| s.2),
            reps: stats.len(),
            per_log: stats,
        })
    }
}

/// Isolation time of every robot in one log.
pub fn robot_isolation(log: &EventLog, k: usize, duration: u64) -> Vec<f64> {
    let mut tracker = GapTracker::new(k);
    for m in &log.meetings {
        // A robot belongs to at most one group per tick.
        for &r in &m.robots {
            tracker.observe(r, m.tick);
        }
    }
    tracker.gaps(duration as f64)
}

/// Per-log max / mean / min over robots, each then averaged over logs.
pub fn isolation_stats(
    logs: &[EventLog],
    k: usize,
    duration: u64,
) -> Result<IsolationSummary, MetricsError> {
    if k < 2 {
        return Err(MetricsError::TooFewRobots(k));
    }
    if logs.is_empty() {
        return Err(MetricsError::NoLogs);
    }
    let mut per_log = Vec::with_capacity(logs.len());
    for log in logs {
        if log.robots != k {
            return Err(MetricsError::RobotMismatch {
                expected: k,
                got: log.robots,
            });
        }
        per_log.push(robot_isolation(log, k, duration));
    }
    IsolationSummary::from_per_log(&per_log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BroadcastSummary {
    pub mean_broadcast: f64,
    pub trials: usize,
    pub cap_hits: usize,
}

/// Mean broadcast time over trials. The trial count must be `n` (one per
/// circle, `N²` on square grids) unless `allow_any_count` is set.
pub fn broadcast_stats(
    trial_times: &[f64],
    grid: &GridSpec,
    cap: f64,
    allow_any_count: bool,
) -> Result<BroadcastSummary, MetricsError> {
    let expected = grid.circles();
    if trial_times.is_empty() || (!allow_any_count && trial_times.len() != expected) {
        return Err(MetricsError::TrialCount {
            expected,
            got: trial_times.len(),
        });
    }
    Ok(BroadcastSummary {
        mean_broadcast: trial_times.iter().sum::<f64>() / trial_times.len() as f64,
        trials: trial_times.len(),
        cap_hits: trial_times.iter().filter(|&&t| t >= cap).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Meeting, Traversal};
    use crate::topology::{ArcId, VertexId};

    fn log_with_arc(ticks: &[u64], arc: usize) -> EventLog {
        EventLog {
            robots: 1,
            traversals: ticks
                .iter()
                .map(|&t| Traversal {
                    tick: t,
                    arc: ArcId(arc),
                })
                .collect(),
            meetings: vec![],
            final_tick: ticks.last().copied().unwrap_or(0),
        }
    }

    fn log_with_meetings(k: usize, meetings: &[(u64, Vec<usize>)]) -> EventLog {
        EventLog {
            robots: k,
            traversals: vec![],
            meetings: meetings
                .iter()
                .map(|(t, r)| Meeting {
                    tick: *t,
                    vertex: VertexId(0),
                    robots: r.clone(),
                })
                .collect(),
            final_tick: 0,
        }
    }

    #[test]
    fn interior_gap_example() {
        // Times 2, 5 and 11 units are ticks 8, 20 and 44.
        let log = log_with_arc(&[8, 20, 44], 0);
        let s = idle_stats(&[log], 1, 400).unwrap();
        assert_eq!(s.per_arc, vec![4.5]);
    }

    #[test]
    fn unvisited_arcs_score_the_horizon() {
        let log = log_with_arc(&[4], 0);
        let s = idle_stats(&[log], 3, 36).unwrap();
        assert_eq!(s.per_arc, vec![36.0; 3]);
        assert_eq!((s.max_idle, s.avg_idle, s.min_idle), (36.0, 36.0, 36.0));
    }

    #[test]
    fn capped_and_uncapped_reps_are_averaged() {
        let visited = log_with_arc(&[4, 8, 12], 0);
        let empty = log_with_arc(&[], 0);
        let s = idle_stats(&[visited, empty], 1, 100).unwrap();
        assert_eq!(s.per_arc, vec![(1.0 + 100.0) / 2.0]);
    }

    #[test]
    fn tracker_agrees_with_slice_gap() {
        let ticks = [3u64, 3, 9, 10, 30];
        let mut tr = GapTracker::new(1);
        for &t in &ticks {
            tr.observe(0, t);
        }
        assert_eq!(tr.mean_gap(0, 7.0), mean_gap(&ticks, 7.0));
        assert_eq!(GapTracker::new(1).mean_gap(0, 7.0), 7.0);
    }

    #[test]
    fn idle_rejects_empty_input() {
        assert_eq!(idle_stats(&[], 4, 10), Err(MetricsError::NoLogs));
    }

    #[test]
    fn isolation_example_gap() {
        // Meetings at 1, 3 and 9 units.
        let log = log_with_meetings(2, &[(4, vec![0, 1]), (12, vec![0, 1]), (36, vec![0, 1])]);
        assert_eq!(robot_isolation(&log, 2, 100), vec![4.0, 4.0]);
    }

    #[test]
    fn lonely_robot_scores_the_horizon() {
        let log = log_with_meetings(3, &[(4, vec![0, 1]), (8, vec![0, 1])]);
        assert_eq!(robot_isolation(&log, 3, 64), vec![1.0, 1.0, 64.0]);
        let s = isolation_stats(&[log], 3, 64).unwrap();
        assert_eq!(s.max_isolation, 64.0);
        assert_eq!(s.min_isolation, 1.0);
        assert_eq!(s.avg_isolation, 22.0);
    }

    #[test]
    fn two_robots_share_statistics() {
        let log = log_with_meetings(2, &[(4, vec![0, 1]), (20, vec![0, 1]), (28, vec![0, 1])]);
        let s = isolation_stats(&[log], 2, 100).unwrap();
        assert_eq!(s.max_isolation, s.avg_isolation);
        assert_eq!(s.min_isolation, s.avg_isolation);
    }

    #[test]
    fn isolation_errors() {
        assert_eq!(
            isolation_stats(&[], 1, 10),
            Err(MetricsError::TooFewRobots(1))
        );
        assert_eq!(isolation_stats(&[], 2, 10), Err(MetricsError::NoLogs));
        let log = log_with_meetings(3, &[]);
        assert!(matches!(
            isolation_stats(&[log], 2, 10),
            Err(MetricsError::RobotMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_mean_and_caps() {
        let g = GridSpec::square(3).unwrap();
        let all_capped = vec![36.0; 9];
        let s = broadcast_stats(&all_capped, &g, 36.0, false).unwrap();
        assert_eq!((s.mean_broadcast, s.cap_hits, s.trials), (36.0, 9, 9));
        let s = broadcast_stats(&[4.0, 6.0], &g, 36.0, true).unwrap();
        assert_eq!(s.mean_broadcast, 5.0);
        assert!(broadcast_stats(&[4.0, 6.0], &g, 36.0, false).is_err());
    }
}
