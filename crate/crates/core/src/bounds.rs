//! Closed-form idle, meeting and broadcast quantities for `k` random walkers
//! on a motion graph with `n` vertices.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("n must be positive")]
    NoCircles,
    #[error("k must be at least {min}, got {got}")]
    TooFewRobots { min: usize, got: usize },
    #[error("degree must exceed 2, got {0}")]
    BadDegree(f64),
}

/// Degree of interior vertices of a large grid motion graph.
pub const GRID_DEGREE: f64 = 16.0;

fn check(n: usize, k: usize, min_k: usize) -> Result<(), BoundsError> {
    if n == 0 {
        return Err(BoundsError::NoCircles);
    }
    if k < min_k {
        return Err(BoundsError::TooFewRobots { min: min_k, got: k });
    }
    Ok(())
}

/// Upper bound on idle time: `n/k + 1`.
pub fn idle_bound(n: usize, k: usize) -> Result<f64, BoundsError> {
    check(n, k, 1)?;
    Ok(n as f64 / k as f64 + 1.0)
}

/// `⌈n/k⌉`: steps within which a fixed vertex expects at least one visit.
pub fn expected_visit_window(n: usize, k: usize) -> Result<u64, BoundsError> {
    check(n, k, 1)?;
    Ok(n.div_ceil(k) as u64)
}

/// `⌈n^{k−1} / (n^{k−1} − (n−1)^{k−1})⌉`, evaluated as `1 + ⌈y / (1 − y)⌉`
/// with `y = (1 − 1/n)^{k−1}` computed through `ln_1p`/`exp_m1`, so large
/// `k` neither overflows nor cancels and the excess over 1 keeps full
/// relative precision.
pub fn isolation_bound(n: usize, k: usize) -> Result<u64, BoundsError> {
    check(n, k, 2)?;
    if n == 1 {
        return Ok(1);
    }
    let log_y = (k - 1) as f64 * (-1.0 / n as f64).ln_1p();
    let excess = log_y.exp() / -log_y.exp_m1();
    // The excess is a positive integer in some cases (k = 2 gives n - 1);
    // don't let rounding push those over to the next integer.
    let nearest = excess.round();
    let ceil = if nearest >= 1.0 && (excess - nearest).abs() <= 1e-12 * excess {
        nearest
    } else {
        excess.ceil()
    };
    Ok(1 + ceil as u64)
}

/// Asymptotic broadcast time of `k` walkers on a `delta`-regular graph:
/// `2 ln(k) (δ−1) n / (k (δ−2))`.
pub fn broadcast_regular_bound(n: usize, k: usize, delta: f64) -> Result<f64, BoundsError> {
    check(n, k, 2)?;
    if delta.is_nan() || delta <= 2.0 {
        return Err(BoundsError::BadDegree(delta));
    }
    let (n, k) = (n as f64, k as f64);
    Ok(2.0 * k.ln() * (delta - 1.0) * n / (k * (delta - 2.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub idle_bound: f64,
    pub expected_visit_window: u64,
    pub isolation_bound: Option<u64>,
    pub broadcast_regular_bound: Option<f64>,
}

/// Everything that is defined for `(n, k, delta)`; the meeting and broadcast
/// entries are absent for a single robot.
pub fn report(n: usize, k: usize, delta: f64) -> Result<BoundsReport, BoundsError> {
    Ok(BoundsReport {
        n,
        k,
        delta,
        idle_bound: idle_bound(n, k)?,
        expected_visit_window: expected_visit_window(n, k)?,
        isolation_bound: if k >= 2 {
            Some(isolation_bound(n, k)?)
        } else {
            None
        },
        broadcast_regular_bound: if k >= 2 {
            Some(broadcast_regular_bound(n, k, delta)?)
        } else {
            None
        },
    })
}
