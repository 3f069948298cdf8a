//! Dense row-major matrices and a power-iteration estimate of the largest
//! singular value.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `self * rhs` where `rhs` is given by sparse rows `(col, value)`.
    pub fn mul_sparse(&self, rhs: &[Vec<(usize, f64)>], rhs_cols: usize) -> DenseMatrix {
        assert_eq!(self.cols, rhs.len());
        let mut out = vec![0.0; self.rows * rhs_cols];
        out.par_chunks_mut(rhs_cols)
            .zip(self.data.par_chunks(self.cols))
            .for_each(|(dst, src)| {
                for (k, &a) in src.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for &(j, b) in &rhs[k] {
                        dst[j] += a * b;
                    }
                }
            });
        DenseMatrix {
            rows: self.rows,
            cols: rhs_cols,
            data: out,
        }
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        out.par_iter_mut()
            .zip(self.data.par_chunks(self.cols))
            .for_each(|(o, row)| *o = dot(row, v));
    }

    /// `selfᵀ * w`.
    pub fn tr_mul_vec(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, &wi) in self.data.chunks(self.cols).zip(w) {
            if wi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * wi;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// A matrix-free linear operator for power iteration.
pub trait LinearOperator {
    fn dims(&self) -> (usize, usize);
    fn apply(&self, v: &[f64], out: &mut [f64]);
    fn apply_transpose(&self, w: &[f64], out: &mut [f64]);
}

impl LinearOperator for DenseMatrix {
    fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.mul_vec(v, out)
    }

    fn apply_transpose(&self, w: &[f64], out: &mut [f64]) {
        self.tr_mul_vec(w, out)
    }
}

/// `P - J/n` for a square `P`, with `J` the all-ones matrix.
pub struct CenteredOperator<'a>(pub &'a DenseMatrix);

impl LinearOperator for CenteredOperator<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.0.mul_vec(v, out);
        let shift = v.iter().sum::<f64>() / self.0.rows as f64;
        out.iter_mut().for_each(|o| *o -= shift);
    }

    fn apply_transpose(&self, w: &[f64], out: &mut [f64]) {
        self.0.tr_mul_vec(w, out);
        let shift = w.iter().sum::<f64>() / self.0.cols as f64;
        out.iter_mut().for_each(|o| *o -= shift);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Stop as soon as the (always lower-bound) estimate reaches this value.
    pub stop_at_or_above: Option<f64>,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iter: 10_000,
            stop_at_or_above: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularEstimate {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `op` by power iteration on `AᵀA`.
///
/// `start` is used as the initial right vector and overwritten with the final
/// iterate, which lets callers warm-start a sequence of related problems.
/// Every iterate gives `‖Av‖ ≤ σ_max`, so the returned value never overshoots
/// beyond rounding.
pub fn largest_singular_value<A: LinearOperator>(
    op: &A,
    start: &mut Vec<f64>,
    cfg: PowerIterationConfig,
) -> SingularEstimate {
    let (rows, cols) = op.dims();
    if start.len() != cols || norm(start) == 0.0 {
        *start = default_start(cols);
    }
    let n0 = norm(start);
    start.iter_mut().for_each(|x| *x /= n0);

    let mut av = vec![0.0; rows];
    let mut atav = vec![0.0; cols];
    let mut sigma = 0.0f64;
    for iter in 1..=cfg.max_iter {
        op.apply(start, &mut av);
        let s = norm(&av);
        if s == 0.0 {
            return SingularEstimate {
                sigma: 0.0,
                iterations: iter,
                converged: true,
            };
        }
        let done = (s - sigma).abs() <= cfg.rel_tol * s;
        sigma = sigma.max(s);
        if done || cfg.stop_at_or_above.is_some_and(|cut| sigma >= cut) {
            return SingularEstimate {
                sigma,
                iterations: iter,
                converged: done,
            };
        }
        op.apply_transpose(&av, &mut atav);
        let m = norm(&atav);
        start.iter_mut().zip(&atav).for_each(|(x, &y)| *x = y / m);
    }
    SingularEstimate {
        sigma,
        iterations: cfg.max_iter,
        converged: false,
    }
}

/// Deterministic, non-constant start vector. Constant vectors lie in the
/// kernel of centered stochastic matrices, so they make a poor default.
fn default_start(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
            (x as f64 / (1u64 << 24) as f64) - 0.5 + 1e-3 * i as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn oracle_sigma(m: &DenseMatrix) -> f64 {
        let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
        d.singular_values().max()
    }

    #[test]
    fn matches_svd_on_small_matrices() {
        let cases = [
            DenseMatrix::from_row_major(2, 2, vec![3.0, 0.0, 0.0, -5.0]),
            DenseMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DenseMatrix::from_row_major(3, 3, vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5]),
        ];
        for m in cases {
            let mut v = Vec::new();
            let est = largest_singular_value(&m, &mut v, PowerIterationConfig::default());
            let want = oracle_sigma(&m);
            assert!(est.converged);
            assert!(
                (est.sigma - want).abs() <= 1e-5 * want,
                "{} vs {}",
                est.sigma,
                want
            );
        }
    }

    #[test]
    fn centered_operator_matches_explicit_subtraction() {
        let p = DenseMatrix::from_row_major(
            3,
            3,
            vec![0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5],
        );
        let mut explicit = p.clone();
        for i in 0..3 {
            for j in 0..3 {
                explicit.set(i, j, p.get(i, j) - 1.0 / 3.0);
            }
        }
        let mut v = Vec::new();
        let est = largest_singular_value(&CenteredOperator(&p), &mut v, Default::default());
        assert!((est.sigma - oracle_sigma(&explicit)).abs() < 1e-6);
        assert!((est.sigma - 0.25).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let m = DenseMatrix::zeros(4, 4);
        let mut v = Vec::new();
        assert_eq!(
            largest_singular_value(&m, &mut v, Default::default()).sigma,
            0.0
        );
    }

    #[test]
    fn early_stop_is_a_lower_bound() {
        let m = DenseMatrix::from_row_major(2, 2, vec![2.0, 1.0, 1.0, 3.0]);
        let mut v = Vec::new();
        let cfg = PowerIterationConfig {
            stop_at_or_above: Some(1.0),
            ..Default::default()
        };
        let est = largest_singular_value(&m, &mut v, cfg);
        assert!(est.sigma >= 1.0);
        assert!(est.sigma <= oracle_sigma(&m) + 1e-12);
    }

    #[test]
    fn sparse_product_matches_dense() {
        let a = DenseMatrix::from_row_major(2, 3, vec![1.0, 2.0, 0.0, 0.0, 1.0, 4.0]);
        let rhs = vec![vec![(0, 1.0)], vec![(1, 2.0), (0, 1.0)], vec![(1, -1.0)]];
        let p = a.mul_sparse(&rhs, 2);
        assert_eq!(p.as_slice(), &[3.0, 4.0, 1.0, -2.0]);
    }
}
