//! Clamped B-spline basis on `[0, 1]` with equally spaced interior knots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    dim: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Builds a `dim`-function basis of the given degree (cubic is `3`).
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim < degree + 1 {
            return invalid(format!(
                "basis dimension {dim} is smaller than degree + 1 = {}",
                degree + 1
            ));
        }
        let spans = dim - degree;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        knots.extend(std::iter::repeat(0.0).take(degree + 1));
        for i in 1..spans {
            knots.push(i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(degree + 1));
        debug_assert_eq!(knots.len(), dim + degree + 1);
        Ok(Self { dim, degree, knots })
    }

    pub fn cubic(dim: usize) -> Result<Self> {
        Self::new(dim, 3)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index `s` of the knot span `[knots[s], knots[s+1])` containing `t`;
    /// `t = 1` is assigned to the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.dim - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[p] <= t < knots[last + 1]
        let (mut lo, mut hi) = (p, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of all `dim` basis functions at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return invalid(format!("spline argument {t} lies outside [0, 1]"));
        }
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let p = self.degree;
        let s = self.span(t);
        // Cox–de Boor triangle for the p + 1 functions supported on span s.
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[s + 1 - j];
            right[j] = self.knots[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, v) in n.into_iter().enumerate() {
            out[s - p + r] = v;
        }
    }

    /// `T × K` matrix whose row `h` is the basis evaluated at `grid[h]`.
    pub fn basis_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(grid.len(), self.dim);
        let mut row = vec![0.0; self.dim];
        for (h, &t) in grid.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return invalid(format!("grid point {h} = {t} lies outside [0, 1]"));
            }
            self.eval_into(t, &mut row);
            for (k, v) in row.iter().enumerate() {
                m[(h, k)] = *v;
            }
        }
        Ok(m)
    }
}

/// `T` equispaced points covering `[0, 1]` inclusive (a single point sits at 0).
pub fn equispaced_grid(t: usize) -> Vec<f64> {
    match t {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..t).map(|h| h as f64 / (t - 1) as f64).collect(),
    }
}
