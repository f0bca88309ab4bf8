//! B-spline grids and curves, the learnable 1D functions living on KAN edges.
//!
//! A [`Grid`] is an extended knot vector for a degree-`k` spline with `G`
//! interior intervals: `G + 2k + 1` knots, of which the outer `k` on each
//! side extrapolate the boundary spacing. The associated basis has `G + k`
//! functions and the curve domain is the interior span `[t_k, t_{k+G}]`.
//! Evaluation walks only the `k + 1` basis functions alive at the query
//! point; derivatives (orders 1 and 2) come from the knot-difference
//! recurrence rather than finite differences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ridge added to the normal-equation diagonal when fitting coefficients.
pub const FIT_RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("input {x} outside spline domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("grid needs at least one interval")]
    EmptyGrid,
    #[error("interior knots must be strictly increasing")]
    NonIncreasingKnots,
    #[error("sample range is degenerate (all inputs equal {0})")]
    DegenerateRange(f64),
    #[error("least-squares fit needs at least {need} samples, got {got}")]
    UnderDetermined { need: usize, got: usize },
    #[error("coefficient count {got} does not match basis count {want}")]
    CoefficientMismatch { got: usize, want: usize },
    #[error("normal equations are not positive definite")]
    IllConditioned,
}

/// Out-of-domain policy: clamp to the boundary (training) or reject (strict).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extrapolation {
    Clamp,
    Error,
}

/// Interior knot placement for new grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotPlacement {
    Uniform,
    /// Knots at sample quantiles; falls back to uniform when the samples
    /// cannot support strictly increasing knots.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    knots: Vec<f64>,
    num_intervals: usize,
    order: usize,
}

impl Grid {
    /// Uniform grid with `g` intervals of degree `k` over `[lo, hi]`.
    pub fn uniform(g: usize, k: usize, lo: f64, hi: f64) -> Result<Self, SplineError> {
        if g == 0 {
            return Err(SplineError::EmptyGrid);
        }
        if !(hi > lo) {
            return Err(SplineError::DegenerateRange(lo));
        }
        let h = (hi - lo) / g as f64;
        let knots = (0..g + 2 * k + 1)
            .map(|i| lo + (i as f64 - k as f64) * h)
            .collect();
        Ok(Grid { knots, num_intervals: g, order: k })
    }

    /// Grid whose interior knots sit at sample quantiles. Falls back to a
    /// uniform grid over the sample range when quantiles collide.
    pub fn from_samples(g: usize, k: usize, xs: &[f64], placement: KnotPlacement) -> Result<Self, SplineError> {
        if g == 0 {
            return Err(SplineError::EmptyGrid);
        }
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(SplineError::DegenerateRange(lo));
        }
        if placement == KnotPlacement::Uniform {
            return Self::uniform(g, k, lo, hi);
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mut interior = Vec::with_capacity(g + 1);
        for j in 0..=g {
            let pos = j as f64 / g as f64 * (n - 1) as f64;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let v = if i0 + 1 < n { sorted[i0] * (1.0 - frac) + sorted[i0 + 1] * frac } else { sorted[i0] };
            interior.push(v);
        }
        let min_gap = 1e-12 * (hi - lo);
        if interior.windows(2).any(|w| w[1] - w[0] <= min_gap) {
            return Self::uniform(g, k, lo, hi);
        }
        let ext = (hi - lo) / g as f64;
        let mut knots = Vec::with_capacity(g + 2 * k + 1);
        for j in (1..=k).rev() {
            knots.push(lo - j as f64 * ext);
        }
        knots.extend_from_slice(&interior);
        for j in 1..=k {
            knots.push(hi + j as f64 * ext);
        }
        Ok(Grid { knots, num_intervals: g, order: k })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn n_basis(&self) -> usize {
        self.num_intervals + self.order
    }

    /// Interior span `[t_k, t_{k+G}]` on which the curve is defined.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.order], self.knots[self.order + self.num_intervals])
    }

    /// Validate invariants after deserialization.
    pub fn validate(&self) -> Result<(), SplineError> {
        if self.num_intervals == 0 {
            return Err(SplineError::EmptyGrid);
        }
        if self.knots.len() != self.num_intervals + 2 * self.order + 1 {
            return Err(SplineError::NonIncreasingKnots);
        }
        let interior = &self.knots[self.order..=self.order + self.num_intervals];
        if interior.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SplineError::NonIncreasingKnots);
        }
        Ok(())
    }

    fn resolve(&self, x: f64, mode: Extrapolation) -> Result<f64, SplineError> {
        let (lo, hi) = self.domain();
        if x < lo || x > hi || !x.is_finite() {
            match mode {
                Extrapolation::Clamp => Ok(x.clamp(lo, hi)),
                Extrapolation::Error => Err(SplineError::OutOfDomain { x, lo, hi }),
            }
        } else {
            Ok(x)
        }
    }

    /// Span index `i` with `t_i <= x < t_{i+1}`, clamped to the interior.
    fn find_span(&self, x: f64) -> usize {
        let (k, g) = (self.order, self.num_intervals);
        if x >= self.knots[k + g] {
            return k + g - 1;
        }
        if x <= self.knots[k] {
            return k;
        }
        let idx = self.knots.partition_point(|&t| t <= x) - 1;
        idx.clamp(k, k + g - 1)
    }

    /// Non-zero basis values of degree `d <= k` at `x`; entry `r` is
    /// `B_{span-d+r, d}(x)`.
    fn basis_at_degree(&self, span: usize, x: f64, d: usize) -> Vec<f64> {
        let mut vals = vec![0.0; d + 1];
        vals[0] = 1.0;
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        for j in 1..=d {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Non-zero window of the basis and its first `max_order` derivatives at
    /// `x` (already in-domain). Returns `(start, b, db, d2b)`; each vector
    /// has `k + 1` entries for basis indices `start..start + k + 1`.
    pub(crate) fn basis_window(&self, x: f64, max_order: usize) -> (usize, Vec<f64>, Vec<f64>, Vec<f64>) {
        debug_assert!(max_order <= 2);
        let k = self.order;
        let span = self.find_span(x);
        let start = span - k;
        let b = self.basis_at_degree(span, x, k);
        let mut db = vec![0.0; k + 1];
        let mut d2b = vec![0.0; k + 1];
        // B'_{i,k} = k * ( B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1}) )
        let ratio = |vals: &[f64], first: usize, i: usize, deg: usize| -> f64 {
            if i < first || i > first + vals.len() - 1 {
                return 0.0;
            }
            let denom = self.knots[i + deg] - self.knots[i];
            if denom == 0.0 {
                0.0
            } else {
                vals[i - first] / denom
            }
        };
        if max_order >= 1 && k >= 1 {
            let bk1 = self.basis_at_degree(span, x, k - 1);
            let first = span - (k - 1);
            for (r, slot) in db.iter_mut().enumerate() {
                let i = start + r;
                *slot = k as f64 * (ratio(&bk1, first, i, k) - ratio(&bk1, first, i + 1, k));
            }
            if max_order >= 2 && k >= 2 {
                let bk2 = self.basis_at_degree(span, x, k - 2);
                let first2 = span - (k - 2);
                let d1_deg_km1 = |i: usize| -> f64 {
                    (k - 1) as f64 * (ratio(&bk2, first2, i, k - 1) - ratio(&bk2, first2, i + 1, k - 1))
                };
                for (r, slot) in d2b.iter_mut().enumerate() {
                    let i = start + r;
                    let lhs = {
                        let denom = self.knots[i + k] - self.knots[i];
                        if denom == 0.0 || i < first { 0.0 } else { d1_deg_km1(i) / denom }
                    };
                    let rhs = {
                        let denom = self.knots[i + 1 + k] - self.knots[i + 1];
                        if denom == 0.0 { 0.0 } else { d1_deg_km1(i + 1) / denom }
                    };
                    *slot = k as f64 * (lhs - rhs);
                }
            }
        }
        (start, b, db, d2b)
    }
}

/// Full-length basis vector (`G + k` entries) at `x`.
pub fn basis_eval(grid: &Grid, x: f64, mode: Extrapolation) -> Result<Vec<f64>, SplineError> {
    let x = grid.resolve(x, mode)?;
    let (start, b, _, _) = grid.basis_window(x, 0);
    let mut out = vec![0.0; grid.n_basis()];
    out[start..start + b.len()].copy_from_slice(&b);
    Ok(out)
}

/// A spline curve: grid plus one coefficient per basis function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineCurve {
    pub grid: Grid,
    pub coef: Vec<f64>,
}

/// Point evaluation of a curve with everything the training backward pass
/// needs: the live basis window, its derivatives, and the dotted values.
pub(crate) struct SplineQuery {
    pub start: usize,
    pub basis: Vec<f64>,
    pub dbasis: Vec<f64>,
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    /// True when the raw input was clamped onto the domain boundary; input
    /// derivatives are zero there.
    pub clamped: bool,
}

impl SplineCurve {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.n_basis();
        SplineCurve { grid, coef: vec![0.0; n] }
    }

    pub fn new(grid: Grid, coef: Vec<f64>) -> Result<Self, SplineError> {
        if coef.len() != grid.n_basis() {
            return Err(SplineError::CoefficientMismatch { got: coef.len(), want: grid.n_basis() });
        }
        Ok(SplineCurve { grid, coef })
    }

    /// Evaluate the curve or one of its first two derivatives.
    pub fn eval(&self, x: f64, deriv_order: usize, mode: Extrapolation) -> Result<f64, SplineError> {
        assert!(deriv_order <= 2, "spline derivatives supported up to order 2");
        let q = self.query(x, deriv_order, mode)?;
        Ok(match deriv_order {
            0 => q.value,
            1 => q.d1,
            _ => q.d2,
        })
    }

    pub(crate) fn query(&self, x: f64, max_order: usize, mode: Extrapolation) -> Result<SplineQuery, SplineError> {
        let resolved = self.grid.resolve(x, mode)?;
        let clamped = resolved != x;
        let (start, b, db, d2b) = self.grid.basis_window(resolved, max_order);
        let window = &self.coef[start..start + b.len()];
        let dot = |v: &[f64]| v.iter().zip(window).map(|(a, c)| a * c).sum::<f64>();
        let value = dot(&b);
        let d1 = if max_order >= 1 && !clamped { dot(&db) } else { 0.0 };
        let d2 = if max_order >= 2 && !clamped { dot(&d2b) } else { 0.0 };
        Ok(SplineQuery { start, basis: b, dbasis: db, value, d1, d2, clamped })
    }
}

/// Least-squares fit of spline coefficients to `(xs, ys)` via ridge-damped
/// normal equations. Needs at least `G + k` samples.
pub fn fit_least_squares(xs: &[f64], ys: &[f64], grid: &Grid) -> Result<SplineCurve, SplineError> {
    assert_eq!(xs.len(), ys.len());
    let n = grid.n_basis();
    if xs.len() < n {
        return Err(SplineError::UnderDetermined { need: n, got: xs.len() });
    }
    let mut ata = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let x = grid.resolve(x, Extrapolation::Clamp)?;
        let (start, b, _, _) = grid.basis_window(x, 0);
        for (r, &br) in b.iter().enumerate() {
            aty[start + r] += br * y;
            for (c, &bc) in b.iter().enumerate() {
                ata[(start + r) * n + (start + c)] += br * bc;
            }
        }
    }
    let max_diag = (0..n).map(|i| ata[i * n + i]).fold(0.0_f64, f64::max);
    let ridge = FIT_RIDGE * max_diag.max(1.0);
    for i in 0..n {
        ata[i * n + i] += ridge;
    }
    let coef = cholesky_solve(&mut ata, &mut aty, n)?;
    Ok(SplineCurve { grid: grid.clone(), coef })
}

/// Re-fit a curve onto a new grid with `new_g` intervals. The new domain is
/// the sample range; the new coefficients reproduce the old curve's values
/// at `xs`.
pub fn refine_grid(
    curve: &SplineCurve,
    new_g: usize,
    xs: &[f64],
    placement: KnotPlacement,
) -> Result<SplineCurve, SplineError> {
    let grid = Grid::from_samples(new_g, curve.grid.order(), xs, placement)?;
    let ys = xs
        .iter()
        .map(|&x| curve.eval(x, 0, Extrapolation::Clamp))
        .collect::<Result<Vec<_>, _>>()?;
    fit_least_squares(xs, &ys, &grid)
}

/// In-place Cholesky solve of `a x = b` for symmetric positive definite `a`.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>, SplineError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for t in 0..j {
            d -= a[j * n + t] * a[j * n + t];
        }
        if d <= 0.0 {
            return Err(SplineError::IllConditioned);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for t in 0..j {
                v -= a[i * n + t] * a[j * n + t];
            }
            a[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for t in 0..i {
            v -= a[i * n + t] * b[t];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for t in i + 1..n {
            v -= a[t * n + i] * b[t];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(b.to_vec())
}
