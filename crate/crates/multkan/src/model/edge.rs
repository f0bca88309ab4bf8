//! Edge functions: the learnable 1D maps sitting on MultKAN edges.

use crate::primitives::{GuardMode, Primitive, PrimitiveError};
use crate::spline::{Extrapolation, Grid, SplineCurve, SplineError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
}

/// Which branches contribute to the edge output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    SplineOnly,
    SymbolicOnly,
    Both,
}

/// Symbolic part of an edge: y = c * f(a*x + b) + d.
///
/// The affine parameters are set by fitting or compilation and are not
/// touched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicSpec {
    pub prim: Primitive,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl SymbolicSpec {
    pub fn new(prim: Primitive, a: f64, b: f64, c: f64, d: f64) -> Self {
        SymbolicSpec { prim, a, b, c, d }
    }

    /// Value and first two input derivatives. Clamped arguments report zero
    /// derivatives, matching the spline convention.
    pub fn eval(&self, x: f64, guard: GuardMode) -> Result<(f64, f64, f64), PrimitiveError> {
        let u = self.a * x + self.b;
        let (f, f1, f2) = self.prim.eval_with_derivs(u, guard)?;
        Ok((self.c * f + self.d, self.c * self.a * f1, self.c * self.a * self.a * f2))
    }
}

/// Smooth residual basis b(x) = x * sigmoid(x) and its first two derivatives.
pub(crate) fn silu_with_derivs(x: f64) -> (f64, f64, f64) {
    let s = 1.0 / (1.0 + (-x).exp());
    let v = x * s;
    let d1 = s * (1.0 + x * (1.0 - s));
    let d2 = s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
    (v, d1, d2)
}

/// One learnable edge: masked mix of a residual term, a spline, and an
/// optional symbolic function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFunction {
    pub spline: SplineCurve,
    pub base_scale: f64,
    pub spline_scale: f64,
    /// 0 or 1. Zero kills the edge output entirely.
    pub mask: f64,
    pub frozen: bool,
    pub mode: EdgeMode,
    pub symbolic: Option<SymbolicSpec>,
    /// Set on edges created by the latest expansion; consumed by perturb.
    #[serde(default)]
    pub is_new: bool,
}

/// Everything the training backward pass needs from one edge evaluation.
#[derive(Debug, Clone, Default)]
pub(crate) struct EdgeEval {
    pub value: f64,
    pub dx: f64,
    pub dxx: f64,
    /// silu(x) and silu'(x); partials for base_scale.
    pub silu: (f64, f64),
    /// spline(x) and spline'(x); partials for spline_scale.
    pub spline: (f64, f64),
    /// dvalue/dcoef[start + r] = spline_scale * basis[r].
    pub basis_start: usize,
    pub basis: Vec<f64>,
    pub dbasis: Vec<f64>,
}

impl EdgeFunction {
    /// Dead edge: masked, zero coefficients, no residual term. Revealing it
    /// later (perturb) keeps the computed function unchanged.
    pub fn zeroed(grid: Grid) -> Self {
        EdgeFunction {
            spline: SplineCurve::zeros(grid),
            base_scale: 0.0,
            spline_scale: 1.0,
            mask: 0.0,
            frozen: false,
            mode: EdgeMode::SplineOnly,
            symbolic: None,
            is_new: false,
        }
    }

    /// Trainable edge with noisy spline coefficients.
    pub fn with_noise<R: Rng>(grid: Grid, std: f64, rng: &mut R) -> Self {
        let mut edge = EdgeFunction::zeroed(grid);
        let dist = Normal::new(0.0, std).expect("finite std");
        for c in edge.spline.coef.iter_mut() {
            *c = dist.sample(rng);
        }
        edge.base_scale = 1.0;
        edge.mask = 1.0;
        edge
    }

    /// Purely symbolic edge, as produced by compilation.
    pub fn symbolic(grid: Grid, spec: SymbolicSpec) -> Self {
        let mut edge = EdgeFunction::zeroed(grid);
        edge.mode = EdgeMode::SymbolicOnly;
        edge.symbolic = Some(spec);
        edge.mask = 1.0;
        edge
    }

    /// Exact pass-through edge.
    pub fn identity(grid: Grid) -> Self {
        EdgeFunction::symbolic(grid, SymbolicSpec::new(Primitive::Identity, 1.0, 0.0, 1.0, 0.0))
    }

    pub fn is_active(&self) -> bool {
        self.mask != 0.0
    }

    fn spline_branch_live(&self) -> bool {
        matches!(self.mode, EdgeMode::SplineOnly | EdgeMode::Both)
    }

    fn symbolic_branch_live(&self) -> bool {
        matches!(self.mode, EdgeMode::SymbolicOnly | EdgeMode::Both)
    }

    /// Edge output for one scalar input.
    pub fn value(&self, x: f64, extrap: Extrapolation, guard: GuardMode) -> Result<f64, EdgeError> {
        if !self.is_active() {
            return Ok(0.0);
        }
        let mut v = 0.0;
        if self.spline_branch_live() {
            v += self.base_scale * silu_with_derivs(x).0;
            v += self.spline_scale * self.spline.eval(x, 0, extrap)?;
        }
        if self.symbolic_branch_live() {
            let spec = self.symbolic.as_ref().expect("symbolic mode carries a spec");
            v += spec.eval(x, guard)?.0;
        }
        Ok(self.mask * v)
    }

    /// Full evaluation with input derivatives and parameter partials.
    pub(crate) fn eval_detailed(
        &self,
        x: f64,
        extrap: Extrapolation,
        guard: GuardMode,
    ) -> Result<EdgeEval, EdgeError> {
        let mut out = EdgeEval {
            value: 0.0,
            dx: 0.0,
            dxx: 0.0,
            silu: (0.0, 0.0),
            spline: (0.0, 0.0),
            basis_start: 0,
            basis: Vec::new(),
            dbasis: Vec::new(),
        };
        if !self.is_active() {
            return Ok(out);
        }
        if self.spline_branch_live() {
            let (bv, bd1, bd2) = silu_with_derivs(x);
            let q = self.spline.query(x, 2, extrap)?;
            out.value += self.base_scale * bv + self.spline_scale * q.value;
            out.dx += self.base_scale * bd1 + self.spline_scale * q.d1;
            out.dxx += self.base_scale * bd2 + self.spline_scale * q.d2;
            out.silu = (bv, bd1);
            out.spline = (q.value, q.d1);
            out.basis_start = q.start;
            if q.clamped {
                // Clamped basis values would leak a nonzero coefficient
                // gradient through a flat region; the fit sees the boundary
                // value instead.
                out.basis = q.basis;
                out.dbasis = vec![0.0; out.basis.len()];
            } else {
                out.basis = q.basis;
                out.dbasis = q.dbasis;
            }
        }
        if self.symbolic_branch_live() {
            let spec = self.symbolic.as_ref().expect("symbolic mode carries a spec");
            let (v, d1, d2) = spec.eval(x, guard)?;
            out.value += v;
            out.dx += d1;
            out.dxx += d2;
        }
        // mask is 1 here; masked edges returned the zero eval above.
        Ok(out)
    }
}
