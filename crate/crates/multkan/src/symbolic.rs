//! Symbolic regression on trained edges.
//!
//! Each spline edge is matched against a library of primitives under the
//! affine family `y = c*f(a*x + b) + d`: (a, b) by a coarse grid search over
//! a range-normalized box with coordinate-descent refinement, (c, d) in
//! closed form. Candidates rank by rounded r2 first so that near-ties break
//! toward simpler functions. Locked edges switch to symbolic-only mode, and
//! a fully symbolic network collapses into an expression tree.

use crate::expr::{canonicalize, ExprTree};
use crate::model::{EdgeId, EdgeMode, ModelError, MultKanModel, SymbolicSpec};
use crate::primitives::{GuardMode, Primitive, PrimitiveLibrary, ALL_PRIMITIVES};
use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Digits of r2 kept when ranking fits; ties then break by complexity.
pub const R2_RANK_DIGITS: i32 = 3;

// Coarse (a, b) search: GRID_POINTS^2 cells over the range-normalized box
// [-GRID_SPAN, GRID_SPAN]^2.
const GRID_POINTS: usize = 41;
const GRID_SPAN: f64 = 10.0;
const REFINE_ITERS: usize = 60;
// Singular primitives are fit only on arguments this far from their pole.
const POLE_BAND: f64 = 1e-2;
const PROBE_COUNT: usize = 100;

#[derive(Debug, Error)]
pub enum SymbolicError {
    #[error("no cached activations; run a forward pass with the cache kept")]
    NoCache,
    #[error("degenerate input range on edge {0:?}: all cached samples equal")]
    DegenerateInput(EdgeId),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("model is not fully symbolic; spline edges remain: {0}")]
    NotFullySymbolic(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One fitted primitive: `y = c*f(a*x + b) + d` with its quality of fit.
#[derive(Debug, Clone)]
pub struct SymbolicFitResult {
    pub name: &'static str,
    pub prim: Primitive,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2: f64,
    pub complexity: u8,
}

impl SymbolicFitResult {
    fn spec(&self) -> SymbolicSpec {
        SymbolicSpec::new(self.prim, self.a, self.b, self.c, self.d)
    }
}

/// Fit every library primitive to one edge's cached samples and return the
/// `top_k` candidates, best first.
pub fn suggest_symbolic(
    model: &MultKanModel,
    id: EdgeId,
    library: &PrimitiveLibrary,
    top_k: usize,
) -> Result<Vec<SymbolicFitResult>, SymbolicError> {
    let (xs, ys) = edge_samples(model, id)?;
    let (mu, w) = sample_window(&xs).ok_or(SymbolicError::DegenerateInput(id))?;
    let mut fits: Vec<SymbolicFitResult> = library
        .entries()
        .iter()
        .filter_map(|&prim| fit_primitive(prim, &xs, &ys, mu, w))
        .collect();
    rank(&mut fits);
    fits.truncate(top_k);
    Ok(fits)
}

/// Lock one edge to a named primitive. With `fit_affine` the affine
/// parameters come from the cached samples (returned for inspection);
/// without it the edge becomes plain `f(x)`.
pub fn fix_symbolic(
    model: &mut MultKanModel,
    id: EdgeId,
    name: &str,
    fit_affine: bool,
) -> Result<Option<SymbolicFitResult>, SymbolicError> {
    let prim = find_primitive(name).ok_or_else(|| SymbolicError::UnknownPrimitive(name.into()))?;
    let fit = if fit_affine {
        let (xs, ys) = edge_samples(model, id)?;
        let (mu, w) = sample_window(&xs).ok_or(SymbolicError::DegenerateInput(id))?;
        Some(
            fit_primitive(prim, &xs, &ys, mu, w)
                .ok_or(SymbolicError::DegenerateInput(id))?,
        )
    } else {
        None
    };
    let spec = fit
        .as_ref()
        .map(SymbolicFitResult::spec)
        .unwrap_or_else(|| SymbolicSpec::new(prim, 1.0, 0.0, 1.0, 0.0));
    let edge = model.edge_at_mut(id)?;
    edge.symbolic = Some(spec);
    edge.mode = EdgeMode::SymbolicOnly;
    model.cache = None;
    Ok(fit)
}

/// Undo [`fix_symbolic`]: drop the symbolic branch and make the spline (and
/// its silu residual) the edge's function again. The spline coefficients
/// were never touched, so the pre-fix outputs come back bit-exact.
pub fn unfix_symbolic(model: &mut MultKanModel, id: EdgeId) -> Result<(), SymbolicError> {
    let edge = model.edge_at_mut(id)?;
    edge.symbolic = None;
    edge.mode = EdgeMode::SplineOnly;
    model.cache = None;
    Ok(())
}

/// Per-edge outcome of [`auto_symbolic`].
#[derive(Debug, Clone)]
pub struct AutoChoice {
    pub id: EdgeId,
    pub fit: SymbolicFitResult,
}

#[derive(Debug, Clone, Default)]
pub struct AutoReport {
    pub chosen: Vec<AutoChoice>,
    /// Edges whose best fit stayed under the floor, with that best r2.
    pub unresolved: Vec<(EdgeId, f64)>,
}

/// Symbolify every active spline edge whose best fit reaches `r2_floor`.
/// Edges below the floor are left alone and reported.
pub fn auto_symbolic(
    model: &mut MultKanModel,
    library: &PrimitiveLibrary,
    r2_floor: f64,
) -> Result<AutoReport, SymbolicError> {
    let targets: Vec<EdgeId> = model
        .edge_ids()
        .into_iter()
        .filter(|&id| {
            let edge = model.edge_at(id).expect("edge_ids yields valid ids");
            edge.is_active() && edge.mode != EdgeMode::SymbolicOnly
        })
        .collect();
    let mut report = AutoReport::default();
    if targets.is_empty() {
        return Ok(report);
    }
    // All fits read the pre-symbolification activations; edges are only
    // rewritten afterwards so earlier choices cannot skew later ones.
    for id in targets {
        match suggest_symbolic(model, id, library, 1)?.into_iter().next() {
            Some(top) if top.r2 >= r2_floor => report.chosen.push(AutoChoice { id, fit: top }),
            Some(top) => report.unresolved.push((id, top.r2)),
            None => report.unresolved.push((id, f64::NEG_INFINITY)),
        }
    }
    for choice in &report.chosen {
        let edge = model.edge_at_mut(choice.id)?;
        edge.symbolic = Some(choice.fit.spec());
        edge.mode = EdgeMode::SymbolicOnly;
    }
    model.cache = None;
    Ok(report)
}

/// Collapse a fully symbolic model into one expression tree per output.
///
/// Coefficients are rounded to `round_digits` decimal places when doing so
/// keeps the probe error within twice the unrounded error; otherwise the
/// full-precision tree is returned.
pub fn extract_formula(
    model: &MultKanModel,
    round_digits: u32,
) -> Result<Vec<ExprTree>, SymbolicError> {
    let offenders: Vec<EdgeId> = model
        .edge_ids()
        .into_iter()
        .filter(|&id| {
            let edge = model.edge_at(id).expect("edge_ids yields valid ids");
            edge.is_active() && (edge.mode != EdgeMode::SymbolicOnly || edge.symbolic.is_none())
        })
        .collect();
    if !offenders.is_empty() {
        let list = offenders
            .iter()
            .map(|id| format!("({},{},{})", id.layer, id.in_node, id.out_subnode))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(SymbolicError::NotFullySymbolic(list));
    }
    let exact = compose(model, None);
    let rounded = compose(model, Some(round_digits));
    let (err_exact, err_rounded, n_valid) = probe_errors(model, &exact, &rounded);
    if n_valid > 0 && err_rounded <= 2.0 * err_exact {
        Ok(rounded)
    } else {
        Ok(exact)
    }
}

fn find_primitive(name: &str) -> Option<Primitive> {
    ALL_PRIMITIVES
        .into_iter()
        .find(|p| p.display_name() == name || p.fn_token() == Some(name))
}

fn edge_samples(model: &MultKanModel, id: EdgeId) -> Result<(Vec<f64>, Vec<f64>), SymbolicError> {
    model.edge_at(id)?;
    let cache = model.cache.as_ref().ok_or(SymbolicError::NoCache)?;
    let xs = cache.nodes[id.layer].column(id.in_node).to_vec();
    let n_out = model.layers[id.layer].kan.n_out;
    let ys = cache.edge_out[id.layer]
        .column(id.in_node * n_out + id.out_subnode)
        .to_vec();
    Ok((xs, ys))
}

// Center and half-width of the cached inputs; None when they collapse to a
// point.
fn sample_window(xs: &[f64]) -> Option<(f64, f64)> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w = 0.5 * (hi - lo);
    if !(w > 1e-9) {
        return None;
    }
    Some((0.5 * (lo + hi), w))
}

// Grid coordinates are in range-normalized units: u = an*(x - mu)/w + bn.
fn denormalize(an: f64, bn: f64, mu: f64, w: f64) -> (f64, f64) {
    let a = an / w;
    (a, bn - a * mu)
}

fn fit_primitive(
    prim: Primitive,
    xs: &[f64],
    ys: &[f64],
    mu: f64,
    w: f64,
) -> Option<SymbolicFitResult> {
    let step = 2.0 * GRID_SPAN / (GRID_POINTS - 1) as f64;
    let mut best: Option<(f64, f64, f64, f64, f64)> = None;
    for ia in 0..GRID_POINTS {
        let an = -GRID_SPAN + ia as f64 * step;
        for ib in 0..GRID_POINTS {
            let bn = -GRID_SPAN + ib as f64 * step;
            let (a, b) = denormalize(an, bn, mu, w);
            if let Some((c, d, r2)) = fit_affine_out(prim, xs, ys, a, b) {
                if best.map_or(true, |(r, ..)| r2 > r) {
                    best = Some((r2, an, bn, c, d));
                }
            }
        }
    }
    let (mut r2, mut an, mut bn, mut c, mut d) = best?;
    let mut h = step;
    for _ in 0..REFINE_ITERS {
        let mut improved = false;
        for (da, db) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
            let (a, b) = denormalize(an + da, bn + db, mu, w);
            if let Some((cc, dd, rr)) = fit_affine_out(prim, xs, ys, a, b) {
                if rr > r2 {
                    (r2, an, bn, c, d) = (rr, an + da, bn + db, cc, dd);
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
            if h < 1e-7 {
                break;
            }
        }
    }
    let (a, b) = denormalize(an, bn, mu, w);
    Some(SymbolicFitResult {
        name: prim.display_name(),
        prim,
        a,
        b,
        c,
        d,
        r2,
        complexity: prim.complexity(),
    })
}

// Closed-form (c, d) plus r2 for fixed (a, b). Samples inside a singular
// primitive's guard band are excluded; a fit that loses most of them is
// discarded.
fn fit_affine_out(prim: Primitive, xs: &[f64], ys: &[f64], a: f64, b: f64) -> Option<(f64, f64, f64)> {
    let mut v = Vec::with_capacity(xs.len());
    let mut kept = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        let u = a * x + b;
        if !prim.arg_clear_of_poles(u, POLE_BAND) {
            continue;
        }
        match prim.eval(u, GuardMode::Strict) {
            Ok(val) if val.is_finite() => {
                v.push(val);
                kept.push(y);
            }
            _ => continue,
        }
    }
    if v.len() < 4 || v.len() < xs.len() / 4 {
        return None;
    }
    Some(linear_regression(&v, &kept))
}

// Least squares for y = c*v + d; returns (c, d, r2).
fn linear_regression(v: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let vm = v.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut svv, mut svy, mut syy) = (0.0, 0.0, 0.0);
    for (&vi, &yi) in v.iter().zip(y) {
        let dv = vi - vm;
        let dy = yi - ym;
        svv += dv * dv;
        svy += dv * dy;
        syy += dy * dy;
    }
    let c = if svv > 1e-30 { svy / svv } else { 0.0 };
    let d = ym - c * vm;
    if syy <= 1e-30 {
        // Constant target: any primitive fits it exactly through c = 0.
        return (c, d, 1.0);
    }
    let ssr = (syy - c * svy).max(0.0);
    (c, d, 1.0 - ssr / syy)
}

// Rounded r2 descending, then complexity ascending, then name.
fn rank(fits: &mut [SymbolicFitResult]) {
    let scale = 10f64.powi(R2_RANK_DIGITS);
    fits.sort_by(|x, y| {
        let rx = (x.r2 * scale).round();
        let ry = (y.r2 * scale).round();
        ry.partial_cmp(&rx)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.complexity.cmp(&y.complexity))
            .then(x.name.cmp(y.name))
    });
}

// Build one expression tree per output by composing edge affines along the
// graph. Trivial constants disappear in canonicalization.
fn compose(model: &MultKanModel, digits: Option<u32>) -> Vec<ExprTree> {
    let rnd = |v: f64| match digits {
        Some(dg) => {
            let s = 10f64.powi(dg as i32);
            (v * s).round() / s
        }
        None => v,
    };
    let mut nodes: Vec<ExprTree> = (0..model.n_inputs()).map(ExprTree::Var).collect();
    for layer in &model.layers {
        let kan = &layer.kan;
        let subs: Vec<ExprTree> = (0..kan.n_out)
            .map(|j| {
                let mut terms = Vec::new();
                for i in 0..kan.n_in {
                    let edge = kan.edge(i, j);
                    if !edge.is_active() {
                        continue;
                    }
                    let s = edge.symbolic.as_ref().expect("extract checked symbolic modes");
                    let u = ExprTree::Sum(vec![
                        ExprTree::Product(vec![ExprTree::Const(rnd(s.a)), nodes[i].clone()]),
                        ExprTree::Const(rnd(s.b)),
                    ]);
                    terms.push(ExprTree::Sum(vec![
                        ExprTree::Product(vec![
                            ExprTree::Const(rnd(s.c)),
                            ExprTree::unary(s.prim, u),
                        ]),
                        ExprTree::Const(rnd(s.d)),
                    ]));
                }
                match terms.len() {
                    0 => ExprTree::Const(0.0),
                    1 => terms.pop().unwrap(),
                    _ => ExprTree::Sum(terms),
                }
            })
            .collect();
        let mult = &layer.mult;
        let mut next: Vec<ExprTree> = subs[..mult.n_add].to_vec();
        let mut at = mult.n_add;
        for &arity in &mult.arities {
            next.push(ExprTree::Product(subs[at..at + arity].to_vec()));
            at += arity;
        }
        nodes = next;
    }
    nodes.into_iter().map(canonicalize).collect()
}

// Max |tree - model| for both trees over random probes in the grid box.
// Probes where the model or a tree leaves its domain are skipped.
fn probe_errors(model: &MultKanModel, exact: &[ExprTree], rounded: &[ExprTree]) -> (f64, f64, usize) {
    let spec = model.grid_spec;
    let dist = Uniform::new(spec.lo, spec.hi);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f0e);
    let names = &model.input_names;
    let (mut err_exact, mut err_rounded, mut n_valid) = (0.0f64, 0.0f64, 0);
    for _ in 0..PROBE_COUNT {
        let point: Vec<f64> = (0..model.n_inputs()).map(|_| dist.sample(&mut rng)).collect();
        let x = Array2::from_shape_vec((1, point.len()), point.clone()).expect("probe shape");
        let Ok(y) = model.forward_strict(&x) else { continue };
        for (o, (te, tr)) in exact.iter().zip(rounded).enumerate() {
            let (Ok(ve), Ok(vr)) = (te.eval(&point, names), tr.eval(&point, names)) else {
                continue;
            };
            err_exact = err_exact.max((ve - y[[0, o]]).abs());
            err_rounded = err_rounded.max((vr - y[[0, o]]).abs());
            n_valid += 1;
        }
    }
    (err_exact, err_rounded, n_valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kanpiler::compile_formula;
    use crate::model::{GridSpec, WidthSpec};
    use crate::spline::fit_least_squares;
    use ndarray::Array2;

    // Single-edge model whose spline is least-squares fit to `f`, with the
    // cache populated from a fresh forward pass over the samples.
    fn edge_model(
        f: impl Fn(f64) -> f64,
        lo: f64,
        hi: f64,
        n: usize,
    ) -> (MultKanModel, Vec<f64>) {
        let spec = GridSpec { size: 25, order: 3, lo, hi };
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, spec, 0, false).unwrap();
        let xs: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let edge = model.layers[0].kan.edge_mut(0, 0);
        edge.base_scale = 0.0;
        edge.spline_scale = 1.0;
        edge.spline = fit_least_squares(&xs, &ys, &spec.grid().unwrap()).unwrap();
        let x = Array2::from_shape_vec((n, 1), xs.clone()).unwrap();
        model.forward(&x, true).unwrap();
        (model, xs)
    }

    fn top_edge() -> EdgeId {
        EdgeId::new(0, 0, 0)
    }

    #[test]
    fn cosine_edge_puts_cos_in_the_top_two() {
        let (model, _) = edge_model(f64::cos, -std::f64::consts::PI, std::f64::consts::PI, 256);
        let fits = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 5).unwrap();
        let cos_rank = fits.iter().position(|f| f.prim == Primitive::Cos);
        assert!(cos_rank.is_some_and(|r| r < 2), "cos not in top two: {fits:?}");
        assert!(fits[cos_rank.unwrap()].r2 > 0.999);
    }

    #[test]
    fn linear_edge_ranks_identity_first_by_simplicity() {
        let (model, _) = edge_model(|x| 0.8 * x + 0.1, -1.0, 1.0, 200);
        let fits = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 5).unwrap();
        assert_eq!(fits[0].prim, Primitive::Identity, "{fits:?}");
        assert!(fits[0].r2 > 0.9999);
        // More flexible primitives tie at the rounded r2; simplicity decides.
        assert!(fits[1].r2 > 0.999);
    }

    #[test]
    fn ranking_is_sorted_by_rounded_r2_then_complexity_then_name() {
        let (model, _) = edge_model(|x| (2.0 * x).tanh(), -2.0, 2.0, 200);
        let fits = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 20).unwrap();
        let scale = 10f64.powi(R2_RANK_DIGITS);
        for pair in fits.windows(2) {
            let ra = (pair[0].r2 * scale).round();
            let rb = (pair[1].r2 * scale).round();
            assert!(
                ra > rb
                    || (ra == rb && pair[0].complexity < pair[1].complexity)
                    || (ra == rb
                        && pair[0].complexity == pair[1].complexity
                        && pair[0].name <= pair[1].name),
                "order violated: {:?} before {:?}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn reported_r2_matches_an_independent_recomputation() {
        let (model, xs) = edge_model(|x| (x * 1.7 - 0.3).sin() * 1.2 + 0.4, -2.0, 2.0, 300);
        let (_, ys) = edge_samples(&model, top_edge()).unwrap();
        let fits = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 8).unwrap();
        for fit in &fits {
            let mut kept = Vec::new();
            let mut pred = Vec::new();
            for (&x, &y) in xs.iter().zip(&ys) {
                let u = fit.a * x + fit.b;
                if !fit.prim.arg_clear_of_poles(u, POLE_BAND) {
                    continue;
                }
                if let Ok(v) = fit.prim.eval(u, GuardMode::Strict) {
                    pred.push(fit.c * v + fit.d);
                    kept.push(y);
                }
            }
            let ym = kept.iter().sum::<f64>() / kept.len() as f64;
            let sst: f64 = kept.iter().map(|y| (y - ym) * (y - ym)).sum();
            let ssr: f64 = kept
                .iter()
                .zip(&pred)
                .map(|(y, p)| (y - p) * (y - p))
                .sum();
            let r2 = 1.0 - ssr / sst;
            assert!(
                (fit.r2 - r2).abs() < 1e-9,
                "{}: reported {} recomputed {}",
                fit.name,
                fit.r2,
                r2
            );
        }
    }

    #[test]
    fn sine_fit_matches_a_dense_grid_oracle() {
        let (model, xs) = edge_model(|x| 2.0 * (3.0 * x + 1.0).sin() - 0.5, -2.0, 2.0, 240);
        let (_, ys) = edge_samples(&model, top_edge()).unwrap();
        let fits = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 5).unwrap();
        let got = fits.iter().find(|f| f.prim == Primitive::Sin).expect("sin in top five");

        // Brute force: dense (a, b) grid over the same normalized box, (c, d)
        // by explicit normal equations, no refinement.
        let dense = 321;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0);
        for ia in 0..dense {
            let an = -10.0 + 20.0 * ia as f64 / (dense - 1) as f64;
            let a = an / 2.0;
            for ib in 0..dense {
                let b = -10.0 + 20.0 * ib as f64 / (dense - 1) as f64;
                let n = xs.len() as f64;
                let (mut sv, mut sy, mut svv, mut svy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (&x, &y) in xs.iter().zip(&ys) {
                    let v = (a * x + b).sin();
                    sv += v;
                    sy += y;
                    svv += v * v;
                    svy += v * y;
                    syy += y * y;
                }
                let cvv = svv - sv * sv / n;
                let cvy = svy - sv * sy / n;
                let cyy = syy - sy * sy / n;
                if cvv < 1e-12 {
                    continue;
                }
                let c = cvy / cvv;
                let d = (sy - c * sv) / n;
                let r2 = 1.0 - (cyy - c * cvy).max(0.0) / cyy;
                if r2 > best.0 {
                    best = (r2, a, b, c, d);
                }
            }
        }

        // sin has two equivalent parameterizations; fold both fits onto
        // a > 0 and b in (-pi, pi].
        let fold = |a: f64, b: f64, c: f64, d: f64| {
            let (a, mut b, c) = if a < 0.0 { (-a, -b, -c) } else { (a, b, c) };
            let tau = std::f64::consts::TAU;
            b -= tau * (b / tau).round();
            (a, b, c, d)
        };
        let (ga, gb, gc, gd) = fold(got.a, got.b, got.c, got.d);
        let (oa, ob, oc, od) = fold(best.1, best.2, best.3, best.4);
        for (g, o) in [(ga, oa), (gb, ob), (gc, oc), (gd, od)] {
            assert!((g - o).abs() <= 0.05 * o.abs(), "fit {g} vs oracle {o}");
        }
        // And both sit on the generating parameters.
        for (v, want) in [(ga, 3.0), (gb, 1.0), (gc, 2.0), (gd, -0.5)] {
            assert!((v - want).abs() <= 0.05 * want.abs(), "{v} vs {want}");
        }
    }

    #[test]
    fn degenerate_input_range_is_an_error() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 3, false).unwrap();
        let x = Array2::from_elem((50, 1), 0.25);
        model.forward(&x, true).unwrap();
        let err = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 3);
        assert!(matches!(err, Err(SymbolicError::DegenerateInput(_))));
    }

    #[test]
    fn missing_cache_is_an_error() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let model = MultKanModel::init(&width, GridSpec::default(), 3, false).unwrap();
        let err = suggest_symbolic(&model, top_edge(), &PrimitiveLibrary::default(), 3);
        assert!(matches!(err, Err(SymbolicError::NoCache)));
    }

    #[test]
    fn fixing_identity_passes_inputs_through_exactly() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 9, false).unwrap();
        fix_symbolic(&mut model, top_edge(), "x", false).unwrap();
        let x = Array2::from_shape_vec((4, 1), vec![-0.9, -0.2, 0.3, 0.8]).unwrap();
        let y = model.forward_strict(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fix_then_unfix_restores_spline_outputs_bit_exact() {
        let (mut model, xs) = edge_model(|x| x * x - 0.2, -1.5, 1.5, 120);
        let x = Array2::from_shape_vec((xs.len(), 1), xs).unwrap();
        let before = model.forward_strict(&x).unwrap();
        model.forward(&x, true).unwrap();
        fix_symbolic(&mut model, top_edge(), "x^2", true).unwrap();
        let fixed = model.forward_strict(&x).unwrap();
        assert_ne!(before, fixed);
        unfix_symbolic(&mut model, top_edge()).unwrap();
        let after = model.forward_strict(&x).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn fix_symbolic_leaves_every_other_edge_alone() {
        let width = WidthSpec::from_pairs(&[(2, 0), (3, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 21, false).unwrap();
        let snapshot = model.clone();
        fix_symbolic(&mut model, EdgeId::new(0, 1, 2), "sin", false).unwrap();
        for id in model.edge_ids() {
            if id == EdgeId::new(0, 1, 2) {
                continue;
            }
            assert_eq!(
                model.edge_at(id).unwrap(),
                snapshot.edge_at(id).unwrap(),
                "edge {id:?} changed"
            );
        }
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 9, false).unwrap();
        let err = fix_symbolic(&mut model, top_edge(), "sinh", false);
        assert!(matches!(err, Err(SymbolicError::UnknownPrimitive(_))));
    }

    #[test]
    fn auto_symbolic_is_a_no_op_on_a_symbolic_model() {
        let names: Vec<String> = vec!["x1".into(), "x2".into()];
        let mut model = compile_formula("x1*x2", &names, GridSpec::default()).unwrap();
        let snapshot = model.clone();
        let report = auto_symbolic(&mut model, &PrimitiveLibrary::default(), 0.9).unwrap();
        assert!(report.chosen.is_empty());
        assert!(report.unresolved.is_empty());
        assert_eq!(model.layers, snapshot.layers);
    }

    #[test]
    fn extract_returns_the_input_for_an_identity_edge() {
        let names: Vec<String> = vec!["x1".into()];
        let model = compile_formula("x1", &names, GridSpec::default()).unwrap();
        let trees = extract_formula(&model, 6).unwrap();
        assert_eq!(trees, vec![ExprTree::Var(0)]);
        assert_eq!(trees[0].print(&names), "x1");
    }

    #[test]
    fn extract_rejects_spline_edges_and_names_them() {
        let width = WidthSpec::from_pairs(&[(2, 0), (1, 0)]);
        let model = MultKanModel::init(&width, GridSpec::default(), 5, false).unwrap();
        match extract_formula(&model, 6) {
            Err(SymbolicError::NotFullySymbolic(list)) => {
                assert!(list.contains("(0,0,0)") && list.contains("(0,1,0)"), "{list}");
            }
            other => panic!("expected NotFullySymbolic, got {other:?}"),
        }
    }

    #[test]
    fn extract_inverts_compilation_on_probe_points() {
        let cases: &[(&str, &[&str], &[(f64, f64)])] = &[
            ("sin(x1) + exp(x2)", &["x1", "x2"], &[(-2.0, 2.0), (-2.0, 2.0)]),
            ("m0/sqrt(1 - (v/c)^2)", &["m0", "v", "c"], &[(0.5, 2.0), (-0.9, 0.9), (1.0, 2.0)]),
            (
                "q*(Ef + v*B*sin(theta))",
                &["q", "Ef", "v", "B", "theta"],
                &[(0.5, 1.5), (0.5, 1.5), (0.5, 1.5), (0.5, 1.5), (0.2, 2.9)],
            ),
            ("sqrt(x1^2 + x2^2)", &["x1", "x2"], &[(-2.0, 2.0), (-2.0, 2.0)]),
            (
                "kb*T*log(n2/n1)",
                &["kb", "T", "n2", "n1"],
                &[(0.5, 2.0), (0.5, 2.0), (0.5, 2.0), (0.5, 2.0)],
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (formula, inputs, ranges) in cases {
            let names: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
            let source = crate::expr::parse_formula(formula, &names).unwrap();
            let model = compile_formula(formula, &names, GridSpec::default()).unwrap();
            let trees = extract_formula(&model, 6).unwrap();
            assert_eq!(trees.len(), 1);
            for _ in 0..100 {
                let point: Vec<f64> = ranges
                    .iter()
                    .map(|(lo, hi)| Uniform::new(*lo, *hi).sample(&mut rng))
                    .collect();
                let want = source.eval(&point, &names).unwrap();
                let got = trees[0].eval(&point, &names).unwrap();
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "`{formula}` at {point:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn extracted_formulas_reparse_in_the_same_grammar() {
        let names: Vec<String> = vec!["x1".into(), "x2".into()];
        let model = compile_formula("2*sin(x1) + x2^2 - 0.5", &names, GridSpec::default()).unwrap();
        let trees = extract_formula(&model, 6).unwrap();
        let printed = trees[0].print(&names);
        let reparsed = crate::expr::parse_formula(&printed, &names).unwrap();
        assert_eq!(reparsed, trees[0], "printed `{printed}`");
    }

    #[test]
    fn auto_symbolic_recovers_a_trained_product() {
        use crate::attribution::{compute_attribution, prune};
        use crate::dataset::Dataset;
        use crate::trainer::{train, TrainConfig};
        let width = WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 4, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dist = Uniform::new(-1.0, 1.0);
        let n = 500;
        let mut x = Array2::zeros((n, 2));
        for v in x.iter_mut() {
            *v = dist.sample(&mut rng);
        }
        let y = Array2::from_shape_vec(
            (n, 1),
            x.rows().into_iter().map(|r| r[0] * r[1]).collect(),
        )
        .unwrap();
        let names = vec!["x1".to_string(), "x2".to_string()];
        let data = Dataset::new(x.clone(), y.clone(), x.clone(), y.clone(), names).unwrap();
        let config = TrainConfig {
            steps: 250,
            optimizer: crate::trainer::OptimizerKind::Lbfgs,
            lambda_l1: 1e-4,
            grid_update_steps: vec![],
            ..TrainConfig::default()
        };
        train(&mut model, &data, &config).unwrap();

        // Cross edges carry no signal after training; prune them away, then
        // polish without the sparsity penalty so the surviving edges settle
        // onto the exactly linear solution before symbolifying.
        let scores = compute_attribution(&model, &x).unwrap();
        let mut model = prune(&model, &scores, 1e-2, 1e-2).unwrap();
        let polish = TrainConfig { lambda_l1: 0.0, ..config };
        let log = train(&mut model, &data, &polish).unwrap();
        let rmse = log.records.last().unwrap().train_loss;
        let before = model.forward(&x, true).unwrap();
        let report = auto_symbolic(&mut model, &PrimitiveLibrary::default(), 0.9).unwrap();
        assert!(report.unresolved.is_empty(), "unresolved: {:?}", report.unresolved);
        for choice in &report.chosen {
            assert_eq!(choice.fit.prim, Primitive::Identity, "{:?} (rmse {rmse})", choice.fit);
        }
        let after = model.forward_strict(&x).unwrap();
        let shift = (&after - &before).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!(shift < 1e-3, "symbolification moved outputs by {shift} rms");
        let err = (&after - &y).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!(err < 1e-3, "symbolic model is {err} rms from the product (rmse {rmse})");

        // The surviving formula is the product itself, coefficient near 1.
        let trees = extract_formula(&model, 6).unwrap();
        for probe in [[0.5, 0.5], [0.8, -0.6], [-0.7, -0.4]] {
            let got = trees[0].eval(&probe, &model.input_names).unwrap();
            let want = probe[0] * probe[1];
            assert!(
                (got - want).abs() < 1e-3,
                "extracted {got} vs {want} (rmse {rmse})"
            );
        }
    }
}
