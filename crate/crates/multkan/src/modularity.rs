//! Black-box modularity detection and anatomical reorganization.
//!
//! Three nested functional properties are tested numerically on an oracle
//! function through finite differences: additive/multiplicative separability
//! (zero cross-group Hessian entries), generalized separability (a partial
//! derivative ratio that factors across the split), and generalized symmetry
//! (the normalized in-group gradient direction ignores outside variables).
//! Separability implies generalized separability implies symmetry, and
//! [`tree_convert`] exploits the chain to grow a hierarchy of variable
//! groups. [`auto_swap`] works on the network itself, permuting neurons to
//! shorten attribution-weighted connections.
//!
//! Every test differentiates the oracle twice, so functions with
//! high-frequency noise (`f + eps*sin(x/eps)` style) are outside the
//! supported class.

use crate::attribution::{compute_attribution, AttributionError};
use crate::expr::{ExprError, ExprTree};
use crate::model::{ModelError, MultKanModel};
use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

// Probes with a gradient norm or function magnitude below this are skipped.
const FLAT_EPS: f64 = 1e-8;
// Probes sit at least this many finite-difference steps inside the box.
const PROBE_MARGIN: f64 = 3.0;
// Step fraction for first derivatives nested inside a Hessian stencil; it
// must be much smaller than the outer step or its truncation error shows up
// as fake curvature.
const GRAD_H: f64 = 1e-5;
// A derivative-ratio denominator below this fraction of its typical
// magnitude marks the point as singular.
const RATIO_FLOOR: f64 = 1e-3;
// Relative spread under which the derivative ratio counts as constant.
const CONST_RATIO_SPREAD: f64 = 1e-8;
// Batch and seed for the attribution scores behind auto_swap; the operation
// takes no data, so the batch is drawn from the model's own grid box.
const SWAP_BATCH: usize = 256;
const SWAP_SEED: u64 = 0xa11d;

#[derive(Debug, Error)]
pub enum ModularityError {
    #[error("{0}")]
    BadArgument(String),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// Deterministic scalar oracle over a domain box. Internals of the function
/// are never inspected; everything below works through evaluations.
#[derive(Clone)]
pub struct FunctionHandle {
    pub arity: usize,
    pub domain: Vec<(f64, f64)>,
    eval: Rc<dyn Fn(&[f64]) -> f64>,
}

impl FunctionHandle {
    pub fn new(
        domain: Vec<(f64, f64)>,
        f: impl Fn(&[f64]) -> f64 + 'static,
    ) -> Result<Self, ModularityError> {
        if domain.is_empty() {
            return Err(ModularityError::BadArgument("empty domain box".into()));
        }
        for &(lo, hi) in &domain {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ModularityError::BadArgument(format!("bad domain interval [{lo},{hi}]")));
            }
        }
        Ok(FunctionHandle { arity: domain.len(), domain, eval: Rc::new(f) })
    }

    /// Wrap an expression tree. Evaluation errors surface as NaN and the
    /// affected probe is skipped by the calling test.
    pub fn from_tree(
        tree: &ExprTree,
        names: &[String],
        domain: Vec<(f64, f64)>,
    ) -> Result<Self, ModularityError> {
        if domain.len() != names.len() {
            return Err(ModularityError::BadArgument(format!(
                "{} domain intervals for {} variables",
                domain.len(),
                names.len()
            )));
        }
        let tree = tree.clone();
        let names = names.to_vec();
        FunctionHandle::new(domain, move |x| tree.eval(x, &names).unwrap_or(f64::NAN))
    }

    /// Wrap a model as a single-output oracle over its grid box.
    pub fn from_model(model: &MultKanModel) -> Result<Self, ModularityError> {
        if model.n_outputs() != 1 {
            return Err(ModularityError::BadArgument(format!(
                "oracle must have one output, model has {}",
                model.n_outputs()
            )));
        }
        let spec = model.grid_spec;
        let domain = vec![(spec.lo, spec.hi); model.n_inputs()];
        let model = model.clone();
        FunctionHandle::new(domain, move |x| {
            let input = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
            match model.forward_strict(&input) {
                Ok(y) => y[[0, 0]],
                Err(_) => f64::NAN,
            }
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.arity);
        (self.eval)(x)
    }

    fn widths(&self) -> Vec<f64> {
        self.domain.iter().map(|&(lo, hi)| hi - lo).collect()
    }
}

/// Knobs shared by all modularity tests. The relative threshold applies to
/// scores normalized by a robust within-group scale, so it is unit-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestConfig {
    pub probes: usize,
    /// Finite-difference step as a fraction of each variable's range.
    pub h: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig { probes: 100, h: 1e-3, tau: 1e-2, seed: 0 }
    }
}

impl TestConfig {
    fn validate(&self) -> Result<(), ModularityError> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(ModularityError::BadArgument("fd step must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ModularityError::BadArgument("tau must lie in (0,1)".into()));
        }
        if self.probes == 0 {
            return Err(ModularityError::BadArgument("need at least one probe point".into()));
        }
        Ok(())
    }

    fn steps(&self, f: &FunctionHandle) -> Vec<f64> {
        f.widths().iter().map(|w| self.h * w).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SepMode {
    Add,
    Mul,
}

/// Central-difference Hessian at `x`, using a per-variable step of
/// `h * (hi - lo)`. Mixed entries are evaluated once per unordered pair, so
/// the result is symmetric by construction.
pub fn estimate_hessian(
    f: &FunctionHandle,
    x: &[f64],
    h: f64,
) -> Result<Array2<f64>, ModularityError> {
    if x.len() != f.arity {
        return Err(ModularityError::BadArgument(format!(
            "point has {} coordinates, function takes {}",
            x.len(),
            f.arity
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(ModularityError::BadArgument("fd step must be positive".into()));
    }
    let steps: Vec<f64> = f.widths().iter().map(|w| h * w).collect();
    for (i, (&xi, &(lo, hi))) in x.iter().zip(&f.domain).enumerate() {
        if xi - 2.0 * steps[i] < lo || xi + 2.0 * steps[i] > hi {
            return Err(ModularityError::BadArgument(format!(
                "coordinate {i} is within two steps of the domain boundary"
            )));
        }
    }
    hessian_at(&|p| f.eval(p), x, &steps)
        .ok_or_else(|| ModularityError::Eval("non-finite value in the Hessian stencil".into()))
}

// Raw stencil worker; None when any evaluation is non-finite.
fn hessian_at(f: &dyn Fn(&[f64]) -> f64, x: &[f64], steps: &[f64]) -> Option<Array2<f64>> {
    let n = x.len();
    let mut h = Array2::zeros((n, n));
    let f0 = f(x);
    if !f0.is_finite() {
        return None;
    }
    let mut p = x.to_vec();
    for i in 0..n {
        let si = steps[i];
        p[i] = x[i] + si;
        let fp = f(&p);
        p[i] = x[i] - si;
        let fm = f(&p);
        p[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return None;
        }
        h[[i, i]] = (fp - 2.0 * f0 + fm) / (si * si);
        for j in i + 1..n {
            let sj = steps[j];
            let mut corner = |di: f64, dj: f64| {
                p[i] = x[i] + di;
                p[j] = x[j] + dj;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let m = (corner(si, sj) - corner(si, -sj) - corner(-si, sj) + corner(-si, -sj))
                / (4.0 * si * sj);
            if !m.is_finite() {
                return None;
            }
            h[[i, j]] = m;
            h[[j, i]] = m;
        }
    }
    Some(h)
}

fn sample_probes(
    f: &FunctionHandle,
    steps: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, ModularityError> {
    let mut dists = Vec::with_capacity(f.arity);
    for (i, &(lo, hi)) in f.domain.iter().enumerate() {
        let m = PROBE_MARGIN * steps[i];
        if lo + m >= hi - m {
            return Err(ModularityError::BadArgument(format!(
                "domain interval {i} is too narrow for the fd step"
            )));
        }
        dists.push(Uniform::new(lo + m, hi - m));
    }
    Ok((0..count)
        .map(|_| dists.iter().map(|d| d.sample(rng)).collect())
        .collect())
}

fn median(vals: &mut [f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

fn std_dev(vals: &[f64]) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Test whether `f` separates across `groups` (a partition of the
/// variables): additively on `f` itself, multiplicatively on `log|f|`.
/// Returns the decision and the worst cross-group Hessian entry relative to
/// a robust within-group scale.
pub fn test_separability(
    f: &FunctionHandle,
    groups: &[Vec<usize>],
    mode: SepMode,
    config: &TestConfig,
) -> Result<(bool, f64), ModularityError> {
    config.validate()?;
    let group_of = partition_index(f.arity, groups)?;
    let steps = config.steps(f);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let probes = sample_probes(f, &steps, config.probes, &mut rng)?;

    let target: Box<dyn Fn(&[f64]) -> f64> = match mode {
        SepMode::Add => Box::new(|x: &[f64]| f.eval(x)),
        SepMode::Mul => Box::new(|x: &[f64]| f.eval(x).abs().ln()),
    };
    let mut cross = Vec::new();
    let mut within = Vec::new();
    let mut fvals = Vec::new();
    for p in &probes {
        if mode == SepMode::Mul && f.eval(p).abs() < FLAT_EPS {
            continue;
        }
        let Some(h) = hessian_at(&target, p, &steps) else { continue };
        for i in 0..f.arity {
            for j in i..f.arity {
                let v = h[[i, j]].abs();
                if group_of[i] == group_of[j] {
                    within.push(v);
                } else {
                    cross.push(v);
                }
            }
        }
        fvals.push(f.eval(p));
    }
    if fvals.is_empty() {
        return Err(ModularityError::Inconclusive(
            "every probe point was skipped; the function is flat or singular here".into(),
        ));
    }
    // Robust scale: the typical within-group curvature, with a fallback for
    // functions whose Hessian vanishes identically (then any output spread
    // over the box sets the unit).
    let mean_hw = f.widths().iter().map(|w| 0.5 * w).sum::<f64>() / f.arity as f64;
    let scale = median(&mut within).max(std_dev(&fvals) / (mean_hw * mean_hw)).max(1e-12);
    let worst = cross.iter().cloned().fold(0.0f64, f64::max);
    let score = worst / scale;
    Ok((score < config.tau, score))
}

/// Test generalized separability of `f` across the split
/// `{0..k} | {k..n}`: the ratio of one representative partial derivative
/// per side must itself be multiplicatively separable. An outer wrapping
/// function cancels in the ratio, so the additive and multiplicative
/// flavors share this criterion and `mode` does not change the decision.
pub fn test_general_separability(
    f: &FunctionHandle,
    k: usize,
    _mode: SepMode,
    config: &TestConfig,
) -> Result<(bool, f64), ModularityError> {
    if k == 0 || k >= f.arity {
        return Err(ModularityError::BadArgument(format!(
            "split {k} must leave variables on both sides of {} inputs",
            f.arity
        )));
    }
    let left: Vec<usize> = (0..k).collect();
    let right: Vec<usize> = (k..f.arity).collect();
    general_separability_subset(f, &left, &right, config)
}

// Subset form used by tree_convert, where groups are not contiguous.
fn general_separability_subset(
    f: &FunctionHandle,
    left: &[usize],
    right: &[usize],
    config: &TestConfig,
) -> Result<(bool, f64), ModularityError> {
    config.validate()?;
    let steps = config.steps(f);
    let gsteps: Vec<f64> = f.widths().iter().map(|w| GRAD_H * w).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x517c_c1b7);
    let scouting = sample_probes(f, &steps, config.probes.min(32), &mut rng)?;

    // Representatives: the variable with the strongest typical response on
    // each side. A side whose best partial is flat makes the ratio
    // meaningless.
    let pick = |vars: &[usize]| -> (usize, f64) {
        let mut best = (vars[0], f64::NEG_INFINITY);
        for &v in vars {
            let mut mags: Vec<f64> = scouting
                .iter()
                .map(|p| partial(f, p, v, gsteps[v]).abs())
                .filter(|m| m.is_finite())
                .collect();
            let med = median(&mut mags);
            if med > best.1 {
                best = (v, med);
            }
        }
        best
    };
    let (i, mag_i) = pick(left);
    let (j, mag_j) = pick(right);
    let mut fmags: Vec<f64> = scouting.iter().map(|p| f.eval(p).abs()).collect();
    let floor = FLAT_EPS * median(&mut fmags).max(1.0);
    if mag_i <= floor || mag_j <= floor {
        return Err(ModularityError::Inconclusive(
            "a representative partial derivative is flat across the probes".into(),
        ));
    }

    // Points where the denominator partial nearly vanishes carry no ratio
    // information and poison the outer Hessian; mask them with NaN so the
    // stencil skips them.
    let dj_floor = RATIO_FLOOR * mag_j;
    let mut rvals: Vec<f64> = scouting
        .iter()
        .filter_map(|p| {
            let dj = partial(f, p, j, gsteps[j]);
            if !dj.is_finite() || dj.abs() < dj_floor {
                return None;
            }
            let di = partial(f, p, i, gsteps[i]);
            di.is_finite().then(|| di / dj)
        })
        .collect();
    if rvals.is_empty() {
        return Err(ModularityError::Inconclusive(
            "the derivative ratio is singular at every probe point".into(),
        ));
    }
    // A constant ratio means the two representatives enter through one
    // affine combination; that splits trivially and sits below the noise
    // floor of the curvature test.
    let spread = rvals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - rvals.iter().cloned().fold(f64::INFINITY, f64::min);
    let typical = median(&mut rvals).abs();
    if spread <= CONST_RATIO_SPREAD * (1.0 + typical) {
        return Ok((true, 0.0));
    }

    let inner = f.clone();
    let (si, sj) = (gsteps[i], gsteps[j]);
    let ratio = FunctionHandle::new(f.domain.clone(), move |x| {
        let dj = partial(&inner, x, j, sj);
        if !dj.is_finite() || dj.abs() < dj_floor {
            return f64::NAN;
        }
        partial(&inner, x, i, si) / dj
    })?;
    test_separability(&ratio, &[left.to_vec(), right.to_vec()], SepMode::Mul, config)
}

fn partial(f: &FunctionHandle, x: &[f64], v: usize, step: f64) -> f64 {
    let mut p = x.to_vec();
    p[v] = x[v] + step;
    let a = f.eval(&p);
    p[v] = x[v] - step;
    let b = f.eval(&p);
    (a - b) / (2.0 * step)
}

/// Test generalized symmetry: `f` depends on the variables in `s` only
/// through one scalar. Numerically, the normalized gradient over `s` must
/// not react to any outside variable; directions are compared up to sign
/// since normalization flips across zeros of the in-group gradient.
pub fn test_symmetry(
    f: &FunctionHandle,
    s: &[usize],
    config: &TestConfig,
) -> Result<(bool, f64), ModularityError> {
    config.validate()?;
    let mut subset = s.to_vec();
    subset.sort_unstable();
    subset.dedup();
    if subset.len() != s.len() || subset.len() < 2 || subset.iter().any(|&v| v >= f.arity) {
        return Err(ModularityError::BadArgument(format!(
            "symmetry subset must hold 2..={} distinct variables",
            f.arity
        )));
    }
    let outside: Vec<usize> = (0..f.arity).filter(|v| !subset.contains(v)).collect();
    if outside.is_empty() {
        return Ok((true, 0.0));
    }
    let steps = config.steps(f);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let probes = sample_probes(f, &steps, config.probes, &mut rng)?;

    let mut worst = 0.0f64;
    let mut used = 0usize;
    'probe: for p in &probes {
        let Some(u0) = unit_grad(f, p, &subset, &steps) else { continue };
        let mut q = p.clone();
        for &z in &outside {
            q[z] = p[z] + steps[z];
            let up = unit_grad(f, &q, &subset, &steps);
            q[z] = p[z] - steps[z];
            let um = unit_grad(f, &q, &subset, &steps);
            q[z] = p[z];
            let (Some(mut up), Some(mut um)) = (up, um) else { continue 'probe };
            align(&mut up, &u0);
            align(&mut um, &u0);
            let drift: f64 = up
                .iter()
                .zip(&um)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / (2.0 * steps[z]);
            // Direction change accumulated over half the variable's range,
            // so the score is unit-free.
            worst = worst.max(drift * 0.5 * (f.domain[z].1 - f.domain[z].0));
        }
        used += 1;
    }
    if used == 0 {
        return Err(ModularityError::Inconclusive(
            "the in-group gradient vanished at every probe point".into(),
        ));
    }
    Ok((worst < config.tau, worst))
}

fn unit_grad(f: &FunctionHandle, x: &[f64], s: &[usize], steps: &[f64]) -> Option<Vec<f64>> {
    let g: Vec<f64> = s.iter().map(|&v| partial(f, x, v, steps[v])).collect();
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < FLAT_EPS {
        return None;
    }
    Some(g.into_iter().map(|v| v / norm).collect())
}

fn align(u: &mut [f64], reference: &[f64]) {
    let dot: f64 = u.iter().zip(reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for v in u {
            *v = -*v;
        }
    }
}

fn partition_index(arity: usize, groups: &[Vec<usize>]) -> Result<Vec<usize>, ModularityError> {
    let mut group_of = vec![usize::MAX; arity];
    for (g, vars) in groups.iter().enumerate() {
        for &v in vars {
            if v >= arity || group_of[v] != usize::MAX {
                return Err(ModularityError::BadArgument(format!(
                    "groups must partition 0..{arity}"
                )));
            }
            group_of[v] = g;
        }
    }
    if group_of.contains(&usize::MAX) {
        return Err(ModularityError::BadArgument(format!("groups must partition 0..{arity}")));
    }
    Ok(group_of)
}

/// Strongest structural property of a variable group, ordered by the
/// separability chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Annotation {
    Leaf,
    Symmetry,
    /// The additive and multiplicative flavors compose into each other
    /// through exp/log, so detection cannot tell them apart; groups found
    /// by the ratio test report the additive flavor.
    GeneralizedSeparable(SepMode),
    Separable(SepMode),
}

impl fmt::Display for Annotation {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Annotation::Leaf => write!(w, "leaf"),
            Annotation::Symmetry => write!(w, "symmetry"),
            Annotation::GeneralizedSeparable(SepMode::Add) => write!(w, "generalized-separable(add)"),
            Annotation::GeneralizedSeparable(SepMode::Mul) => write!(w, "generalized-separable(mul)"),
            Annotation::Separable(SepMode::Add) => write!(w, "separable(add)"),
            Annotation::Separable(SepMode::Mul) => write!(w, "separable(mul)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Original variable indices covered by this group, sorted.
    pub vars: Vec<usize>,
    pub annotation: Annotation,
    pub children: Vec<TreeNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModularityTree {
    pub root: TreeNode,
}

impl ModularityTree {
    /// Indented text form, one group per line.
    pub fn to_text(&self, names: &[String]) -> String {
        let mut out = String::new();
        fn walk(node: &TreeNode, names: &[String], depth: usize, out: &mut String) {
            let pad = "  ".repeat(depth);
            if node.children.is_empty() {
                out.push_str(&format!("{pad}{}\n", var_label(node.vars[0], names)));
            } else {
                let vars: Vec<String> =
                    node.vars.iter().map(|&v| var_label(v, names)).collect();
                out.push_str(&format!("{pad}{{{}}} {}\n", vars.join(","), node.annotation));
                for c in &node.children {
                    walk(c, names, depth + 1, out);
                }
            }
        }
        walk(&self.root, names, 0, &mut out);
        out
    }

    /// DOT digraph with one box per group.
    pub fn to_dot(&self, names: &[String]) -> String {
        let mut out = String::from("digraph modularity {\n  node [shape=box];\n");
        let mut next = 0usize;
        fn walk(
            node: &TreeNode,
            names: &[String],
            next: &mut usize,
            out: &mut String,
        ) -> usize {
            let id = *next;
            *next += 1;
            let label = if node.children.is_empty() {
                var_label(node.vars[0], names)
            } else {
                let vars: Vec<String> = node.vars.iter().map(|&v| var_label(v, names)).collect();
                format!("{{{}}}\\n{}", vars.join(","), node.annotation)
            };
            out.push_str(&format!("  n{id} [label=\"{label}\"];\n"));
            for c in &node.children {
                let cid = walk(c, names, next, out);
                out.push_str(&format!("  n{id} -> n{cid};\n"));
            }
            id
        }
        walk(&self.root, names, &mut next, &mut out);
        out.push_str("}\n");
        out
    }
}

fn var_label(v: usize, names: &[String]) -> String {
    names.get(v).cloned().unwrap_or_else(|| format!("x{}", v + 1))
}

/// Recursively group variables by generalized symmetry, smallest subsets
/// first, annotating each accepted group with the strongest property that
/// holds among its children. Collapsed groups are replaced by one variable
/// running along the diagonal ray of their sub-box, which is faithful
/// because symmetry makes the function depend on the group through a single
/// scalar.
pub fn tree_convert(
    f: &FunctionHandle,
    config: &TestConfig,
) -> Result<ModularityTree, ModularityError> {
    config.validate()?;
    if f.arity < 2 {
        return Err(ModularityError::BadArgument("need at least two variables".into()));
    }
    let mut items: Vec<TreeNode> = (0..f.arity)
        .map(|v| TreeNode { vars: vec![v], annotation: Annotation::Leaf, children: Vec::new() })
        .collect();

    loop {
        let m = items.len();
        if m == 1 {
            break;
        }
        let q = quotient(f, &items)?;
        let mut taken = vec![false; m];
        let mut accepted: Vec<Vec<usize>> = Vec::new();
        if m <= 8 {
            for size in 2..m {
                for subset in combinations(m, size) {
                    if subset.iter().any(|&i| taken[i]) {
                        continue;
                    }
                    if passes(test_symmetry(&q, &subset, config))? {
                        for &i in &subset {
                            taken[i] = true;
                        }
                        accepted.push(subset);
                    }
                }
            }
        } else {
            // Exhaustive subset search is exponential; rank pairs by their
            // symmetry score and accept greedily.
            let mut scored: Vec<(f64, Vec<usize>)> = Vec::new();
            for pair in combinations(m, 2) {
                if let Ok((ok, score)) = test_symmetry(&q, &pair, config) {
                    if ok {
                        scored.push((score, pair));
                    }
                }
            }
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            for (_, pair) in scored {
                if pair.iter().any(|&i| taken[i]) {
                    continue;
                }
                for &i in &pair {
                    taken[i] = true;
                }
                accepted.push(pair);
            }
        }

        if accepted.is_empty() {
            let all: Vec<usize> = (0..m).collect();
            let root = make_group(&q, &items, &all, config)?;
            items = vec![root];
            break;
        }
        let mut replaced: Vec<Option<TreeNode>> = vec![None; m];
        for subset in &accepted {
            replaced[subset[0]] = Some(make_group(&q, &items, subset, config)?);
        }
        let mut next_items = Vec::new();
        for (i, item) in items.iter().enumerate() {
            if let Some(node) = replaced[i].take() {
                next_items.push(node);
            } else if !taken[i] {
                next_items.push(item.clone());
            }
        }
        items = next_items;
    }
    Ok(ModularityTree { root: items.pop().expect("loop leaves the root") })
}

// Quotient oracle over the current super-variables: variable k in [0,1]
// moves every original variable of group k along its own range.
fn quotient(f: &FunctionHandle, items: &[TreeNode]) -> Result<FunctionHandle, ModularityError> {
    let groups: Vec<Vec<usize>> = items.iter().map(|n| n.vars.clone()).collect();
    let domain = f.domain.clone();
    let inner = f.clone();
    FunctionHandle::new(vec![(0.0, 1.0); items.len()], move |t| {
        let mut x = vec![0.0; domain.len()];
        for (k, group) in groups.iter().enumerate() {
            for &v in group {
                let (lo, hi) = domain[v];
                x[v] = lo + t[k] * (hi - lo);
            }
        }
        inner.eval(&x)
    })
}

// Group node over current items `subset`, annotated by probing the
// sub-function with all other super-variables pinned at their midpoint.
fn make_group(
    q: &FunctionHandle,
    items: &[TreeNode],
    subset: &[usize],
    config: &TestConfig,
) -> Result<TreeNode, ModularityError> {
    let children: Vec<TreeNode> = subset.iter().map(|&i| items[i].clone()).collect();
    let mut vars: Vec<usize> = children.iter().flat_map(|c| c.vars.iter().copied()).collect();
    vars.sort_unstable();

    let sub = pin_complement(q, subset)?;
    let singles: Vec<Vec<usize>> = (0..subset.len()).map(|i| vec![i]).collect();
    let annotation = if passes(test_separability(&sub, &singles, SepMode::Add, config))? {
        Annotation::Separable(SepMode::Add)
    } else if passes(test_separability(&sub, &singles, SepMode::Mul, config))? {
        Annotation::Separable(SepMode::Mul)
    } else if all_splits_general(&sub, subset.len(), config)? {
        Annotation::GeneralizedSeparable(SepMode::Add)
    } else {
        Annotation::Symmetry
    };
    Ok(TreeNode { vars, annotation, children })
}

fn pin_complement(
    q: &FunctionHandle,
    subset: &[usize],
) -> Result<FunctionHandle, ModularityError> {
    let keep = subset.to_vec();
    let full = q.domain.clone();
    let inner = q.clone();
    let domain: Vec<(f64, f64)> = subset.iter().map(|&i| q.domain[i]).collect();
    FunctionHandle::new(domain, move |t| {
        let mut x: Vec<f64> = full.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        for (slot, &i) in keep.iter().enumerate() {
            x[i] = t[slot];
        }
        inner.eval(&x)
    })
}

fn all_splits_general(
    sub: &FunctionHandle,
    n: usize,
    config: &TestConfig,
) -> Result<bool, ModularityError> {
    for child in 0..n {
        let left = vec![child];
        let right: Vec<usize> = (0..n).filter(|&v| v != child).collect();
        if !passes(general_separability_subset(sub, &left, &right, config))? {
            return Ok(false);
        }
    }
    Ok(true)
}

// Inconclusive probes mean "no structure found here", not a broken tree.
fn passes(result: Result<(bool, f64), ModularityError>) -> Result<bool, ModularityError> {
    match result {
        Ok((ok, _)) => Ok(ok),
        Err(ModularityError::Inconclusive(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Permute neurons within each hidden level to shorten attribution-weighted
/// connections, leaving the computed function untouched. Swaps stay inside a
/// level's addition block or between multiplication nodes of equal arity so
/// the width structure survives. Returns the reorganized model, the
/// permutation per level (`perm[slot]` = original node index), and the cost
/// after each applied swap, starting from the initial cost.
pub fn auto_swap(
    model: &MultKanModel,
) -> Result<(MultKanModel, Vec<Vec<usize>>, Vec<f64>), ModularityError> {
    let levels = model.n_levels();
    if levels < 3 {
        return Err(ModularityError::BadArgument(
            "neuron swapping needs at least one hidden level".into(),
        ));
    }
    let spec = model.grid_spec;
    let mut rng = ChaCha8Rng::seed_from_u64(SWAP_SEED);
    let dist = Uniform::new(spec.lo, spec.hi);
    let x = Array2::from_shape_fn((SWAP_BATCH, model.n_inputs()), |_| dist.sample(&mut rng));
    let scores = compute_attribution(model, &x)?;

    // slot_of[level][node] = current slot of that node.
    let mut slot_of: Vec<Vec<usize>> =
        (0..levels).map(|l| (0..model.n_nodes(l)).collect()).collect();
    let cost = |slot_of: &[Vec<usize>]| -> f64 {
        let mut total = 0.0;
        for (l, layer) in model.layers.iter().enumerate() {
            let b = &scores.edge_scores[l];
            let n_in = layer.kan.n_in;
            let n_next = model.n_nodes(l + 1);
            for i in 0..n_in {
                for j in 0..layer.kan.n_out {
                    let s = b[[i, j]];
                    if s == 0.0 {
                        continue;
                    }
                    let node = layer.mult.node_of_subnode(j);
                    total += s * (pos(slot_of[l][i], n_in) - pos(slot_of[l + 1][node], n_next)).abs();
                }
            }
        }
        total
    };

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for level in 1..levels - 1 {
        let mult = &model.layers[level - 1].mult;
        for a in 0..mult.n_nodes() {
            for b in a + 1..mult.n_nodes() {
                let both_add = b < mult.n_add;
                let equal_mult = a >= mult.n_add
                    && mult.arities[a - mult.n_add] == mult.arities[b - mult.n_add];
                if both_add || equal_mult {
                    candidates.push((level, a, b));
                }
            }
        }
    }

    let mut trace = vec![cost(&slot_of)];
    loop {
        let current = *trace.last().expect("trace seeded");
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for &(level, a, b) in &candidates {
            slot_of[level].swap(a, b);
            let c = cost(&slot_of);
            slot_of[level].swap(a, b);
            if c < current - 1e-12 && best.map_or(true, |(bc, ..)| c < bc) {
                best = Some((c, level, a, b));
            }
        }
        let Some((c, level, a, b)) = best else { break };
        slot_of[level].swap(a, b);
        trace.push(c);
    }

    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(levels);
    for level_slots in &slot_of {
        let mut perm = vec![0usize; level_slots.len()];
        for (node, &slot) in level_slots.iter().enumerate() {
            perm[slot] = node;
        }
        perms.push(perm);
    }
    let mut swapped = model.clone();
    for (level, perm) in perms.iter().enumerate() {
        if level > 0 && level < levels - 1 {
            apply_level_perm(&mut swapped, level, perm);
        }
    }
    Ok((swapped, perms, trace))
}

fn pos(slot: usize, count: usize) -> f64 {
    if count <= 1 {
        0.5
    } else {
        slot as f64 / (count - 1) as f64
    }
}

// Reorder the nodes of one hidden level: incoming subnode columns move as
// blocks, outgoing edge rows follow the node order.
fn apply_level_perm(model: &mut MultKanModel, level: usize, perm: &[usize]) {
    if perm.iter().enumerate().all(|(slot, &node)| slot == node) {
        return;
    }
    let incoming = &model.layers[level - 1];
    let old_mult = incoming.mult.clone();
    debug_assert!(perm
        .iter()
        .enumerate()
        .all(|(slot, &node)| (slot < old_mult.n_add) == (node < old_mult.n_add)));

    let mut sub_src = Vec::with_capacity(incoming.kan.n_out);
    let mut arities = Vec::with_capacity(old_mult.arities.len());
    for &node in perm {
        sub_src.extend(old_mult.subnode_range(node));
        if node >= old_mult.n_add {
            arities.push(old_mult.arities[node - old_mult.n_add]);
        }
    }
    let old_kan = incoming.kan.clone();
    let incoming = &mut model.layers[level - 1];
    for i in 0..old_kan.n_in {
        for j in 0..old_kan.n_out {
            *incoming.kan.edge_mut(i, j) = old_kan.edge(i, sub_src[j]).clone();
        }
    }
    incoming.mult.arities = arities;

    let old_out = model.layers[level].kan.clone();
    let outgoing = &mut model.layers[level].kan;
    for (slot, &node) in perm.iter().enumerate() {
        for j in 0..old_out.n_out {
            *outgoing.edge_mut(slot, j) = old_out.edge(node, j).clone();
        }
    }
}
