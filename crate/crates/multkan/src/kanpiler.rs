//! The kanpiler: compiles formulas into purely symbolic MultKAN models.
//!
//! Every operator lands on an edge. Unary functions and powers become single
//! symbolic edges, sums become addition nodes, products become
//! multiplication nodes. Affine wrappers (`2*u + 1`, constant factors) fold
//! into the edge's `c*f(a*x + b) + d` parameters instead of spending a
//! layer, and power chains collapse when the library covers the combined
//! exponent, so `m0/sqrt(1 - (v/c)^2)` costs four levels, not six. Leaves
//! are routed upward through identity copies so every edge connects
//! adjacent levels.
//!
//! Compiled models evaluate exactly like the source tree on its domain and
//! contain no trainable parameters until [`MultKanModel::perturb`] reveals
//! the spline branches.

use crate::expr::{canonicalize, non_const, parse_formula, ExprError, ExprTree};
use crate::model::{
    EdgeFunction, GridSpec, KanLayer, Layer, ModelError, MultKanModel, MultLayer, SymbolicSpec,
};
use crate::primitives::Primitive;
use crate::spline::Grid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("compilation needs at least one declared input")]
    NoInputs,
    #[error("nothing to compile: no formulas given")]
    Empty,
    #[error("cannot compile: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Compile a parsed formula into a model with one output.
pub fn compile_to_kan(
    tree: &ExprTree,
    input_names: &[String],
    grid_spec: GridSpec,
) -> Result<MultKanModel, CompileError> {
    compile_trees(std::slice::from_ref(tree), input_names, grid_spec)
}

/// Parse and compile in one step.
pub fn compile_formula(
    formula: &str,
    input_names: &[String],
    grid_spec: GridSpec,
) -> Result<MultKanModel, CompileError> {
    let tree = parse_formula(formula, input_names)?;
    compile_to_kan(&tree, input_names, grid_spec)
}

/// Compile several formulas into one model, one output per tree in order.
/// The trees share the declared input layer; inputs no formula mentions
/// keep their column and feed only dead edges.
pub fn compile_trees(
    trees: &[ExprTree],
    input_names: &[String],
    grid_spec: GridSpec,
) -> Result<MultKanModel, CompileError> {
    if input_names.is_empty() {
        return Err(CompileError::NoInputs);
    }
    if trees.is_empty() {
        return Err(CompileError::Empty);
    }
    let canon: Vec<ExprTree> = trees.iter().cloned().map(canonicalize).collect();
    for tree in &canon {
        if let Some(&v) = tree.vars_used().iter().next_back() {
            if v >= input_names.len() {
                return Err(CompileError::Unsupported(format!(
                    "formula reads input {} but only {} are declared",
                    v + 1,
                    input_names.len()
                )));
            }
        }
        check_constant_domains(tree)?;
    }
    let mut planner = Planner::new(input_names.len());
    let roots = canon
        .iter()
        .map(|t| planner.root_node(t))
        .collect::<Result<Vec<_>, _>>()?;
    planner.assemble(&roots, input_names, grid_spec)
}

// Canonicalization folds every constant-argument operation that is defined;
// one left behind means the constant sits outside the operator's domain
// (sqrt of a negative, log of zero) and would silently clamp at run time.
fn check_constant_domains(tree: &ExprTree) -> Result<(), CompileError> {
    let bad = |what: &str| Err(CompileError::Unsupported(format!("{what} of a constant outside its domain")));
    match tree {
        ExprTree::Var(_) | ExprTree::Const(_) => Ok(()),
        ExprTree::Unary { prim, child } => {
            if matches!(**child, ExprTree::Const(_)) {
                return bad(prim.display_name());
            }
            check_constant_domains(child)
        }
        ExprTree::Power { base, .. } => {
            if matches!(**base, ExprTree::Const(_)) {
                return bad("power");
            }
            check_constant_domains(base)
        }
        ExprTree::Sum(cs) | ExprTree::Product(cs) => {
            cs.iter().try_for_each(check_constant_domains)
        }
    }
}

type Handle = usize;

// One planned edge: feeds `c * prim(a * value(from) + b) + d` into its
// consumer.
#[derive(Debug, Clone)]
struct Feed {
    from: Handle,
    prim: Primitive,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Feed {
    fn identity(from: Handle, c: f64, d: f64) -> Self {
        Feed { from, prim: Primitive::Identity, a: 1.0, b: 0.0, c, d }
    }
}

#[derive(Debug)]
enum NodeKind {
    Input,
    // Feeds into the node's single subnode, summed.
    Add(Vec<Feed>),
    // One feed per factor subnode.
    Mult(Vec<Feed>),
}

#[derive(Debug)]
struct PlanNode {
    level: usize,
    kind: NodeKind,
}

struct Planner {
    nodes: Vec<PlanNode>,
    n_inputs: usize,
}

impl Planner {
    fn new(n_inputs: usize) -> Self {
        let nodes = (0..n_inputs).map(|_| PlanNode { level: 0, kind: NodeKind::Input }).collect();
        Planner { nodes, n_inputs }
    }

    fn level(&self, h: Handle) -> usize {
        self.nodes[h].level
    }

    fn push(&mut self, level: usize, kind: NodeKind) -> Handle {
        self.nodes.push(PlanNode { level, kind });
        self.nodes.len() - 1
    }

    // Fresh identity copies carrying `h` up to `level`. Chains are never
    // shared, so two lifted feeds cannot collide on one grid edge.
    fn lift(&mut self, mut h: Handle, level: usize) -> Handle {
        while self.level(h) < level {
            let next = self.level(h) + 1;
            let feed = Feed::identity(h, 1.0, 0.0);
            h = self.push(next, NodeKind::Add(vec![feed]));
        }
        h
    }

    // Edge feeding `c * value(t) + d` into a consumer one level above the
    // returned source.
    fn feed_of(&mut self, t: &ExprTree, c: f64, d: f64) -> Result<Feed, CompileError> {
        match t {
            ExprTree::Var(i) => Ok(Feed { from: *i, prim: Primitive::Identity, a: 1.0, b: 0.0, c, d }),
            // Constant feeds read input 0 with a zero slope.
            ExprTree::Const(k) => {
                Ok(Feed { from: 0, prim: Primitive::Identity, a: 0.0, b: *k, c, d })
            }
            ExprTree::Unary { .. } | ExprTree::Power { .. } => {
                let (prim, base) = match t.edge_feed().expect("unary-shaped tree") {
                    Ok(pair) => pair,
                    Err(e) => {
                        return Err(CompileError::Unsupported(format!(
                            "power exponent {e} has no primitive"
                        )))
                    }
                };
                let (from, alpha, beta) = self.as_affine(base)?;
                Ok(Feed { from, prim, a: alpha, b: beta, c, d })
            }
            ExprTree::Sum(cs) => {
                let k = const_sum(cs);
                match non_const(cs)[..] {
                    [lone] => self.feed_of(lone, c, d + c * k),
                    _ => {
                        let h = self.materialize_sum(cs)?;
                        Ok(Feed::identity(h, c, d))
                    }
                }
            }
            ExprTree::Product(cs) => {
                let k = const_product(cs);
                match non_const(cs)[..] {
                    [lone] => self.feed_of(lone, c * k, d),
                    _ => {
                        let h = self.materialize_product(cs)?;
                        Ok(Feed::identity(h, c, d))
                    }
                }
            }
        }
    }

    // Resolve `t` to `alpha * value(handle) + beta`, materializing anything
    // that is not an affine wrapper around a single node.
    fn as_affine(&mut self, t: &ExprTree) -> Result<(Handle, f64, f64), CompileError> {
        match t {
            ExprTree::Var(i) => Ok((*i, 1.0, 0.0)),
            ExprTree::Sum(cs) => {
                let k = const_sum(cs);
                if let [lone] = non_const(cs)[..] {
                    let (h, alpha, beta) = self.as_affine(lone)?;
                    return Ok((h, alpha, beta + k));
                }
                Ok((self.materialize_sum(cs)?, 1.0, 0.0))
            }
            ExprTree::Product(cs) => {
                let k = const_product(cs);
                if let [lone] = non_const(cs)[..] {
                    let (h, alpha, beta) = self.as_affine(lone)?;
                    return Ok((h, alpha * k, beta * k));
                }
                Ok((self.materialize_product(cs)?, 1.0, 0.0))
            }
            _ => {
                let feed = self.feed_of(t, 1.0, 0.0)?;
                let level = self.level(feed.from) + 1;
                Ok((self.push(level, NodeKind::Add(vec![feed])), 1.0, 0.0))
            }
        }
    }

    fn materialize_sum(&mut self, cs: &[ExprTree]) -> Result<Handle, CompileError> {
        let k = const_sum(cs);
        let terms = non_const(cs);
        let mut feeds = Vec::with_capacity(terms.len());
        for (idx, term) in terms.iter().enumerate() {
            let d = if idx == 0 { k } else { 0.0 };
            feeds.push(self.feed_of(term, 1.0, d)?);
        }
        let mut level = 1 + feeds.iter().map(|f| self.level(f.from)).max().unwrap_or(0);
        // Two terms reading one input would collide on a single grid edge;
        // a copy layer separates them. Deeper sources are always distinct
        // nodes, so the collision only exists at level 1.
        let mut seen = std::collections::BTreeSet::new();
        if level == 1 && feeds.iter().any(|f| !seen.insert(f.from)) {
            level = 2;
        }
        for feed in &mut feeds {
            feed.from = self.lift(feed.from, level - 1);
        }
        Ok(self.push(level, NodeKind::Add(feeds)))
    }

    fn materialize_product(&mut self, cs: &[ExprTree]) -> Result<Handle, CompileError> {
        let k = const_product(cs);
        let items = non_const(cs);
        let mut feeds = Vec::with_capacity(items.len());
        for (idx, item) in items.iter().enumerate() {
            let c = if idx == 0 { k } else { 1.0 };
            feeds.push(self.feed_of(item, c, 0.0)?);
        }
        // Factors land on separate subnodes, so shared inputs never collide.
        let level = 1 + feeds.iter().map(|f| self.level(f.from)).max().unwrap_or(0);
        for feed in &mut feeds {
            feed.from = self.lift(feed.from, level - 1);
        }
        Ok(self.push(level, NodeKind::Mult(feeds)))
    }

    // Root of one output tree. Multiplication nodes cannot sit on the
    // output level, so a multi-factor product root gains an identity edge
    // into a fresh addition node.
    fn root_node(&mut self, t: &ExprTree) -> Result<Handle, CompileError> {
        let h = match t {
            ExprTree::Sum(cs) if non_const(cs).len() >= 2 => self.materialize_sum(cs)?,
            ExprTree::Product(cs) if non_const(cs).len() >= 2 => self.materialize_product(cs)?,
            _ => {
                let feed = self.feed_of(t, 1.0, 0.0)?;
                let level = self.level(feed.from) + 1;
                self.push(level, NodeKind::Add(vec![feed]))
            }
        };
        if matches!(self.nodes[h].kind, NodeKind::Mult(_)) {
            let feed = Feed::identity(h, 1.0, 0.0);
            let level = self.level(h) + 1;
            return Ok(self.push(level, NodeKind::Add(vec![feed])));
        }
        Ok(h)
    }

    fn assemble(
        mut self,
        roots: &[Handle],
        input_names: &[String],
        grid_spec: GridSpec,
    ) -> Result<MultKanModel, CompileError> {
        let l_max = roots.iter().map(|&r| self.level(r)).max().unwrap_or(0).max(1);
        let outputs: Vec<Handle> = roots.iter().map(|&r| self.lift(r, l_max)).collect();

        let mut adds_at: Vec<Vec<Handle>> = vec![Vec::new(); l_max + 1];
        let mut mults_at: Vec<Vec<Handle>> = vec![Vec::new(); l_max + 1];
        for (h, node) in self.nodes.iter().enumerate() {
            match node.kind {
                NodeKind::Input => {}
                NodeKind::Add(_) => adds_at[node.level].push(h),
                NodeKind::Mult(_) => mults_at[node.level].push(h),
            }
        }
        // The output level holds exactly the root nodes; order them as the
        // formulas were given, not as planning happened to visit them.
        adds_at[l_max] = outputs;

        let mut pos = vec![usize::MAX; self.nodes.len()];
        for h in 0..self.n_inputs {
            pos[h] = h;
        }
        for l in 1..=l_max {
            for (i, &h) in adds_at[l].iter().enumerate() {
                pos[h] = i;
            }
            for (g, &h) in mults_at[l].iter().enumerate() {
                pos[h] = adds_at[l].len() + g;
            }
        }

        let grid = grid_spec.grid().map_err(ModelError::from)?;
        let mut layers = Vec::with_capacity(l_max);
        for l in 1..=l_max {
            let n_in = if l == 1 {
                self.n_inputs
            } else {
                adds_at[l - 1].len() + mults_at[l - 1].len()
            };
            let n_add = adds_at[l].len();
            let arities: Vec<usize> = mults_at[l]
                .iter()
                .map(|&h| match &self.nodes[h].kind {
                    NodeKind::Mult(feeds) => feeds.len(),
                    _ => unreachable!("mults_at holds mult nodes"),
                })
                .collect();
            let n_out = n_add + arities.iter().sum::<usize>();
            let mut kan = KanLayer::zeros(n_in, n_out, &grid);

            for (j, &h) in adds_at[l].iter().enumerate() {
                if let NodeKind::Add(feeds) = &self.nodes[h].kind {
                    for feed in feeds {
                        place(&mut kan, &pos, l, feed, j, &grid, &self.nodes);
                    }
                }
            }
            let mut subnode = n_add;
            for &h in &mults_at[l] {
                if let NodeKind::Mult(feeds) = &self.nodes[h].kind {
                    for feed in feeds {
                        place(&mut kan, &pos, l, feed, subnode, &grid, &self.nodes);
                        subnode += 1;
                    }
                }
            }
            layers.push(Layer { kan, mult: MultLayer { n_add, arities } });
        }

        Ok(MultKanModel::from_layers(input_names.to_vec(), grid_spec, layers)?)
    }
}

fn place(
    kan: &mut KanLayer,
    pos: &[usize],
    level: usize,
    feed: &Feed,
    subnode: usize,
    grid: &Grid,
    nodes: &[PlanNode],
) {
    debug_assert_eq!(nodes[feed.from].level, level - 1, "feeds connect adjacent levels");
    let i = pos[feed.from];
    let slot = kan.edge_mut(i, subnode);
    assert!(slot.symbolic.is_none(), "two feeds routed onto edge ({i}, {subnode})");
    let spec = SymbolicSpec::new(feed.prim, feed.a, feed.b, feed.c, feed.d);
    *slot = EdgeFunction::symbolic(grid.clone(), spec);
}

fn const_sum(cs: &[ExprTree]) -> f64 {
    cs.iter().filter_map(|c| match c {
        ExprTree::Const(k) => Some(*k),
        _ => None,
    })
    .sum()
}

fn const_product(cs: &[ExprTree]) -> f64 {
    cs.iter()
        .filter_map(|c| match c {
            ExprTree::Const(k) => Some(*k),
            _ => None,
        })
        .product()
}
