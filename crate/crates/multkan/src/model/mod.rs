//! The MultKAN computation graph.
//!
//! A model is a chain of blocks; each block applies a [`KanLayer`] (every
//! input node feeds every subnode through a learnable 1D edge function)
//! followed by a [`MultLayer`] that copies the first `n_add` subnodes and
//! multiplies the remaining ones in consecutive arity groups. Addition nodes
//! always come before multiplication nodes within a level.

mod edge;

pub use edge::{EdgeError, EdgeFunction, EdgeMode, SymbolicSpec};
pub(crate) use edge::EdgeEval;

use crate::primitives::GuardMode;
use crate::spline::{Extrapolation, Grid, KnotPlacement, SplineError};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Coefficient noise at init is 0.1 / sqrt(n_in * n_basis), keeping subnode
/// variance roughly constant across widths.
const INIT_NOISE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid width spec: {0}")]
    InvalidWidth(String),
    #[error("input dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("layer {layer} out of range")]
    InvalidLayer { layer: usize },
    #[error("node {node} out of range in layer {layer}")]
    InvalidNode { layer: usize, node: usize },
    #[error("edge ({layer},{in_node},{out_subnode}) out of range")]
    InvalidEdge { layer: usize, in_node: usize, out_subnode: usize },
    #[error("module spec: {0}")]
    ModuleSpec(String),
    #[error("layer {layer} would be left without nodes")]
    EmptyLayer { layer: usize },
    #[error("{0}")]
    BadArgument(String),
    #[error("no cached activations; run a forward pass with keep_cache first")]
    NoCache,
    #[error("edge ({layer},{in_node},{out_subnode}): {source}")]
    EdgeEval { layer: usize, in_node: usize, out_subnode: usize, source: EdgeError },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
}

/// Spline configuration shared by freshly created edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub size: usize,
    pub order: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { size: 5, order: 3, lo: -1.0, hi: 1.0 }
    }
}

impl GridSpec {
    pub fn grid(&self) -> Result<Grid, SplineError> {
        Grid::uniform(self.size, self.order, self.lo, self.hi)
    }
}

/// Per-level width: `n_add` addition nodes, `n_mult` multiplication nodes.
/// `arities` overrides the default arity of 2 per multiplication node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelWidth {
    pub n_add: usize,
    pub n_mult: usize,
    pub arities: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSpec {
    pub levels: Vec<LevelWidth>,
}

impl WidthSpec {
    /// Width from `(n_add, n_mult)` pairs, every multiplication binary.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        WidthSpec {
            levels: pairs
                .iter()
                .map(|&(n_add, n_mult)| LevelWidth { n_add, n_mult, arities: None })
                .collect(),
        }
    }

    /// Plain KAN width: addition nodes only.
    pub fn nodes(ns: &[usize]) -> Self {
        WidthSpec::from_pairs(&ns.iter().map(|&n| (n, 0)).collect::<Vec<_>>())
    }

    pub fn with_arities(mut self, level: usize, arities: Vec<usize>) -> Self {
        self.levels[level].arities = Some(arities);
        self
    }

    fn level_arities(&self, level: usize) -> Vec<usize> {
        match &self.levels[level].arities {
            Some(a) => a.clone(),
            None => vec![2; self.levels[level].n_mult],
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.levels.len() < 2 {
            return Err(ModelError::InvalidWidth("need at least input and output levels".into()));
        }
        if self.levels[0].n_mult != 0 {
            return Err(ModelError::InvalidWidth(
                "input level cannot contain multiplication nodes".into(),
            ));
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.n_add + level.n_mult == 0 {
                return Err(ModelError::InvalidWidth(format!("level {l} has no nodes")));
            }
            let arities = self.level_arities(l);
            if arities.len() != level.n_mult {
                return Err(ModelError::InvalidWidth(format!(
                    "level {l}: {} arities for {} multiplication nodes",
                    arities.len(),
                    level.n_mult
                )));
            }
            if arities.iter().any(|&a| a < 2) {
                return Err(ModelError::InvalidWidth(format!("level {l}: arity below 2")));
            }
        }
        Ok(())
    }
}

/// Dense grid of edge functions mapping `n_in` nodes to `n_out` subnodes.
/// Edge (i, j) lives at index `i * n_out + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub edges: Vec<EdgeFunction>,
}

impl KanLayer {
    pub fn zeros(n_in: usize, n_out: usize, grid: &Grid) -> Self {
        let edges = (0..n_in * n_out).map(|_| EdgeFunction::zeroed(grid.clone())).collect();
        KanLayer { n_in, n_out, edges }
    }

    pub fn edge(&self, i: usize, j: usize) -> &EdgeFunction {
        &self.edges[i * self.n_out + j]
    }

    pub fn edge_mut(&mut self, i: usize, j: usize) -> &mut EdgeFunction {
        &mut self.edges[i * self.n_out + j]
    }

    fn rebuild<F>(&mut self, new_in: usize, new_out: usize, mut pick: F)
    where
        F: FnMut(usize, usize) -> EdgeFunction,
    {
        let mut edges = Vec::with_capacity(new_in * new_out);
        for i in 0..new_in {
            for j in 0..new_out {
                edges.push(pick(i, j));
            }
        }
        self.n_in = new_in;
        self.n_out = new_out;
        self.edges = edges;
    }

    fn insert_output<F: Fn() -> EdgeFunction>(&mut self, at: usize, make: F) {
        let old = self.clone();
        self.rebuild(old.n_in, old.n_out + 1, |i, j| {
            if j == at {
                make()
            } else {
                old.edge(i, if j < at { j } else { j - 1 }).clone()
            }
        });
    }

    fn insert_input<F: Fn() -> EdgeFunction>(&mut self, at: usize, make: F) {
        let old = self.clone();
        self.rebuild(old.n_in + 1, old.n_out, |i, j| {
            if i == at {
                make()
            } else {
                old.edge(if i < at { i } else { i - 1 }, j).clone()
            }
        });
    }

    fn remove_output(&mut self, at: usize) {
        let old = self.clone();
        self.rebuild(old.n_in, old.n_out - 1, |i, j| {
            old.edge(i, if j < at { j } else { j + 1 }).clone()
        });
    }

    fn remove_input(&mut self, at: usize) {
        let old = self.clone();
        self.rebuild(old.n_in - 1, old.n_out, |i, j| {
            old.edge(if i < at { i } else { i + 1 }, j).clone()
        });
    }

    fn swap_inputs(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..self.n_out {
            self.edges.swap(a * self.n_out + j, b * self.n_out + j);
        }
    }

    fn swap_outputs(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for i in 0..self.n_in {
            self.edges.swap(i * self.n_out + a, i * self.n_out + b);
        }
    }
}

/// Subnode-to-node wiring: copy the first `n_add` subnodes, multiply the
/// rest in consecutive groups of `arities[g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultLayer {
    pub n_add: usize,
    pub arities: Vec<usize>,
}

impl MultLayer {
    pub fn identity(n: usize) -> Self {
        MultLayer { n_add: n, arities: Vec::new() }
    }

    pub fn n_mult(&self) -> usize {
        self.arities.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_add + self.arities.len()
    }

    pub fn n_subnodes(&self) -> usize {
        self.n_add + self.arities.iter().sum::<usize>()
    }

    /// Subnode indices feeding the given node.
    pub fn subnode_range(&self, node: usize) -> std::ops::Range<usize> {
        if node < self.n_add {
            node..node + 1
        } else {
            let g = node - self.n_add;
            let start = self.n_add + self.arities[..g].iter().sum::<usize>();
            start..start + self.arities[g]
        }
    }

    pub fn node_of_subnode(&self, subnode: usize) -> usize {
        if subnode < self.n_add {
            return subnode;
        }
        let mut at = self.n_add;
        for (g, &a) in self.arities.iter().enumerate() {
            if subnode < at + a {
                return self.n_add + g;
            }
            at += a;
        }
        panic!("subnode {subnode} out of range");
    }

    pub(crate) fn apply_row(&self, sub: &[f64], out: &mut [f64]) {
        out[..self.n_add].copy_from_slice(&sub[..self.n_add]);
        let mut at = self.n_add;
        for (g, &a) in self.arities.iter().enumerate() {
            out[self.n_add + g] = sub[at..at + a].iter().product();
            at += a;
        }
    }
}

/// One block: a KAN layer followed by its multiplication wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kan: KanLayer,
    pub mult: MultLayer,
}

/// Activations recorded by a cached forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    /// Node values per level; `nodes[0]` is the input batch.
    pub nodes: Vec<Array2<f64>>,
    /// Per-block masked edge outputs, column `i * n_out + j`.
    pub edge_out: Vec<Array2<f64>>,
    /// Per-block subnode sums.
    pub subnodes: Vec<Array2<f64>>,
}

impl ActivationCache {
    pub fn output(&self) -> &Array2<f64> {
        self.nodes.last().expect("cache holds at least the input level")
    }
}

/// Addressed edge: block index, input node, output subnode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub layer: usize,
    pub in_node: usize,
    pub out_subnode: usize,
}

impl EdgeId {
    pub fn new(layer: usize, in_node: usize, out_subnode: usize) -> Self {
        EdgeId { layer, in_node, out_subnode }
    }
}

impl std::fmt::Display for EdgeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.layer, self.in_node, self.out_subnode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbScope {
    All,
    NewOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultKanModel {
    pub format_version: u32,
    pub input_names: Vec<String>,
    pub grid_spec: GridSpec,
    pub layers: Vec<Layer>,
    #[serde(skip)]
    pub cache: Option<ActivationCache>,
}

impl MultKanModel {
    /// Fresh model with noisy spline edges. With `sparse`, each subnode keeps
    /// only a couple of randomly chosen incoming edges unmasked.
    pub fn init(
        width: &WidthSpec,
        grid_spec: GridSpec,
        seed: u64,
        sparse: bool,
    ) -> Result<Self, ModelError> {
        width.validate()?;
        let grid = grid_spec.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for l in 0..width.levels.len() - 1 {
            let n_in = width.levels[l].n_add + width.levels[l].n_mult;
            let mult =
                MultLayer { n_add: width.levels[l + 1].n_add, arities: width.level_arities(l + 1) };
            let n_out = mult.n_subnodes();
            let std = INIT_NOISE / ((n_in * grid.n_basis()) as f64).sqrt();
            let mut kan = KanLayer::zeros(n_in, n_out, &grid);
            for i in 0..n_in {
                for j in 0..n_out {
                    *kan.edge_mut(i, j) = EdgeFunction::with_noise(grid.clone(), std, &mut rng);
                }
            }
            if sparse {
                let keep_count = n_in.min(2);
                for j in 0..n_out {
                    let keep = rand::seq::index::sample(&mut rng, n_in, keep_count);
                    for i in 0..n_in {
                        if !keep.iter().any(|k| k == i) {
                            kan.edge_mut(i, j).mask = 0.0;
                        }
                    }
                }
            }
            layers.push(Layer { kan, mult });
        }
        let n_inputs = width.levels[0].n_add;
        let input_names = (1..=n_inputs).map(|i| format!("x{i}")).collect();
        let model =
            MultKanModel { format_version: MODEL_FORMAT_VERSION, input_names, grid_spec, layers, cache: None };
        model.validate()?;
        Ok(model)
    }

    /// Assemble a model from prebuilt layers (the compiler path).
    pub fn from_layers(
        input_names: Vec<String>,
        grid_spec: GridSpec,
        layers: Vec<Layer>,
    ) -> Result<Self, ModelError> {
        let model = MultKanModel {
            format_version: MODEL_FORMAT_VERSION,
            input_names,
            grid_spec,
            layers,
            cache: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of node levels, inputs and outputs included.
    pub fn n_levels(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].kan.n_in
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map(|l| l.mult.n_nodes()).unwrap_or(0)
    }

    pub fn n_nodes(&self, level: usize) -> usize {
        if level == 0 {
            self.n_inputs()
        } else {
            self.layers[level - 1].mult.n_nodes()
        }
    }

    /// Per-level (n_add, n_mult) pairs.
    pub fn width(&self) -> Vec<(usize, usize)> {
        let mut w = vec![(self.n_inputs(), 0)];
        for layer in &self.layers {
            w.push((layer.mult.n_add, layer.mult.n_mult()));
        }
        w
    }

    pub fn edge_at(&self, id: EdgeId) -> Result<&EdgeFunction, ModelError> {
        let layer = self.layers.get(id.layer).ok_or(ModelError::InvalidEdge {
            layer: id.layer,
            in_node: id.in_node,
            out_subnode: id.out_subnode,
        })?;
        if id.in_node >= layer.kan.n_in || id.out_subnode >= layer.kan.n_out {
            return Err(ModelError::InvalidEdge {
                layer: id.layer,
                in_node: id.in_node,
                out_subnode: id.out_subnode,
            });
        }
        Ok(layer.kan.edge(id.in_node, id.out_subnode))
    }

    pub fn edge_at_mut(&mut self, id: EdgeId) -> Result<&mut EdgeFunction, ModelError> {
        self.edge_at(id)?;
        Ok(self.layers[id.layer].kan.edge_mut(id.in_node, id.out_subnode))
    }

    pub fn edge_ids(&self) -> Vec<EdgeId> {
        let mut ids = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for i in 0..layer.kan.n_in {
                for j in 0..layer.kan.n_out {
                    ids.push(EdgeId::new(l, i, j));
                }
            }
        }
        ids
    }

    pub fn for_each_edge_mut<F: FnMut(EdgeId, &mut EdgeFunction)>(&mut self, mut f: F) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let n_out = layer.kan.n_out;
            for (e, edge) in layer.kan.edges.iter_mut().enumerate() {
                f(EdgeId::new(l, e / n_out, e % n_out), edge);
            }
        }
    }

    pub fn frozen_edges(&self) -> Vec<EdgeId> {
        self.edge_ids()
            .into_iter()
            .filter(|&id| self.edge_at(id).map(|e| e.frozen).unwrap_or(false))
            .collect()
    }

    /// True when any active edge evaluates a symbolic branch.
    pub fn has_symbolic_edges(&self) -> bool {
        self.layers.iter().any(|layer| {
            layer.kan.edges.iter().any(|e| {
                e.is_active() && matches!(e.mode, EdgeMode::SymbolicOnly | EdgeMode::Both)
            })
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::FormatVersion(self.format_version));
        }
        if self.layers.is_empty() {
            return Err(ModelError::InvalidWidth("model has no layers".into()));
        }
        if self.input_names.len() != self.layers[0].kan.n_in {
            return Err(ModelError::InvalidWidth(format!(
                "{} input names for {} inputs",
                self.input_names.len(),
                self.layers[0].kan.n_in
            )));
        }
        let mut expected_in = self.layers[0].kan.n_in;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.kan.n_in != expected_in {
                return Err(ModelError::InvalidWidth(format!(
                    "layer {l} consumes {} nodes but receives {expected_in}",
                    layer.kan.n_in
                )));
            }
            if layer.kan.n_in == 0 || layer.kan.n_out == 0 {
                return Err(ModelError::EmptyLayer { layer: l });
            }
            if layer.kan.edges.len() != layer.kan.n_in * layer.kan.n_out {
                return Err(ModelError::InvalidWidth(format!("layer {l} edge count broken")));
            }
            if layer.kan.n_out != layer.mult.n_subnodes() {
                return Err(ModelError::InvalidWidth(format!(
                    "layer {l} emits {} subnodes but the mult stage expects {}",
                    layer.kan.n_out,
                    layer.mult.n_subnodes()
                )));
            }
            if layer.mult.arities.iter().any(|&a| a < 2) {
                return Err(ModelError::InvalidWidth(format!("layer {l}: arity below 2")));
            }
            for edge in &layer.kan.edges {
                if edge.mask != 0.0 && edge.mask != 1.0 {
                    return Err(ModelError::InvalidWidth(format!(
                        "layer {l}: mask must be 0 or 1"
                    )));
                }
                if matches!(edge.mode, EdgeMode::SymbolicOnly | EdgeMode::Both)
                    && edge.symbolic.is_none()
                {
                    return Err(ModelError::InvalidWidth(format!(
                        "layer {l}: symbolic mode without a symbolic spec"
                    )));
                }
                edge.spline.grid.validate()?;
                if edge.spline.coef.len() != edge.spline.grid.n_basis() {
                    return Err(ModelError::InvalidWidth(format!(
                        "layer {l}: coefficient count mismatch"
                    )));
                }
            }
            expected_in = layer.mult.n_nodes();
        }
        Ok(())
    }

    pub(crate) fn run_forward(
        &self,
        x: &Array2<f64>,
        extrap: Extrapolation,
        guard: GuardMode,
    ) -> Result<ActivationCache, ModelError> {
        if x.ncols() != self.n_inputs() {
            return Err(ModelError::DimensionMismatch { expected: self.n_inputs(), got: x.ncols() });
        }
        let batch = x.nrows();
        let mut nodes = vec![x.clone()];
        let mut edge_out = Vec::with_capacity(self.depth());
        let mut subnodes = Vec::with_capacity(self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            let cur = &nodes[l];
            let n_in = layer.kan.n_in;
            let n_out = layer.kan.n_out;
            let mut eo = Array2::zeros((batch, n_in * n_out));
            let mut sub = Array2::zeros((batch, n_out));
            for i in 0..n_in {
                for j in 0..n_out {
                    let edge = layer.kan.edge(i, j);
                    if !edge.is_active() {
                        continue;
                    }
                    for s in 0..batch {
                        let v = edge.value(cur[[s, i]], extrap, guard).map_err(|source| {
                            ModelError::EdgeEval { layer: l, in_node: i, out_subnode: j, source }
                        })?;
                        eo[[s, i * n_out + j]] = v;
                        sub[[s, j]] += v;
                    }
                }
            }
            let mut out = Array2::zeros((batch, layer.mult.n_nodes()));
            for s in 0..batch {
                layer.mult.apply_row(
                    sub.row(s).as_slice().expect("row is contiguous"),
                    out.row_mut(s).as_slice_mut().expect("row is contiguous"),
                );
            }
            if sub.iter().any(|v| !v.is_finite()) || out.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: l });
            }
            edge_out.push(eo);
            subnodes.push(sub);
            nodes.push(out);
        }
        Ok(ActivationCache { nodes, edge_out, subnodes })
    }

    /// Training-mode forward: out-of-domain spline inputs clamp, symbolic
    /// domains are guarded.
    pub fn forward(&mut self, x: &Array2<f64>, keep_cache: bool) -> Result<Array2<f64>, ModelError> {
        let cache = self.run_forward(x, Extrapolation::Clamp, GuardMode::Clamp)?;
        let out = cache.output().clone();
        self.cache = if keep_cache { Some(cache) } else { None };
        Ok(out)
    }

    /// Strict forward: out-of-domain anywhere is an error.
    pub fn forward_strict(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.run_forward(x, Extrapolation::Error, GuardMode::Strict)?.output().clone())
    }

    fn clear_new_flags(&mut self) {
        self.for_each_edge_mut(|_, e| e.is_new = false);
    }

    /// Edges created by the most recent expansion.
    pub fn new_edges(&self) -> Vec<EdgeId> {
        self.edge_ids()
            .into_iter()
            .filter(|&id| self.edge_at(id).map(|e| e.is_new).unwrap_or(false))
            .collect()
    }

    /// Widen a hidden level with extra addition and multiplication nodes.
    /// All new edges are dead (masked, zero), so the function is unchanged.
    pub fn expand_width(
        &mut self,
        level: usize,
        extra_adds: usize,
        extra_mults: usize,
    ) -> Result<(), ModelError> {
        if level == 0 || level >= self.n_levels() - 1 {
            return Err(ModelError::InvalidLayer { layer: level });
        }
        self.clear_new_flags();
        let grid = self.grid_spec.grid()?;
        let prev = level - 1;
        let make = || {
            let mut e = EdgeFunction::zeroed(grid.clone());
            e.is_new = true;
            e
        };
        let old_add = self.layers[prev].mult.n_add;
        for t in 0..extra_adds {
            self.layers[prev].kan.insert_output(old_add + t, make);
            self.layers[level].kan.insert_input(old_add + t, make);
        }
        self.layers[prev].mult.n_add += extra_adds;
        for _ in 0..extra_mults {
            let sub_end = self.layers[prev].mult.n_subnodes();
            self.layers[prev].kan.insert_output(sub_end, make);
            self.layers[prev].kan.insert_output(sub_end + 1, make);
            self.layers[prev].mult.arities.push(2);
            let node_end = self.layers[prev].mult.n_nodes() - 1;
            self.layers[level].kan.insert_input(node_end, make);
        }
        self.cache = None;
        self.validate()
    }

    /// Insert an exact identity block at the given level (0 prepends,
    /// depth() appends after the output).
    pub fn expand_depth(&mut self, at_level: usize) -> Result<(), ModelError> {
        if at_level > self.depth() {
            return Err(ModelError::InvalidLayer { layer: at_level });
        }
        self.clear_new_flags();
        let grid = self.grid_spec.grid()?;
        let n = self.n_nodes(at_level);
        let mut kan = KanLayer::zeros(n, n, &grid);
        for e in kan.edges.iter_mut() {
            e.is_new = true;
        }
        for i in 0..n {
            let mut id = EdgeFunction::identity(grid.clone());
            id.is_new = true;
            *kan.edge_mut(i, i) = id;
        }
        self.layers.insert(at_level, Layer { kan, mult: MultLayer::identity(n) });
        self.cache = None;
        self.validate()
    }

    /// Add noise to spline coefficients and reveal masked edges. Dead edges
    /// restart from pure noise with no residual term, so magnitude 0 never
    /// changes the computed function. Symbolic-only edges in scope become
    /// trainable (mode both). Frozen edges are left alone.
    pub fn perturb(
        &mut self,
        magnitude: f64,
        scope: PerturbScope,
        seed: u64,
    ) -> Result<(), ModelError> {
        if !(magnitude >= 0.0) {
            return Err(ModelError::BadArgument("perturb magnitude must be >= 0".into()));
        }
        let normal =
            Normal::new(0.0, magnitude).map_err(|e| ModelError::BadArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.for_each_edge_mut(|_, edge| {
            let in_scope = matches!(scope, PerturbScope::All) || edge.is_new;
            if !in_scope || edge.frozen {
                return;
            }
            if edge.mode == EdgeMode::SymbolicOnly {
                edge.mode = EdgeMode::Both;
            }
            if edge.mask == 0.0 {
                edge.mask = 1.0;
                edge.base_scale = 0.0;
                for c in edge.spline.coef.iter_mut() {
                    *c = normal.sample(&mut rng);
                }
            } else {
                for c in edge.spline.coef.iter_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
        });
        self.cache = None;
        Ok(())
    }

    /// Mask and freeze every edge crossing a module boundary.
    ///
    /// The spec alternates node and subnode index groups starting at
    /// `start_layer`: `[nodes]->[subnodes]->[nodes]->...`.
    pub fn apply_module_constraint(
        &mut self,
        start_layer: usize,
        spec: &str,
    ) -> Result<(), ModelError> {
        let stages = parse_module_spec(spec)?;
        if stages.len() < 2 {
            return Err(ModelError::ModuleSpec("need at least two stages".into()));
        }
        if start_layer >= self.depth() {
            return Err(ModelError::InvalidLayer { layer: start_layer });
        }
        let n_pairs = stages.len() / 2;
        if start_layer + n_pairs > self.depth() {
            return Err(ModelError::ModuleSpec(format!(
                "spec spans {n_pairs} layers starting at {start_layer}, model has {}",
                self.depth()
            )));
        }
        // Bounds checks before mutating anything.
        for (s, stage) in stages.iter().enumerate() {
            let (limit, what) = if s % 2 == 0 {
                (self.n_nodes(start_layer + s / 2), "node")
            } else {
                (self.layers[start_layer + s / 2].kan.n_out, "subnode")
            };
            if let Some(&bad) = stage.iter().find(|&&i| i >= limit) {
                return Err(ModelError::ModuleSpec(format!(
                    "{what} index {bad} out of range in stage {s}"
                )));
            }
        }
        // Subnode stages must agree with the multiplication grouping of the
        // following node stage.
        for t in 0..n_pairs {
            let sub_stage = 2 * t + 1;
            let Some(node_stage) = stages.get(2 * t + 2) else { break };
            let mult = &self.layers[start_layer + t].mult;
            let implied: BTreeSet<usize> =
                node_stage.iter().flat_map(|&n| mult.subnode_range(n)).collect();
            if implied != stages[sub_stage] {
                return Err(ModelError::ModuleSpec(format!(
                    "stage {sub_stage} subnodes do not match the node group of stage {}",
                    2 * t + 2
                )));
            }
        }
        for t in 0..n_pairs {
            let nodes = &stages[2 * t];
            let subs = &stages[2 * t + 1];
            let kan = &mut self.layers[start_layer + t].kan;
            for i in 0..kan.n_in {
                for j in 0..kan.n_out {
                    if nodes.contains(&i) != subs.contains(&j) {
                        let e = kan.edge_mut(i, j);
                        e.mask = 0.0;
                        e.frozen = true;
                    }
                }
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Physically delete a hidden node and its incident edges.
    pub fn remove_node(&mut self, level: usize, node: usize) -> Result<(), ModelError> {
        if level == 0 || level >= self.n_levels() - 1 {
            return Err(ModelError::InvalidLayer { layer: level });
        }
        if node >= self.n_nodes(level) {
            return Err(ModelError::InvalidNode { layer: level, node });
        }
        if self.n_nodes(level) == 1 {
            return Err(ModelError::EmptyLayer { layer: level });
        }
        let prev = level - 1;
        let range = self.layers[prev].mult.subnode_range(node);
        for j in range.clone().rev() {
            self.layers[prev].kan.remove_output(j);
        }
        let mult = &mut self.layers[prev].mult;
        if node < mult.n_add {
            mult.n_add -= 1;
        } else {
            mult.arities.remove(node - mult.n_add);
        }
        self.layers[level].kan.remove_input(node);
        self.cache = None;
        self.validate()
    }

    /// Keep only the flagged inputs; returns the retained names.
    pub fn retain_inputs(&mut self, keep: &[bool]) -> Result<Vec<String>, ModelError> {
        if keep.len() != self.n_inputs() {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_inputs(),
                got: keep.len(),
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(ModelError::EmptyLayer { layer: 0 });
        }
        for i in (0..keep.len()).rev() {
            if !keep[i] {
                self.layers[0].kan.remove_input(i);
                self.input_names.remove(i);
            }
        }
        self.cache = None;
        self.validate()?;
        Ok(self.input_names.clone())
    }

    /// Swap two same-kind nodes in a hidden level, rewiring both sides.
    pub fn swap_nodes(&mut self, level: usize, a: usize, b: usize) -> Result<(), ModelError> {
        if level == 0 || level >= self.n_levels() - 1 {
            return Err(ModelError::InvalidLayer { layer: level });
        }
        let n = self.n_nodes(level);
        if a >= n || b >= n {
            return Err(ModelError::InvalidNode { layer: level, node: a.max(b) });
        }
        if a == b {
            return Ok(());
        }
        let prev = level - 1;
        let n_add = self.layers[prev].mult.n_add;
        let both_add = a < n_add && b < n_add;
        let both_mult = a >= n_add && b >= n_add;
        if both_add {
            self.layers[prev].kan.swap_outputs(a, b);
        } else if both_mult {
            let ra = self.layers[prev].mult.subnode_range(a);
            let rb = self.layers[prev].mult.subnode_range(b);
            if ra.len() != rb.len() {
                return Err(ModelError::BadArgument(
                    "cannot swap multiplication nodes of different arity".into(),
                ));
            }
            for (ja, jb) in ra.zip(rb) {
                self.layers[prev].kan.swap_outputs(ja, jb);
            }
        } else {
            return Err(ModelError::BadArgument(
                "cannot swap an addition node with a multiplication node".into(),
            ));
        }
        self.layers[level].kan.swap_inputs(a, b);
        self.cache = None;
        Ok(())
    }

    /// Re-place every trainable spline grid on the activation quantiles of
    /// the last cached forward pass.
    pub fn update_grids_from_cache(&mut self) -> Result<(), ModelError> {
        let cache = self.cache.take().ok_or(ModelError::NoCache)?;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let n_out = layer.kan.n_out;
            for (e, edge) in layer.kan.edges.iter_mut().enumerate() {
                if !edge.is_active() || edge.frozen || edge.mode == EdgeMode::SymbolicOnly {
                    continue;
                }
                let i = e / n_out;
                let xs: Vec<f64> = cache.nodes[l].column(i).to_vec();
                let g = edge.spline.grid.num_intervals();
                edge.spline = crate::spline::refine_grid(
                    &edge.spline,
                    g,
                    &xs,
                    KnotPlacement::Quantile,
                )?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: MultKanModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn parse_module_spec(spec: &str) -> Result<Vec<BTreeSet<usize>>, ModelError> {
    let mut stages = Vec::new();
    for part in spec.split("->") {
        let part = part.trim();
        let inner = part
            .strip_prefix('[')
            .and_then(|p| p.strip_suffix(']'))
            .ok_or_else(|| ModelError::ModuleSpec(format!("stage `{part}` is not bracketed")))?;
        let mut stage = BTreeSet::new();
        for tok in inner.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                return Err(ModelError::ModuleSpec(format!("empty index in `{part}`")));
            }
            let idx: usize = tok
                .parse()
                .map_err(|_| ModelError::ModuleSpec(format!("bad index `{tok}`")))?;
            stage.insert(idx);
        }
        stages.push(stage);
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::Primitive;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    // ===== independent scalar oracle =====

    /// Naive recursive Cox-de Boor, deliberately separate from the windowed
    /// evaluation in the spline module.
    fn naive_basis(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let dl = knots[i + k] - knots[i];
        if dl > 0.0 {
            v += (x - knots[i]) / dl * naive_basis(knots, i, k - 1, x);
        }
        let dr = knots[i + k + 1] - knots[i + 1];
        if dr > 0.0 {
            v += (knots[i + k + 1] - x) / dr * naive_basis(knots, i + 1, k - 1, x);
        }
        v
    }

    fn naive_edge(edge: &EdgeFunction, x: f64) -> f64 {
        if edge.mask == 0.0 {
            return 0.0;
        }
        let mut v = 0.0;
        if matches!(edge.mode, EdgeMode::SplineOnly | EdgeMode::Both) {
            let s = 1.0 / (1.0 + (-x).exp());
            v += edge.base_scale * x * s;
            let (lo, hi) = edge.spline.grid.domain();
            let mut cx = x.clamp(lo, hi);
            if cx >= hi {
                // naive_basis is right-open at the final knot; the production
                // code closes the domain there. Step inside instead.
                cx = hi - 1e-12 * (hi - lo);
            }
            let mut sv = 0.0;
                for (i, &c) in edge.spline.coef.iter().enumerate() {
                sv += c * naive_basis(edge.spline.grid.knots(), i, edge.spline.grid.order(), cx);
            }
            v += edge.spline_scale * sv;
        }
        if let Some(spec) = &edge.symbolic {
            if matches!(edge.mode, EdgeMode::SymbolicOnly | EdgeMode::Both) {
                let u = spec.a * x + spec.b;
                let f = spec.prim.eval(u, GuardMode::Clamp).unwrap();
                v += spec.c * f + spec.d;
            }
        }
        edge.mask * v
    }

    fn naive_forward(model: &MultKanModel, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &model.layers {
            let mut sub = vec![0.0; layer.kan.n_out];
            for j in 0..layer.kan.n_out {
                for i in 0..layer.kan.n_in {
                    sub[j] += naive_edge(layer.kan.edge(i, j), cur[i]);
                }
            }
            let mut out = vec![0.0; layer.mult.n_nodes()];
            layer.mult.apply_row(&sub, &mut out);
            cur = out;
        }
        cur
    }

    fn random_inputs(n: usize, dim: usize, seed: u64, lo: f64, hi: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dim), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn width_construction_shapes() {
        let m = MultKanModel::init(&WidthSpec::from_pairs(&[(2, 0), (1, 0)]), GridSpec::default(), 0, false)
            .unwrap();
        assert_eq!(m.depth(), 1);
        assert_eq!(m.layers[0].kan.n_in, 2);
        assert_eq!(m.layers[0].kan.n_out, 1);
        assert_eq!(m.layers[0].mult.n_mult(), 0);

        let m = MultKanModel::init(&WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]), GridSpec::default(), 0, false)
            .unwrap();
        assert_eq!(m.layers[0].kan.n_out, 2);
        assert_eq!(m.layers[0].mult.n_nodes(), 1);
        assert_eq!(m.layers[1].kan.n_in, 1);
    }

    #[test]
    fn invalid_widths_are_rejected() {
        assert!(MultKanModel::init(&WidthSpec::from_pairs(&[(2, 0)]), GridSpec::default(), 0, false).is_err());
        let w = WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]).with_arities(1, vec![1]);
        assert!(MultKanModel::init(&w, GridSpec::default(), 0, false).is_err());
        let w = WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]).with_arities(1, vec![2, 2]);
        assert!(MultKanModel::init(&w, GridSpec::default(), 0, false).is_err());
    }

    #[test]
    fn multiplication_node_multiplies() {
        // Two identity edges into one binary mult node, identity readout.
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]),
            GridSpec::default(),
            0,
            false,
        )
        .unwrap();
        let grid = m.grid_spec.grid().unwrap();
        for layer in m.layers.iter_mut() {
            for e in layer.kan.edges.iter_mut() {
                *e = EdgeFunction::zeroed(grid.clone());
            }
        }
        *m.layers[0].kan.edge_mut(0, 0) = EdgeFunction::identity(grid.clone());
        *m.layers[0].kan.edge_mut(1, 1) = EdgeFunction::identity(grid.clone());
        *m.layers[1].kan.edge_mut(0, 0) = EdgeFunction::identity(grid.clone());
        let out = m.forward(&array![[3.0, 4.0]], false).unwrap();
        assert!((out[[0, 0]] - 12.0).abs() < 1e-9);
    }

    #[test]
    fn sparse_init_masks_most_edges() {
        let m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(5, 0), (5, 0), (1, 0)]),
            GridSpec::default(),
            3,
            true,
        )
        .unwrap();
        let dense: usize = m.layers.iter().map(|l| l.kan.edges.len()).sum();
        let active: usize = m
            .layers
            .iter()
            .map(|l| l.kan.edges.iter().filter(|e| e.is_active()).count())
            .sum();
        assert!(active * 2 <= dense, "{active} of {dense} edges active");
        // Every subnode keeps at least one live edge.
        for layer in &m.layers {
            for j in 0..layer.kan.n_out {
                assert!((0..layer.kan.n_in).any(|i| layer.kan.edge(i, j).is_active()));
            }
        }
    }

    #[test]
    fn all_masked_edges_output_zero() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(3, 0), (2, 1), (1, 0)]),
            GridSpec::default(),
            1,
            false,
        )
        .unwrap();
        m.for_each_edge_mut(|_, e| e.mask = 0.0);
        let x = random_inputs(20, 3, 9, -1.0, 1.0);
        let out = m.forward(&x, false).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let w = WidthSpec::from_pairs(&[(3, 0), (2, 2), (1, 1), (1, 0)]).with_arities(1, vec![2, 3]);
        let mut m = MultKanModel::init(&w, GridSpec::default(), 42, false).unwrap();
        // Exercise the symbolic branch in one edge too.
        m.layers[1].kan.edge_mut(0, 1).mode = EdgeMode::Both;
        m.layers[1].kan.edge_mut(0, 1).symbolic =
            Some(SymbolicSpec::new(Primitive::Sin, 1.0, 0.3, 0.5, 0.0));
        let xs = random_inputs(100, 3, 7, -1.2, 1.2);
        let out = m.forward(&xs, false).unwrap();
        for s in 0..xs.nrows() {
            let want = naive_forward(&m, xs.row(s).as_slice().unwrap());
            for (j, &w) in want.iter().enumerate() {
                assert!(
                    (out[[s, j]] - w).abs() < 1e-10,
                    "sample {s} output {j}: {} vs {w}",
                    out[[s, j]]
                );
            }
        }
    }

    #[test]
    fn plain_kan_reduction_matches_oracle_tightly() {
        let m = MultKanModel::init(
            &WidthSpec::nodes(&[4, 3, 2]),
            GridSpec::default(),
            5,
            false,
        )
        .unwrap();
        let xs = random_inputs(60, 4, 11, -0.95, 0.95);
        let out = m.run_forward(&xs, Extrapolation::Clamp, GuardMode::Clamp).unwrap();
        for s in 0..xs.nrows() {
            let want = naive_forward(&m, xs.row(s).as_slice().unwrap());
            for (j, &w) in want.iter().enumerate() {
                assert!((out.output()[[s, j]] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cache_shapes_are_consistent() {
        let w = WidthSpec::from_pairs(&[(3, 0), (1, 1), (1, 0)]);
        let mut m = MultKanModel::init(&w, GridSpec::default(), 2, false).unwrap();
        let xs = random_inputs(17, 3, 3, -1.0, 1.0);
        m.forward(&xs, true).unwrap();
        let cache = m.cache.as_ref().unwrap();
        assert_eq!(cache.nodes.len(), 3);
        assert_eq!(cache.nodes[0].dim(), (17, 3));
        assert_eq!(cache.nodes[1].dim(), (17, 2));
        assert_eq!(cache.nodes[2].dim(), (17, 1));
        assert_eq!(cache.subnodes[0].dim(), (17, 3));
        assert_eq!(cache.edge_out[0].dim(), (17, 9));
    }

    #[test]
    fn expand_width_preserves_outputs_exactly() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(3, 0), (2, 1), (1, 0)]),
            GridSpec::default(),
            8,
            false,
        )
        .unwrap();
        let xs = random_inputs(50, 3, 13, -1.0, 1.0);
        let before = m.forward(&xs, false).unwrap();
        m.expand_width(1, 2, 1).unwrap();
        assert_eq!(m.width()[1], (4, 2));
        let after = m.forward(&xs, false).unwrap();
        assert_eq!(before, after);
        // 4 new subnode columns times 3 inputs, plus 3 new input rows into
        // the single-output readout layer.
        assert_eq!(m.new_edges().len(), 4 * 3 + 3);
    }

    #[test]
    fn expand_depth_inserts_exact_identity() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(2, 0), (2, 0), (1, 0)]),
            GridSpec::default(),
            21,
            false,
        )
        .unwrap();
        let xs = random_inputs(40, 2, 17, -1.0, 1.0);
        let before = m.forward(&xs, false).unwrap();
        m.expand_depth(2).unwrap();
        assert_eq!(m.depth(), 3);
        let after = m.forward(&xs, false).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Appending after the output keeps the function.
        m.expand_depth(m.depth()).unwrap();
        let after2 = m.forward(&xs, false).unwrap();
        for (a, b) in before.iter().zip(after2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn expand_perturb_rezero_round_trips() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(2, 0), (3, 0), (1, 0)]),
            GridSpec::default(),
            4,
            false,
        )
        .unwrap();
        let xs = random_inputs(30, 2, 19, -1.0, 1.0);
        let before = m.forward(&xs, false).unwrap();
        m.expand_width(1, 2, 0).unwrap();
        let new = m.new_edges();
        assert!(!new.is_empty());
        m.perturb(0.3, PerturbScope::NewOnly, 99).unwrap();
        let noisy = m.forward(&xs, false).unwrap();
        assert!(noisy.iter().zip(before.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
        for id in &new {
            m.edge_at_mut(*id).unwrap().mask = 0.0;
        }
        let again = m.forward(&xs, false).unwrap();
        for (a, b) in before.iter().zip(again.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn perturb_zero_magnitude_is_identity() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(2, 0), (1, 1), (1, 0)]),
            GridSpec::default(),
            6,
            true,
        )
        .unwrap();
        let xs = random_inputs(25, 2, 23, -1.0, 1.0);
        let before = m.forward(&xs, false).unwrap();
        m.perturb(0.0, PerturbScope::All, 1).unwrap();
        let after = m.forward(&xs, false).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn perturb_wakes_the_zero_model() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(2, 0), (2, 0), (1, 0)]),
            GridSpec::default(),
            6,
            false,
        )
        .unwrap();
        let grid = m.grid_spec.grid().unwrap();
        m.for_each_edge_mut(|_, e| *e = EdgeFunction::zeroed(grid.clone()));
        m.perturb(0.1, PerturbScope::All, 31).unwrap();
        let xs = random_inputs(200, 2, 29, -1.0, 1.0);
        let out = m.forward(&xs, false).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let std =
            (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64).sqrt();
        assert!(std > 0.0 && std < 1.0, "std {std}");
    }

    #[test]
    fn compiled_symbolic_model_gains_spline_branch_on_perturb() {
        let grid = Grid::uniform(5, 3, -1.0, 1.0).unwrap();
        let mut kan = KanLayer::zeros(1, 1, &grid);
        *kan.edge_mut(0, 0) = EdgeFunction::symbolic(
            grid.clone(),
            SymbolicSpec::new(Primitive::Sin, 1.0, 0.0, 1.0, 0.0),
        );
        let mut m = MultKanModel::from_layers(
            vec!["x1".into()],
            GridSpec::default(),
            vec![Layer { kan, mult: MultLayer::identity(1) }],
        )
        .unwrap();
        assert_eq!(m.layers[0].kan.edge(0, 0).mode, EdgeMode::SymbolicOnly);
        m.perturb(0.0, PerturbScope::All, 0).unwrap();
        assert_eq!(m.layers[0].kan.edge(0, 0).mode, EdgeMode::Both);
        let out = m.forward(&array![[0.5]], false).unwrap();
        assert!((out[[0, 0]] - 0.5f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn module_constraint_masks_crossing_edges() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(4, 0), (4, 0), (1, 0)]),
            GridSpec::default(),
            10,
            false,
        )
        .unwrap();
        m.apply_module_constraint(0, "[0]->[0]").unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = m.layers[0].kan.edge(i, j);
                let crossing = (i == 0) != (j == 0);
                assert_eq!(e.mask == 0.0, crossing, "edge ({i},{j})");
                assert_eq!(e.frozen, crossing);
            }
        }
        assert_eq!(m.frozen_edges().len(), 6);
    }

    #[test]
    fn module_constraint_covering_everything_is_a_noop() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(3, 0), (3, 0), (1, 0)]),
            GridSpec::default(),
            10,
            false,
        )
        .unwrap();
        let before = m.clone();
        m.apply_module_constraint(0, "[0,1,2]->[0,1,2]").unwrap();
        assert_eq!(before, m);
    }

    #[test]
    fn module_constraint_spans_multiple_layers() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(4, 0), (4, 0), (4, 0), (1, 0)]),
            GridSpec::default(),
            10,
            false,
        )
        .unwrap();
        m.apply_module_constraint(0, "[0,1]->[0,1]->[0,1]->[0]").unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let crossing = (i < 2) != (j < 2);
                assert_eq!(m.layers[0].kan.edge(i, j).mask == 0.0, crossing, "layer 0 ({i},{j})");
                // Second pair funnels the module into subnode 0.
                let crossing = (i < 2) != (j == 0);
                assert_eq!(m.layers[1].kan.edge(i, j).mask == 0.0, crossing, "layer 1 ({i},{j})");
            }
        }
        assert!(m.layers[2].kan.edges.iter().all(|e| e.mask == 1.0));
    }

    #[test]
    fn module_constraint_rejects_bad_specs() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(4, 0), (2, 1), (1, 0)]),
            GridSpec::default(),
            10,
            false,
        )
        .unwrap();
        assert!(matches!(
            m.apply_module_constraint(0, "[0]->[9]"),
            Err(ModelError::ModuleSpec(_))
        ));
        assert!(matches!(
            m.apply_module_constraint(0, "0->[1]"),
            Err(ModelError::ModuleSpec(_))
        ));
        // Splitting the mult group of node 2 across the boundary.
        assert!(matches!(
            m.apply_module_constraint(0, "[0]->[2]->[2]"),
            Err(ModelError::ModuleSpec(_))
        ));
    }

    #[test]
    fn remove_node_drops_its_mult_group() {
        let w = WidthSpec::from_pairs(&[(2, 0), (1, 2), (1, 0)]).with_arities(1, vec![2, 3]);
        let mut m = MultKanModel::init(&w, GridSpec::default(), 12, false).unwrap();
        assert_eq!(m.layers[0].kan.n_out, 6);
        m.remove_node(1, 2).unwrap();
        assert_eq!(m.width()[1], (1, 1));
        assert_eq!(m.layers[0].kan.n_out, 3);
        assert_eq!(m.layers[1].kan.n_in, 2);
        m.remove_node(1, 0).unwrap();
        assert_eq!(m.width()[1], (0, 1));
        assert!(matches!(m.remove_node(1, 0), Err(ModelError::EmptyLayer { layer: 1 })));
    }

    #[test]
    fn retain_inputs_rewires_layer_zero() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(4, 0), (2, 0), (1, 0)]),
            GridSpec::default(),
            14,
            false,
        )
        .unwrap();
        let kept = m.retain_inputs(&[true, false, true, false]).unwrap();
        assert_eq!(kept, vec!["x1".to_string(), "x3".to_string()]);
        assert_eq!(m.n_inputs(), 2);
        let out = m.forward(&random_inputs(5, 2, 1, -1.0, 1.0), false).unwrap();
        assert_eq!(out.ncols(), 1);
    }

    #[test]
    fn swap_nodes_preserves_the_function() {
        let w = WidthSpec::from_pairs(&[(3, 0), (2, 2), (1, 0)]);
        let mut m = MultKanModel::init(&w, GridSpec::default(), 15, false).unwrap();
        let xs = random_inputs(40, 3, 37, -1.0, 1.0);
        let before = m.forward(&xs, false).unwrap();
        m.swap_nodes(1, 0, 1).unwrap();
        m.swap_nodes(1, 2, 3).unwrap();
        let after = m.forward(&xs, false).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.swap_nodes(1, 0, 2).is_err());
    }

    #[test]
    fn strict_forward_rejects_out_of_domain() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(1, 0), (1, 0)]),
            GridSpec::default(),
            16,
            false,
        )
        .unwrap();
        let x = array![[5.0]];
        assert!(m.forward(&x, false).is_ok());
        assert!(matches!(m.forward_strict(&x), Err(ModelError::EdgeEval { .. })));
    }

    #[test]
    fn overflow_reports_nonfinite_layer() {
        // Two guarded exponentials top out near 1e304 each; their product
        // overflows at the multiplication node.
        let grid = Grid::uniform(5, 3, -1.0, 1.0).unwrap();
        let mut kan = KanLayer::zeros(1, 2, &grid);
        for j in 0..2 {
            *kan.edge_mut(0, j) = EdgeFunction::symbolic(
                grid.clone(),
                SymbolicSpec::new(Primitive::Exp, 1.0, 0.0, 1.0, 0.0),
            );
        }
        let mut m = MultKanModel::from_layers(
            vec!["x1".into()],
            GridSpec::default(),
            vec![Layer { kan, mult: MultLayer { n_add: 0, arities: vec![2] } }],
        )
        .unwrap();
        match m.forward(&array![[1000.0]], false) {
            Err(ModelError::NonFinite { layer }) => assert_eq!(layer, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let w = WidthSpec::from_pairs(&[(3, 0), (2, 1), (1, 0)]);
        let mut m = MultKanModel::init(&w, GridSpec::default(), 77, false).unwrap();
        m.layers[0].kan.edge_mut(0, 0).symbolic =
            Some(SymbolicSpec::new(Primitive::Tanh, 1.1, 0.2, 0.9, -0.3));
        m.layers[0].kan.edge_mut(0, 0).mode = EdgeMode::Both;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let mut loaded = MultKanModel::load(&path).unwrap();
        assert_eq!(m, loaded);
        let xs = random_inputs(30, 3, 41, -1.3, 1.3);
        let a = m.forward(&xs, false).unwrap();
        let b = loaded.forward(&xs, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn update_grids_tracks_activation_quantiles() {
        let mut m = MultKanModel::init(
            &WidthSpec::from_pairs(&[(1, 0), (1, 0)]),
            GridSpec::default(),
            19,
            false,
        )
        .unwrap();
        // Inputs concentrated in [0, 0.5]; the refreshed grid should shrink.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = Array2::from_shape_fn((400, 1), |_| rng.gen_range(0.0..0.5));
        let before = m.forward(&xs, true).unwrap();
        m.update_grids_from_cache().unwrap();
        let (lo, hi) = m.layers[0].kan.edge(0, 0).spline.grid.domain();
        assert!(lo >= -0.01 && hi <= 0.51, "domain ({lo}, {hi})");
        let after = m.forward(&xs, false).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!(matches!(m.update_grids_from_cache(), Err(ModelError::NoCache)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn masked_edge_coefficients_never_matter(seed in 0u64..500, which in 0usize..9) {
            let w = WidthSpec::from_pairs(&[(3, 0), (3, 0), (1, 0)]);
            let mut m = MultKanModel::init(&w, GridSpec::default(), seed, false).unwrap();
            let id = EdgeId::new(0, which / 3, which % 3);
            m.edge_at_mut(id).unwrap().mask = 0.0;
            let xs = random_inputs(10, 3, seed ^ 0xabcd, -1.0, 1.0);
            let before = m.forward(&xs, false).unwrap();
            for c in m.edge_at_mut(id).unwrap().spline.coef.iter_mut() {
                *c += 1234.5;
            }
            m.edge_at_mut(id).unwrap().base_scale = 7.0;
            let after = m.forward(&xs, false).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
