//! Attribution scores and score-driven pruning.
//!
//! Scores flow backward from unit output scores: each edge receives the
//! target subnode's score scaled by the ratio of the edge's activation
//! spread to the subnode's, and a node's score is the sum over its
//! outgoing edges. Subnodes of a multiplication node inherit the product
//! node's score.

use crate::model::{ModelError, MultKanModel};
use crate::primitives::GuardMode;
use crate::spline::Extrapolation;
use ndarray::Array2;
use std::fmt::Write as _;
use thiserror::Error;

/// Nodes whose activation spread is below this propagate zero score.
const STD_GUARD: f64 = 1e-9;

pub const DEFAULT_NODE_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("attribution needs a non-empty batch")]
    EmptyBatch,
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("thresholds (node {node}, edge {edge}) prune every path to the output")]
    AllPruned { node: f64, edge: f64 },
    #[error("no inputs reach score {0}")]
    NoInputs(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Node and edge attribution over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    /// A[l][i] per node level; the last level is all ones.
    pub node_scores: Vec<Vec<f64>>,
    /// B[l] with shape (n_in, n_out_subnodes) per block.
    pub edge_scores: Vec<Array2<f64>>,
    /// Per-edge activation standard deviation, same shape as edge_scores.
    pub edge_std: Vec<Array2<f64>>,
    /// Activation standard deviation per node level.
    pub node_std: Vec<Vec<f64>>,
    /// Spread of each block's subnode sums; the recursion's denominator.
    pub subnode_std: Vec<Vec<f64>>,
}

impl AttributionScores {
    pub fn input_scores(&self) -> &[f64] {
        &self.node_scores[0]
    }

    pub fn edge_score(&self, layer: usize, i: usize, j: usize) -> f64 {
        self.edge_scores[layer][[i, j]]
    }

    /// CSV rows `kind,layer,index,value`; edge indices print as `i->j`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,layer,index,value\n");
        for (l, level) in self.node_scores.iter().enumerate() {
            for (i, a) in level.iter().enumerate() {
                writeln!(out, "node,{l},{i},{a}").expect("string write");
            }
        }
        for (l, b) in self.edge_scores.iter().enumerate() {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    writeln!(out, "edge,{l},{i}->{j},{}", b[[i, j]]).expect("string write");
                }
            }
        }
        out
    }
}

fn column_std(m: &Array2<f64>, col: usize) -> f64 {
    let n = m.nrows() as f64;
    let mean = m.column(col).sum() / n;
    let var = m.column(col).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Backward recursion over precomputed spreads. Split out so the scale
/// covariance of the arithmetic is testable in isolation.
pub(crate) fn propagate_scores(
    model: &MultKanModel,
    edge_std: &[Array2<f64>],
    subnode_std: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Array2<f64>>) {
    let depth = model.depth();
    let mut node_scores = vec![Vec::new(); depth + 1];
    let mut edge_scores = vec![Array2::zeros((0, 0)); depth];
    node_scores[depth] = vec![1.0; model.n_outputs()];
    for l in (0..depth).rev() {
        let layer = &model.layers[l];
        let n_in = layer.kan.n_in;
        let n_out = layer.kan.n_out;
        let mut sub_score = vec![0.0; n_out];
        for node in 0..layer.mult.n_nodes() {
            for j in layer.mult.subnode_range(node) {
                sub_score[j] = node_scores[l + 1][node];
            }
        }
        let mut b = Array2::zeros((n_in, n_out));
        let mut a = vec![0.0; n_in];
        for i in 0..n_in {
            for j in 0..n_out {
                let n = subnode_std[l][j];
                if n >= STD_GUARD {
                    b[[i, j]] = sub_score[j] * edge_std[l][[i, j]] / n;
                }
                a[i] += b[[i, j]];
            }
        }
        node_scores[l] = a;
        edge_scores[l] = b;
    }
    (node_scores, edge_scores)
}

pub fn compute_attribution(
    model: &MultKanModel,
    x: &Array2<f64>,
) -> Result<AttributionScores, AttributionError> {
    if x.nrows() == 0 {
        return Err(AttributionError::EmptyBatch);
    }
    let cache = model.run_forward(x, Extrapolation::Clamp, GuardMode::Clamp)?;
    let mut edge_std = Vec::with_capacity(model.depth());
    let mut subnode_std = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        let n_out = layer.kan.n_out;
        let e = Array2::from_shape_fn((layer.kan.n_in, n_out), |(i, j)| {
            column_std(&cache.edge_out[l], i * n_out + j)
        });
        edge_std.push(e);
        subnode_std.push((0..n_out).map(|j| column_std(&cache.subnodes[l], j)).collect());
    }
    let node_std = cache
        .nodes
        .iter()
        .map(|m| (0..m.ncols()).map(|c| column_std(m, c)).collect())
        .collect();
    let (node_scores, edge_scores) = propagate_scores(model, &edge_std, &subnode_std);
    Ok(AttributionScores { node_scores, edge_scores, edge_std, node_std, subnode_std })
}

/// Mask low-scoring edges and drop low-scoring hidden nodes. Inputs and
/// outputs are kept; an unreachable output fails the whole prune and the
/// input model is returned untouched.
pub fn prune(
    model: &MultKanModel,
    scores: &AttributionScores,
    node_threshold: f64,
    edge_threshold: f64,
) -> Result<MultKanModel, AttributionError> {
    let mut pruned = model.clone();
    for (l, b) in scores.edge_scores.iter().enumerate() {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                if b[[i, j]] < edge_threshold {
                    pruned.layers[l].kan.edge_mut(i, j).mask = 0.0;
                }
            }
        }
    }
    for level in (1..model.n_levels() - 1).rev() {
        for node in (0..model.n_nodes(level)).rev() {
            if scores.node_scores[level][node] < node_threshold {
                pruned.remove_node(level, node).map_err(|e| match e {
                    ModelError::EmptyLayer { .. } => {
                        AttributionError::AllPruned { node: node_threshold, edge: edge_threshold }
                    }
                    other => AttributionError::Model(other),
                })?;
            }
        }
    }
    if !output_reachable(&pruned) {
        return Err(AttributionError::AllPruned { node: node_threshold, edge: edge_threshold });
    }
    Ok(pruned)
}

/// True when every output node is fed, through active edges only, by some
/// input.
fn output_reachable(model: &MultKanModel) -> bool {
    let mut alive = vec![true; model.n_inputs()];
    for layer in &model.layers {
        let n_out = layer.kan.n_out;
        let mut sub_alive = vec![false; n_out];
        for i in 0..layer.kan.n_in {
            if !alive[i] {
                continue;
            }
            for j in 0..n_out {
                if layer.kan.edge(i, j).is_active() {
                    sub_alive[j] = true;
                }
            }
        }
        alive = (0..layer.mult.n_nodes())
            .map(|node| layer.mult.subnode_range(node).any(|j| sub_alive[j]))
            .collect();
    }
    alive.iter().all(|&a| a)
}

/// Which inputs to keep when pruning input variables.
#[derive(Debug, Clone)]
pub enum KeepRule<'a> {
    /// Drop inputs scoring strictly below the threshold.
    Threshold(f64),
    /// Keep exactly the named inputs.
    Names(&'a [String]),
}

pub fn prune_inputs(
    model: &MultKanModel,
    scores: &AttributionScores,
    keep: KeepRule,
) -> Result<(MultKanModel, Vec<String>), AttributionError> {
    let mask: Vec<bool> = match keep {
        KeepRule::Threshold(t) => {
            let m: Vec<bool> = scores.input_scores().iter().map(|&a| a >= t).collect();
            if !m.iter().any(|&k| k) {
                return Err(AttributionError::NoInputs(t));
            }
            m
        }
        KeepRule::Names(names) => {
            for n in names {
                if !model.input_names.contains(n) {
                    return Err(AttributionError::UnknownInput(n.clone()));
                }
            }
            model.input_names.iter().map(|n| names.contains(n)).collect()
        }
    };
    let mut out = model.clone();
    let retained = out.retain_inputs(&mask)?;
    Ok((out, retained))
}
