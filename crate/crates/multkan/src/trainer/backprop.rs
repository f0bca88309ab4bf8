//! Reverse-mode differentiation through spline edges and mult nodes.
//!
//! Parameters are flattened into one vector per [`ParamLayout`] so the
//! optimizers can treat the model as an opaque objective. Only active,
//! unfrozen edges with a live spline branch own parameters; every other
//! edge still transmits input gradients downstream.

use crate::model::{EdgeEval, EdgeId, EdgeMode, ModelError, MultKanModel};
use crate::primitives::GuardMode;
use crate::spline::Extrapolation;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub id: EdgeId,
    pub coef_at: usize,
    pub n_coef: usize,
    pub base_at: usize,
    pub scale_at: usize,
}

/// Maps trainable edge parameters onto a flat vector:
/// `[coef..., base_scale, spline_scale]` per edge, edges in id order.
#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub len: usize,
}

impl ParamLayout {
    pub fn build(model: &MultKanModel) -> Self {
        let mut entries = Vec::new();
        let mut at = 0;
        for id in model.edge_ids() {
            let edge = model.edge_at(id).expect("edge_ids yields valid ids");
            if !edge.is_active() || edge.frozen || edge.mode == EdgeMode::SymbolicOnly {
                continue;
            }
            let n_coef = edge.spline.coef.len();
            entries.push(ParamEntry {
                id,
                coef_at: at,
                n_coef,
                base_at: at + n_coef,
                scale_at: at + n_coef + 1,
            });
            at += n_coef + 2;
        }
        ParamLayout { entries, len: at }
    }

    pub fn read(&self, model: &MultKanModel) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for e in &self.entries {
            let edge = model.edge_at(e.id).expect("layout matches model");
            out[e.coef_at..e.coef_at + e.n_coef].copy_from_slice(&edge.spline.coef);
            out[e.base_at] = edge.base_scale;
            out[e.scale_at] = edge.spline_scale;
        }
        out
    }

    pub fn write(&self, model: &mut MultKanModel, params: &[f64]) {
        debug_assert_eq!(params.len(), self.len);
        for e in &self.entries {
            let edge = model.edge_at_mut(e.id).expect("layout matches model");
            edge.spline.coef.copy_from_slice(&params[e.coef_at..e.coef_at + e.n_coef]);
            edge.base_scale = params[e.base_at];
            edge.spline_scale = params[e.scale_at];
        }
    }
}

/// Forward pass retaining per-edge evaluations for the backward sweep.
pub(crate) struct ForwardPass {
    /// Node values per level; `nodes[0]` is the input batch.
    pub nodes: Vec<Array2<f64>>,
    /// Per-block subnode sums.
    pub subnodes: Vec<Array2<f64>>,
    /// Per-block masked edge outputs, column `i * n_out + j`.
    pub edge_values: Vec<Array2<f64>>,
    /// Dense eval grid `evals[l][s * nE + i * n_out + j]`, nE = n_in * n_out.
    pub evals: Vec<Vec<EdgeEval>>,
}

pub(crate) fn forward_detailed(
    model: &MultKanModel,
    x: &Array2<f64>,
) -> Result<ForwardPass, ModelError> {
    if x.ncols() != model.n_inputs() {
        return Err(ModelError::DimensionMismatch { expected: model.n_inputs(), got: x.ncols() });
    }
    let batch = x.nrows();
    let mut nodes = vec![x.clone()];
    let mut subnodes = Vec::with_capacity(model.depth());
    let mut edge_values = Vec::with_capacity(model.depth());
    let mut evals = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        let n_in = layer.kan.n_in;
        let n_out = layer.kan.n_out;
        let ne = n_in * n_out;
        let mut ev = vec![EdgeEval::default(); batch * ne];
        let mut eo = Array2::zeros((batch, ne));
        let mut sub = Array2::zeros((batch, n_out));
        for i in 0..n_in {
            for j in 0..n_out {
                let edge = layer.kan.edge(i, j);
                if !edge.is_active() {
                    continue;
                }
                for s in 0..batch {
                    let e = edge
                        .eval_detailed(nodes[l][[s, i]], Extrapolation::Clamp, GuardMode::Clamp)
                        .map_err(|source| ModelError::EdgeEval {
                            layer: l,
                            in_node: i,
                            out_subnode: j,
                            source,
                        })?;
                    eo[[s, i * n_out + j]] = e.value;
                    sub[[s, j]] += e.value;
                    ev[s * ne + i * n_out + j] = e;
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
        subnodes.push(sub);
        edge_values.push(eo);
        evals.push(ev);
        nodes.push(out);
    }
    Ok(ForwardPass { nodes, subnodes, edge_values, evals })
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.nodes.last().expect("pass holds at least the input level")
    }
}

/// Sparsity penalties over cached edge activations.
#[derive(Debug, Clone)]
pub(crate) struct RegReport {
    pub l1: f64,
    pub entropy: f64,
    /// Mean |activation| per edge column, per block.
    pub edge_l1: Vec<Vec<f64>>,
    /// Per-block l1 totals.
    pub layer_sum: Vec<f64>,
    /// Per-block entropies.
    pub layer_entropy: Vec<f64>,
}

/// Edges with l1 below this are treated as absent from the entropy
/// distribution; the p·ln p slope blows up at p = 0.
const ENTROPY_FLOOR: f64 = 1e-12;

pub(crate) fn compute_reg(edge_values: &[Array2<f64>]) -> RegReport {
    let mut edge_l1 = Vec::with_capacity(edge_values.len());
    let mut layer_sum = Vec::with_capacity(edge_values.len());
    let mut layer_entropy = Vec::with_capacity(edge_values.len());
    let mut l1 = 0.0;
    let mut entropy = 0.0;
    for eo in edge_values {
        let batch = eo.nrows().max(1) as f64;
        let a: Vec<f64> =
            (0..eo.ncols()).map(|c| eo.column(c).iter().map(|v| v.abs()).sum::<f64>() / batch).collect();
        let total: f64 = a.iter().sum();
        let mut h = 0.0;
        if total > ENTROPY_FLOOR {
            for &af in &a {
                if af > ENTROPY_FLOOR {
                    let p = af / total;
                    h -= p * p.ln();
                }
            }
        }
        l1 += total;
        entropy += h;
        edge_l1.push(a);
        layer_sum.push(total);
        layer_entropy.push(h);
    }
    RegReport { l1, entropy, edge_l1, layer_sum, layer_entropy }
}

/// Per-edge weights w such that the regularization adjoint on one sample's
/// edge output v is w * sign(v). The 1/batch factor of the mean is folded in.
#[derive(Debug, Clone)]
pub(crate) struct RegGrad {
    pub weights: Vec<Vec<f64>>,
}

impl RegGrad {
    pub fn new(report: &RegReport, lambda_l1: f64, lambda_entropy: f64, batch: usize) -> Self {
        let b = batch.max(1) as f64;
        let weights = report
            .edge_l1
            .iter()
            .enumerate()
            .map(|(l, a)| {
                let total = report.layer_sum[l];
                let h = report.layer_entropy[l];
                a.iter()
                    .map(|&af| {
                        let mut w = lambda_l1;
                        if total > ENTROPY_FLOOR && af > ENTROPY_FLOOR {
                            let p = af / total;
                            // dH/da_g for H = -sum p ln p, p = a/S.
                            w += lambda_entropy * (-(p.ln() + h) / total);
                        }
                        w / b
                    })
                    .collect()
            })
            .collect();
        RegGrad { weights }
    }
}

/// Reverse sweep. `out_adj` is dLoss/dOutput per sample; returns gradients in
/// layout order plus the adjoint of the input batch.
pub(crate) fn backward(
    model: &MultKanModel,
    layout: &ParamLayout,
    pass: &ForwardPass,
    out_adj: &Array2<f64>,
    reg: Option<&RegGrad>,
) -> (Vec<f64>, Array2<f64>) {
    let batch = out_adj.nrows();
    let mut grads = vec![0.0; layout.len];
    let mut entry_of = vec![Vec::new(); model.depth()];
    for e in &layout.entries {
        let layer = &model.layers[e.id.layer];
        let col = e.id.in_node * layer.kan.n_out + e.id.out_subnode;
        if entry_of[e.id.layer].len() < layer.kan.n_in * layer.kan.n_out {
            entry_of[e.id.layer].resize(layer.kan.n_in * layer.kan.n_out, None);
        }
        entry_of[e.id.layer][col] = Some(e.clone());
    }

    let mut node_adj = out_adj.clone();
    for l in (0..model.depth()).rev() {
        let layer = &model.layers[l];
        let n_in = layer.kan.n_in;
        let n_out = layer.kan.n_out;
        let ne = n_in * n_out;
        let sub = &pass.subnodes[l];

        // Mult backward: copies pass through, products use leave-one-out.
        let mut sub_adj = Array2::zeros((batch, n_out));
        for s in 0..batch {
            for j in 0..layer.mult.n_add {
                sub_adj[[s, j]] = node_adj[[s, j]];
            }
            let mut at = layer.mult.n_add;
            for (g, &a) in layer.mult.arities.iter().enumerate() {
                let gn = node_adj[[s, layer.mult.n_add + g]];
                for t in 0..a {
                    let mut prod = 1.0;
                    for u in 0..a {
                        if u != t {
                            prod *= sub[[s, at + u]];
                        }
                    }
                    sub_adj[[s, at + t]] = gn * prod;
                }
                at += a;
            }
        }

        let mut in_adj = Array2::zeros((batch, n_in));
        let cols = entry_of[l].as_slice();
        for i in 0..n_in {
            for j in 0..n_out {
                let col = i * n_out + j;
                if !layer.kan.edge(i, j).is_active() {
                    continue;
                }
                let entry = cols.get(col).and_then(|e| e.as_ref());
                let w = reg.map(|r| r.weights[l][col]).unwrap_or(0.0);
                for s in 0..batch {
                    let e = &pass.evals[l][s * ne + col];
                    let mut g = sub_adj[[s, j]];
                    if w != 0.0 {
                        g += w * pass.edge_values[l][[s, col]].signum();
                    }
                    if g == 0.0 {
                        continue;
                    }
                    in_adj[[s, i]] += g * e.dx;
                    if let Some(entry) = entry {
                        let edge = layer.kan.edge(i, j);
                        grads[entry.base_at] += g * e.silu.0;
                        grads[entry.scale_at] += g * e.spline.0;
                        for (r, &bv) in e.basis.iter().enumerate() {
                            grads[entry.coef_at + e.basis_start + r] += g * edge.spline_scale * bv;
                        }
                    }
                }
            }
        }
        node_adj = in_adj;
    }
    (grads, node_adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridSpec, WidthSpec};

    fn sample_model() -> MultKanModel {
        let width = WidthSpec::from_pairs(&[(2, 0), (2, 1), (1, 0)]);
        MultKanModel::init(&width, GridSpec::default(), 3, false).unwrap()
    }

    #[test]
    fn layout_roundtrips_parameters() {
        let mut model = sample_model();
        let layout = ParamLayout::build(&model);
        assert!(layout.len > 0);
        let before = layout.read(&model);
        let bumped: Vec<f64> = before.iter().map(|v| v + 0.25).collect();
        layout.write(&mut model, &bumped);
        assert_eq!(layout.read(&model), bumped);
        layout.write(&mut model, &before);
        assert_eq!(layout.read(&model), before);
    }

    #[test]
    fn layout_skips_frozen_and_symbolic_edges() {
        let mut model = sample_model();
        let all = ParamLayout::build(&model).entries.len();
        model.layers[0].kan.edge_mut(0, 0).frozen = true;
        model.layers[0].kan.edge_mut(1, 1).mask = 0.0;
        let trimmed = ParamLayout::build(&model).entries.len();
        assert_eq!(trimmed, all - 2);
    }

    #[test]
    fn forward_detailed_matches_forward() {
        let mut model = sample_model();
        let x = Array2::from_shape_fn((9, 2), |(s, i)| (s as f64 / 4.0 - 1.0) * (i as f64 + 0.5));
        let out = model.forward(&x, false).unwrap();
        let pass = forward_detailed(&model, &x).unwrap();
        for (a, b) in out.iter().zip(pass.output().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_layer_entropy_is_log_m() {
        // Four equal columns: p = 1/4 each.
        let eo = Array2::from_shape_fn((5, 4), |(s, _)| 0.3 + s as f64 * 0.1);
        let rep = compute_reg(&[eo]);
        assert!((rep.entropy - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_activations_give_zero_reg() {
        let rep = compute_reg(&[Array2::zeros((6, 3))]);
        assert_eq!(rep.l1, 0.0);
        assert_eq!(rep.entropy, 0.0);
    }

    #[test]
    fn l1_is_homogeneous() {
        let eo = Array2::from_shape_fn((4, 3), |(s, c)| (s as f64 - 1.5) * (c as f64 + 1.0) * 0.125);
        let rep1 = compute_reg(&[eo.clone()]);
        let rep2 = compute_reg(&[eo.mapv(|v| 2.0 * v)]);
        assert_eq!(rep2.l1, 2.0 * rep1.l1);
        assert!((rep2.entropy - rep1.entropy).abs() < 1e-12);
    }
}
