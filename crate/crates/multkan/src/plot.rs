//! Graphviz export of the network diagram.
//!
//! Attribution scores, when given, drive the styling: edge pen width scales
//! with the edge score B and node diameter with the node score A, so the
//! rendered picture shows at a glance which paths carry the function.

use crate::attribution::AttributionScores;
use crate::model::{EdgeMode, MultKanModel};
use std::fmt::Write;

const MIN_PENWIDTH: f64 = 0.4;
const MAX_PENWIDTH: f64 = 4.0;
const MIN_NODE_SIZE: f64 = 0.25;
const MAX_NODE_SIZE: f64 = 0.9;

fn scaled(value: f64, max: f64, lo: f64, hi: f64) -> f64 {
    if max <= 0.0 || !value.is_finite() {
        return lo;
    }
    lo + (hi - lo) * (value / max).clamp(0.0, 1.0)
}

/// Render the model as a DOT digraph. Inactive edges are omitted; symbolic
/// edges draw dashed. Input nodes take `input_names` when provided and fall
/// back to x1..xn.
pub fn network_dot(
    model: &MultKanModel,
    scores: Option<&AttributionScores>,
    input_names: Option<&[String]>,
) -> String {
    let mut out = String::from("digraph multkan {\n");
    out.push_str("  rankdir=BT;\n  node [shape=circle, fixedsize=true, fontsize=10];\n");

    let max_node = scores
        .map(|s| {
            s.node_scores
                .iter()
                .flatten()
                .cloned()
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(0.0);
    let max_edge = scores
        .map(|s| {
            s.edge_scores
                .iter()
                .flat_map(|b| b.iter().cloned())
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(0.0);

    for level in 0..model.n_levels() {
        let _ = writeln!(out, "  {{ rank=same;");
        for i in 0..model.n_nodes(level) {
            let label = if level == 0 {
                input_names
                    .and_then(|n| n.get(i).cloned())
                    .unwrap_or_else(|| format!("x{}", i + 1))
            } else if level == model.n_levels() - 1 {
                format!("y{}", i + 1)
            } else {
                let mult = &model.layers[level - 1].mult;
                if i < mult.n_add { format!("+{i}") } else { format!("*{i}") }
            };
            let size = match scores {
                Some(s) => scaled(s.node_scores[level][i], max_node, MIN_NODE_SIZE, MAX_NODE_SIZE),
                None => 0.5,
            };
            let _ = writeln!(out, "    l{level}n{i} [label=\"{label}\", width={size:.3}];");
        }
        let _ = writeln!(out, "  }}");
    }

    for (l, layer) in model.layers.iter().enumerate() {
        let n_out = layer.kan.n_out;
        for i in 0..layer.kan.n_in {
            for j in 0..n_out {
                let edge = layer.kan.edge(i, j);
                if !edge.is_active() {
                    continue;
                }
                let node = layer.mult.node_of_subnode(j);
                let width = match scores {
                    Some(s) => {
                        scaled(s.edge_scores[l][[i, j]], max_edge, MIN_PENWIDTH, MAX_PENWIDTH)
                    }
                    None => 1.0,
                };
                let style = match edge.mode {
                    EdgeMode::SplineOnly => "",
                    _ => ", style=dashed",
                };
                let _ = writeln!(
                    out,
                    "  l{l}n{i} -> l{next}n{node} [penwidth={width:.3}{style}];",
                    next = l + 1
                );
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::compute_attribution;
    use crate::kanpiler::compile_trees;
    use crate::expr::{names_from, parse_formula};
    use crate::model::GridSpec;
    use ndarray::Array2;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn product_model() -> MultKanModel {
        let names = names_from(&["x1", "x2"]);
        let tree = parse_formula("x1*x2", &names).unwrap();
        compile_trees(&[tree], &names, GridSpec::default()).unwrap()
    }

    #[test]
    fn dot_lists_every_active_edge_once() {
        let model = product_model();
        let dot = network_dot(&model, None, None);
        assert!(dot.starts_with("digraph multkan {"));
        assert!(dot.trim_end().ends_with('}'));
        let active: usize = model
            .layers
            .iter()
            .map(|l| {
                (0..l.kan.n_in)
                    .flat_map(|i| (0..l.kan.n_out).map(move |j| (i, j)))
                    .filter(|&(i, j)| l.kan.edge(i, j).is_active())
                    .count()
            })
            .sum();
        assert_eq!(dot.matches(" -> ").count(), active);
        // Compiled models are all-symbolic, so every edge draws dashed.
        assert_eq!(dot.matches("style=dashed").count(), active);
    }

    #[test]
    fn masked_edges_disappear() {
        let mut model = product_model();
        let before = network_dot(&model, None, None).matches(" -> ").count();
        let id = model.edge_ids()[0];
        model.edge_at_mut(id).unwrap().mask = 0.0;
        let after = network_dot(&model, None, None).matches(" -> ").count();
        assert_eq!(after, before - 1);
    }

    #[test]
    fn scores_widen_strong_edges_and_grow_strong_nodes() {
        let model = product_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dist = Uniform::new(-1.0, 1.0);
        let x = Array2::from_shape_fn((200, 2), |_| dist.sample(&mut rng));
        let scores = compute_attribution(&model, &x).unwrap();
        let dot = network_dot(&model, Some(&scores), None);
        let widths: Vec<f64> = dot
            .lines()
            .filter(|l| l.contains("penwidth="))
            .map(|l| {
                let v = l.split("penwidth=").nth(1).unwrap();
                v.split([',', ']']).next().unwrap().parse().unwrap()
            })
            .collect();
        assert!(widths.iter().cloned().fold(f64::NAN, f64::max) >= MAX_PENWIDTH - 1e-9);
        assert!(widths.iter().all(|&w| w >= MIN_PENWIDTH - 1e-9));
        // The output node carries score 1, the maximum, so it renders largest.
        let out_line = dot.lines().find(|l| l.contains("\"y1\"")).unwrap();
        assert!(out_line.contains(&format!("width={MAX_NODE_SIZE:.3}")));
    }

    #[test]
    fn input_names_replace_the_defaults() {
        let model = product_model();
        let names = names_from(&["mass", "speed"]);
        let dot = network_dot(&model, None, Some(&names));
        assert!(dot.contains("\"mass\""));
        assert!(dot.contains("\"speed\""));
        assert!(!dot.contains("\"x1\""));
    }
}
