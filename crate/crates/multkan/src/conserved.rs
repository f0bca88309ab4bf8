//! Conserved-quantity loss: drive a scalar network H toward f·∇̂H = 0.
//!
//! A scalar H is conserved along a dynamical system ż = f(z) exactly when
//! its gradient is orthogonal to the flow everywhere, so the loss is the
//! mean squared projection of the normalized input gradient onto f. The
//! gradient of that loss with respect to network parameters needs the mixed
//! second derivative d²H/dθdz; it is computed by running reverse mode over a
//! forward-tangent (dual number) evaluation of the network, once per sample
//! with tangent f(z) and once with tangent ∇H(z).

use crate::model::{EdgeEval, ModelError, MultKanModel};
use crate::primitives::GuardMode;
use crate::spline::Extrapolation;
use crate::trainer::{backward, forward_detailed, Adam, EdgeGrad, ParamEntry, ParamLayout};
use ndarray::Array2;
use thiserror::Error;

/// Samples with a gradient norm below this are skipped, not failed: uniform
/// sampling legitimately hits near-critical points of H.
pub const GRAD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ConservedError {
    #[error("{0}")]
    BadModel(String),
    #[error("unknown vector field `{0}`")]
    UnknownField(String),
    #[error("gradient of H vanished at all {skipped} samples")]
    AllSkipped { skipped: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Built-in dynamical systems. States are ordered positions first, momenta
/// second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorField {
    /// State (x, p), flow (p, -x).
    Harmonic1d,
    /// State (x1, x2, p1, p2), flow (p1, p2, -x1, -x2).
    Harmonic2d,
}

impl VectorField {
    pub fn from_name(name: &str) -> Result<Self, ConservedError> {
        match name {
            "harmonic-1d" => Ok(VectorField::Harmonic1d),
            "harmonic-2d" => Ok(VectorField::Harmonic2d),
            other => Err(ConservedError::UnknownField(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VectorField::Harmonic1d => "harmonic-1d",
            VectorField::Harmonic2d => "harmonic-2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorField::Harmonic1d => 2,
            VectorField::Harmonic2d => 4,
        }
    }

    /// Column names for generated state datasets, positions before momenta.
    pub fn state_names(&self) -> Vec<String> {
        match self {
            VectorField::Harmonic1d => vec!["x".into(), "p".into()],
            VectorField::Harmonic2d => {
                vec!["x1".into(), "x2".into(), "p1".into(), "p2".into()]
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        match self {
            VectorField::Harmonic1d => vec![z[1], -z[0]],
            VectorField::Harmonic2d => vec![z[2], z[3], -z[0], -z[1]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservedReport {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservedTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ConservedTrainConfig {
    fn default() -> Self {
        ConservedTrainConfig { steps: 300, learning_rate: 0.02 }
    }
}

fn check_scalar(model: &MultKanModel, n_inputs: usize) -> Result<(), ConservedError> {
    if model.n_outputs() != 1 {
        return Err(ConservedError::BadModel(format!(
            "H must be scalar, model has {} outputs",
            model.n_outputs()
        )));
    }
    if model.n_inputs() != n_inputs {
        return Err(ConservedError::BadModel(format!(
            "model takes {} inputs, state has {n_inputs}",
            model.n_inputs()
        )));
    }
    Ok(())
}

/// Analytic input gradient of a scalar model, one row per sample.
pub fn input_gradient(
    model: &MultKanModel,
    z: &Array2<f64>,
) -> Result<Array2<f64>, ConservedError> {
    check_scalar(model, z.ncols())?;
    let layout = ParamLayout::build(model);
    let pass = forward_detailed(model, z)?;
    let ones = Array2::ones((z.nrows(), 1));
    let (_, grad) = backward(model, &layout, &pass, &ones, None);
    Ok(grad)
}

/// Loss ℓ = mean |f(z)·∇̂H(z)|² plus parameter gradients for training.
pub fn conserved_quantity_loss(
    model: &MultKanModel,
    field: VectorField,
    z: &Array2<f64>,
) -> Result<(ConservedReport, Vec<EdgeGrad>), ConservedError> {
    check_scalar(model, field.dim())?;
    if z.ncols() != field.dim() {
        return Err(ConservedError::BadModel(format!(
            "state batch has {} columns, field {} needs {}",
            z.ncols(),
            field.name(),
            field.dim()
        )));
    }
    let layout = ParamLayout::build(model);
    let (report, flat) = objective(model, &layout, field, z)?;
    let grads = layout
        .entries
        .iter()
        .map(|e| EdgeGrad {
            id: e.id,
            coef: flat[e.coef_at..e.coef_at + e.n_coef].to_vec(),
            base_scale: flat[e.base_at],
            spline_scale: flat[e.scale_at],
        })
        .collect();
    Ok((report, grads))
}

/// Adam on the conserved-quantity loss over a fixed state batch. Returns the
/// loss trace: initial value, then one entry per step.
pub fn train_conserved(
    model: &mut MultKanModel,
    field: VectorField,
    z: &Array2<f64>,
    config: &ConservedTrainConfig,
) -> Result<Vec<f64>, ConservedError> {
    check_scalar(model, field.dim())?;
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(ConservedError::BadModel("learning_rate must be positive".into()));
    }
    let layout = ParamLayout::build(model);
    if layout.len == 0 {
        return Err(ConservedError::BadModel(
            "model has no trainable parameters (all edges symbolic or frozen)".into(),
        ));
    }
    let mut params = layout.read(model);
    let mut adam = Adam::new(layout.len, config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (report, grads) = objective(model, &layout, field, z)?;
        if !report.loss.is_finite() {
            return Err(ConservedError::NonFiniteLoss);
        }
        trace.push(report.loss);
        adam.step(&mut params, &grads);
        layout.write(model, &params);
    }
    let (report, _) = objective(model, &layout, field, z)?;
    if !report.loss.is_finite() {
        return Err(ConservedError::NonFiniteLoss);
    }
    trace.push(report.loss);
    Ok(trace)
}

/// Per-probe relative residual of ∇H against the span of the 2D oscillator's
/// three invariant gradients (the two mode energies and angular momentum).
/// Probes with a vanishing ∇H or a degenerate basis are omitted.
pub fn oscillator2d_span_residual(
    model: &MultKanModel,
    z: &Array2<f64>,
) -> Result<Vec<f64>, ConservedError> {
    check_scalar(model, 4)?;
    let grad = input_gradient(model, z)?;
    let mut out = Vec::with_capacity(z.nrows());
    for s in 0..z.nrows() {
        let (x1, x2, p1, p2) = (z[[s, 0]], z[[s, 1]], z[[s, 2]], z[[s, 3]]);
        let basis = [
            [x1, 0.0, p1, 0.0],
            [0.0, x2, 0.0, p2],
            [p2, -p1, -x2, x1],
        ];
        let g = [grad[[s, 0]], grad[[s, 1]], grad[[s, 2]], grad[[s, 3]]];
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < GRAD_EPS {
            continue;
        }
        // Normal equations of the 4x3 least-squares projection.
        let mut m = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = (0..4).map(|k| basis[a][k] * basis[b][k]).sum();
            }
            rhs[a] = (0..4).map(|k| basis[a][k] * g[k]).sum();
        }
        let Some(c) = solve3(m, rhs) else { continue };
        let mut res2 = 0.0;
        for k in 0..4 {
            let fit: f64 = (0..3).map(|a| c[a] * basis[a][k]).sum();
            res2 += (g[k] - fit) * (g[k] - fit);
        }
        out.push(res2.sqrt() / gnorm);
    }
    Ok(out)
}

fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| {
            m[a][col].abs().partial_cmp(&m[b][col].abs()).expect("finite")
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut c = [0.0f64; 3];
    for col in (0..3).rev() {
        let tail: f64 = (col + 1..3).map(|k| m[col][k] * c[k]).sum();
        c[col] = (rhs[col] - tail) / m[col][col];
    }
    Some(c)
}

fn objective(
    model: &MultKanModel,
    layout: &ParamLayout,
    field: VectorField,
    z: &Array2<f64>,
) -> Result<(ConservedReport, Vec<f64>), ConservedError> {
    let n = z.nrows();
    let pass = forward_detailed(model, z)?;
    let ones = Array2::ones((n, 1));
    let (_, grad) = backward(model, layout, &pass, &ones, None);

    let entries = entry_map(model, layout);
    let mut grads = vec![0.0; layout.len];
    let mut kept: Vec<(usize, f64, f64, DualPass)> = Vec::new();
    let mut skipped = 0usize;
    let mut loss_sum = 0.0;
    for s in 0..n {
        let zrow: Vec<f64> = z.row(s).to_vec();
        let grow: Vec<f64> = grad.row(s).to_vec();
        let gnorm2: f64 = grow.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < GRAD_EPS {
            skipped += 1;
            continue;
        }
        let f = field.eval(&zrow);
        let pass_f = dual_forward(model, &zrow, &f)?;
        let r = pass_f.node_t.last().expect("pass holds output")[0];
        loss_sum += r * r / gnorm2;
        kept.push((s, r, gnorm2, pass_f));
    }
    let used = kept.len();
    if used == 0 {
        return Err(ConservedError::AllSkipped { skipped });
    }
    let loss = loss_sum / used as f64;
    for (s, r, gnorm2, pass_f) in kept {
        dual_backward(model, &entries, &pass_f, 2.0 * r / gnorm2 / used as f64, &mut grads);
        // d‖∇H‖²/dθ is twice the tangent gradient of the pass seeded with
        // the gradient itself.
        let grow: Vec<f64> = grad.row(s).to_vec();
        let zrow: Vec<f64> = z.row(s).to_vec();
        let pass_g = dual_forward(model, &zrow, &grow)?;
        let w = -2.0 * r * r / (gnorm2 * gnorm2) / used as f64;
        dual_backward(model, &entries, &pass_g, w, &mut grads);
    }
    Ok((ConservedReport { loss, used, skipped }, grads))
}

// One sample's forward values together with the directional derivative
// (tangent) of every intermediate along an input direction.
struct DualPass {
    node_v: Vec<Vec<f64>>,
    node_t: Vec<Vec<f64>>,
    sub_v: Vec<Vec<f64>>,
    sub_t: Vec<Vec<f64>>,
    evals: Vec<Vec<EdgeEval>>,
}

fn dual_forward(
    model: &MultKanModel,
    z: &[f64],
    tangent: &[f64],
) -> Result<DualPass, ModelError> {
    let mut pass = DualPass {
        node_v: vec![z.to_vec()],
        node_t: vec![tangent.to_vec()],
        sub_v: Vec::new(),
        sub_t: Vec::new(),
        evals: Vec::new(),
    };
    for (l, layer) in model.layers.iter().enumerate() {
        let n_in = layer.kan.n_in;
        let n_out = layer.kan.n_out;
        let mut sv = vec![0.0; n_out];
        let mut st = vec![0.0; n_out];
        let mut ev = vec![EdgeEval::default(); n_in * n_out];
        for i in 0..n_in {
            let (x, xdot) = (pass.node_v[l][i], pass.node_t[l][i]);
            for j in 0..n_out {
                let edge = layer.kan.edge(i, j);
                if !edge.is_active() {
                    continue;
                }
                let e = edge
                    .eval_detailed(x, Extrapolation::Clamp, GuardMode::Clamp)
                    .map_err(|source| ModelError::EdgeEval {
                        layer: l,
                        in_node: i,
                        out_subnode: j,
                        source,
                    })?;
                sv[j] += e.value;
                st[j] += e.dx * xdot;
                ev[i * n_out + j] = e;
            }
        }
        let mult = &layer.mult;
        let mut nv = vec![0.0; mult.n_nodes()];
        let mut nt = vec![0.0; mult.n_nodes()];
        for node in 0..mult.n_add {
            nv[node] = sv[node];
            nt[node] = st[node];
        }
        let mut at = mult.n_add;
        for (g, &arity) in mult.arities.iter().enumerate() {
            let group = at..at + arity;
            nv[mult.n_add + g] = group.clone().map(|u| sv[u]).product();
            let mut dot = 0.0;
            for t in group.clone() {
                let rest: f64 = group.clone().filter(|&u| u != t).map(|u| sv[u]).product();
                dot += st[t] * rest;
            }
            nt[mult.n_add + g] = dot;
            at += arity;
        }
        if nv.iter().chain(&nt).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
        pass.sub_v.push(sv);
        pass.sub_t.push(st);
        pass.evals.push(ev);
        pass.node_v.push(nv);
        pass.node_t.push(nt);
    }
    Ok(pass)
}

// Reverse sweep over the dual computation, seeding the adjoint of the output
// tangent with `seed`. Only the tangent output is differentiated; the value
// channel picks up adjoints on the way down through e''(x)ẋ and product
// terms.
fn dual_backward(
    model: &MultKanModel,
    entries: &[Vec<Option<ParamEntry>>],
    pass: &DualPass,
    seed: f64,
    grads: &mut [f64],
) {
    let depth = model.depth();
    let mut a = vec![0.0; pass.node_v[depth].len()];
    let mut b = vec![0.0; pass.node_v[depth].len()];
    b[0] = seed;
    for l in (0..depth).rev() {
        let layer = &model.layers[l];
        let mult = &layer.mult;
        let n_in = layer.kan.n_in;
        let n_out = layer.kan.n_out;
        let sv = &pass.sub_v[l];
        let st = &pass.sub_t[l];

        let mut sub_a = vec![0.0; n_out];
        let mut sub_b = vec![0.0; n_out];
        for node in 0..mult.n_add {
            sub_a[node] = a[node];
            sub_b[node] = b[node];
        }
        let mut at = mult.n_add;
        for (g, &arity) in mult.arities.iter().enumerate() {
            let (an, bn) = (a[mult.n_add + g], b[mult.n_add + g]);
            let group = at..at + arity;
            for t in group.clone() {
                let p: f64 = group.clone().filter(|&u| u != t).map(|u| sv[u]).product();
                let mut q = 0.0;
                for m in group.clone().filter(|&m| m != t) {
                    let rest: f64 =
                        group.clone().filter(|&u| u != t && u != m).map(|u| sv[u]).product();
                    q += st[m] * rest;
                }
                sub_a[t] = an * p + bn * q;
                sub_b[t] = bn * p;
            }
            at += arity;
        }

        let mut in_a = vec![0.0; n_in];
        let mut in_b = vec![0.0; n_in];
        for i in 0..n_in {
            let ti = pass.node_t[l][i];
            for j in 0..n_out {
                let (ga, gb) = (sub_a[j], sub_b[j]);
                if ga == 0.0 && gb == 0.0 {
                    continue;
                }
                let e = &pass.evals[l][i * n_out + j];
                in_a[i] += ga * e.dx + gb * e.dxx * ti;
                in_b[i] += gb * e.dx;
                if let Some(entry) = entries[l][i * n_out + j].as_ref() {
                    let ss = layer.kan.edge(i, j).spline_scale;
                    grads[entry.base_at] += ga * e.silu.0 + gb * e.silu.1 * ti;
                    grads[entry.scale_at] += ga * e.spline.0 + gb * e.spline.1 * ti;
                    for r in 0..e.basis.len() {
                        grads[entry.coef_at + e.basis_start + r] +=
                            ss * (ga * e.basis[r] + gb * e.dbasis[r] * ti);
                    }
                }
            }
        }
        a = in_a;
        b = in_b;
    }
}

fn entry_map(model: &MultKanModel, layout: &ParamLayout) -> Vec<Vec<Option<ParamEntry>>> {
    let mut map: Vec<Vec<Option<ParamEntry>>> = model
        .layers
        .iter()
        .map(|layer| vec![None; layer.kan.n_in * layer.kan.n_out])
        .collect();
    for e in &layout.entries {
        let n_out = model.layers[e.id.layer].kan.n_out;
        map[e.id.layer][e.id.in_node * n_out + e.id.out_subnode] = Some(e.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EdgeFunction, GridSpec, SymbolicSpec, WidthSpec};
    use crate::primitives::Primitive;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Array2::from_shape_fn((n, d), |_| dist.sample(&mut rng))
    }

    fn symbolic_edge(template: &EdgeFunction, prim: Primitive, c: f64) -> EdgeFunction {
        EdgeFunction::symbolic(
            template.spline.grid.clone(),
            SymbolicSpec::new(prim, 1.0, 0.0, c, 0.0),
        )
    }

    // H = (x² + p²)/2 built from two symbolic square edges.
    fn oscillator_energy_model() -> MultKanModel {
        let width = WidthSpec::from_pairs(&[(2, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 0, false).unwrap();
        for i in 0..2 {
            let e = model.layers[0].kan.edge(i, 0).clone();
            *model.layers[0].kan.edge_mut(i, 0) = symbolic_edge(&e, Primitive::Square, 0.5);
        }
        model
    }

    #[test]
    fn symbolic_energy_is_conserved_exactly() {
        let model = oscillator_energy_model();
        let z = batch(64, 2, 1);
        let (report, grads) = conserved_quantity_loss(&model, VectorField::Harmonic1d, &z).unwrap();
        assert!(report.loss < 1e-12, "loss {}", report.loss);
        assert!(report.used + report.skipped == 64);
        assert!(grads.is_empty(), "symbolic edges own no parameters");
    }

    #[test]
    fn constant_energy_is_inconclusive() {
        let width = WidthSpec::from_pairs(&[(2, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 0, false).unwrap();
        for i in 0..2 {
            let e = model.layers[0].kan.edge(i, 0).clone();
            *model.layers[0].kan.edge_mut(i, 0) = EdgeFunction::symbolic(
                e.spline.grid.clone(),
                SymbolicSpec::new(Primitive::Identity, 1.0, 0.0, 0.0, 0.5),
            );
        }
        match conserved_quantity_loss(&model, VectorField::Harmonic1d, &batch(32, 2, 2)) {
            Err(ConservedError::AllSkipped { skipped }) => assert_eq!(skipped, 32),
            other => panic!("expected all samples skipped, got {other:?}"),
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for (seed, pairs) in [(3u64, vec![(3, 0), (2, 1), (1, 0)]), (9, vec![(2, 0), (4, 0), (1, 0)])]
        {
            let width = WidthSpec::from_pairs(&pairs);
            let mut model = MultKanModel::init(&width, GridSpec::default(), seed, false).unwrap();
            let d = model.n_inputs();
            let z = batch(5, d, seed);
            let grad = input_gradient(&model, &z).unwrap();
            let h = 1e-5;
            for s in 0..5 {
                for k in 0..d {
                    let mut zp = z.clone();
                    zp[[s, k]] += h;
                    let mut zm = z.clone();
                    zm[[s, k]] -= h;
                    let fp = model.forward(&zp, false).unwrap()[[s, 0]];
                    let fm = model.forward(&zm, false).unwrap()[[s, 0]];
                    let fd = (fp - fm) / (2.0 * h);
                    let rel = (grad[[s, k]] - fd).abs() / (fd.abs().max(grad[[s, k]].abs()) + 1e-6);
                    assert!(rel < 1e-4, "({s},{k}): {} vs {fd}", grad[[s, k]]);
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let width = WidthSpec::from_pairs(&[(2, 0), (2, 1), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 7, false).unwrap();
        let z = batch(6, 2, 4);
        let layout = ParamLayout::build(&model);
        let (_, flat) = objective(&model, &layout, VectorField::Harmonic1d, &z).unwrap();

        let mut params = layout.read(&model);
        let h = 1e-5;
        for p in 0..layout.len {
            let orig = params[p];
            params[p] = orig + h;
            layout.write(&mut model, &params);
            let (plus, _) = objective(&model, &layout, VectorField::Harmonic1d, &z).unwrap();
            params[p] = orig - h;
            layout.write(&mut model, &params);
            let (minus, _) = objective(&model, &layout, VectorField::Harmonic1d, &z).unwrap();
            params[p] = orig;
            let fd = (plus.loss - minus.loss) / (2.0 * h);
            let rel = (flat[p] - fd).abs() / (flat[p].abs().max(fd.abs()) + 1e-6);
            assert!(rel < 1e-4, "param {p}: analytic {} vs fd {fd}", flat[p]);
        }
    }

    // H = x1·p2 - x2·p1 wired through two mult nodes and signed identity
    // output edges.
    fn angular_momentum_model() -> MultKanModel {
        let width = WidthSpec::from_pairs(&[(4, 0), (0, 2), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 0, false).unwrap();
        let grid = model.layers[0].kan.edge(0, 0).spline.grid.clone();
        for l in 0..2 {
            let (n_in, n_out) = (model.layers[l].kan.n_in, model.layers[l].kan.n_out);
            for i in 0..n_in {
                for j in 0..n_out {
                    *model.layers[l].kan.edge_mut(i, j) = EdgeFunction::zeroed(grid.clone());
                }
            }
        }
        // Subnodes 0,1 multiply into node 0; subnodes 2,3 into node 1.
        *model.layers[0].kan.edge_mut(0, 0) = EdgeFunction::identity(grid.clone());
        *model.layers[0].kan.edge_mut(3, 1) = EdgeFunction::identity(grid.clone());
        *model.layers[0].kan.edge_mut(1, 2) = EdgeFunction::identity(grid.clone());
        *model.layers[0].kan.edge_mut(2, 3) = EdgeFunction::identity(grid.clone());
        *model.layers[1].kan.edge_mut(0, 0) = EdgeFunction::identity(grid.clone());
        *model.layers[1].kan.edge_mut(1, 0) = EdgeFunction::symbolic(
            grid,
            SymbolicSpec::new(Primitive::Identity, 1.0, 0.0, -1.0, 0.0),
        );
        model
    }

    #[test]
    fn angular_momentum_lies_in_the_invariant_span() {
        let mut model = angular_momentum_model();
        let z = batch(40, 4, 5);
        let out = model.forward(&z, false).unwrap();
        for s in 0..z.nrows() {
            let want = z[[s, 0]] * z[[s, 3]] - z[[s, 1]] * z[[s, 2]];
            assert!((out[[s, 0]] - want).abs() < 1e-12);
        }
        let (report, _) = conserved_quantity_loss(&model, VectorField::Harmonic2d, &z).unwrap();
        assert!(report.loss < 1e-20, "angular momentum is conserved: {}", report.loss);
        let residuals = oscillator2d_span_residual(&model, &z).unwrap();
        assert!(!residuals.is_empty());
        for r in residuals {
            assert!(r < 1e-9, "residual {r}");
        }
    }

    #[test]
    fn training_reduces_the_conserved_loss() {
        let width = WidthSpec::from_pairs(&[(4, 0), (0, 2), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 11, false).unwrap();
        let z = batch(256, 4, 6);
        let config = ConservedTrainConfig { steps: 120, learning_rate: 0.02 };
        let trace = train_conserved(&mut model, VectorField::Harmonic2d, &z, &config).unwrap();
        let (first, last) = (trace[0], *trace.last().unwrap());
        assert_eq!(trace.len(), 121);
        assert!(last < 0.2 * first, "loss {first} -> {last}");
    }

    #[test]
    fn field_registry_round_trips() {
        for field in [VectorField::Harmonic1d, VectorField::Harmonic2d] {
            assert_eq!(VectorField::from_name(field.name()).unwrap(), field);
        }
        assert!(VectorField::from_name("lorenz").is_err());
        assert_eq!(VectorField::Harmonic1d.eval(&[0.3, -0.7]), vec![-0.7, -0.3]);
        assert_eq!(
            VectorField::Harmonic2d.eval(&[1.0, 2.0, 3.0, 4.0]),
            vec![3.0, 4.0, -1.0, -2.0]
        );
    }
}
