//! Training: loss, manual backprop, Adam/LBFGS loops, grid adaptation.

mod backprop;
mod opt;

pub(crate) use backprop::{backward, compute_reg, forward_detailed, ParamEntry, ParamLayout};
pub(crate) use opt::Adam;

use crate::dataset::Dataset;
use crate::model::{EdgeId, ModelError, MultKanModel};
use crate::primitives::GuardMode;
use crate::spline::Extrapolation;
use backprop::RegGrad;
use ndarray::Array2;
use opt::Lbfgs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("training diverged at step {step} (loss above {DIVERGENCE_LIMIT:.0e})")]
    Diverged { step: usize, log: TrainLog },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lambda_l1: f64,
    pub lambda_entropy: f64,
    /// Steps after which edge grids are refit to the cached activations.
    /// Ignored entirely once any edge carries a symbolic branch.
    pub grid_update_steps: Vec<usize>,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            lambda_l1: 0.0,
            lambda_entropy: 0.0,
            grid_update_steps: vec![20, 50, 100],
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        for (name, v) in [("lambda_l1", self.lambda_l1), ("lambda_entropy", self.lambda_entropy)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::BadConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss decomposition from one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub rmse: f64,
    pub l1: f64,
    pub entropy: f64,
}

/// Gradient of one edge's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrad {
    pub id: EdgeId,
    pub coef: Vec<f64>,
    pub base_scale: f64,
    pub spline_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub l1: f64,
    pub entropy: f64,
}

/// Per-step history; losses are data RMSE after the step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,test_loss,l1,entropy\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.step, r.train_loss, r.test_loss, r.l1, r.entropy)
                .expect("string write");
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_csv())
    }

    pub fn final_test_rmse(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_loss)
    }
}

fn objective(
    model: &MultKanModel,
    layout: &ParamLayout,
    x: &Array2<f64>,
    y: &Array2<f64>,
    lambda_l1: f64,
    lambda_entropy: f64,
) -> Result<(LossParts, Vec<f64>), TrainError> {
    if y.ncols() != model.n_outputs() || y.nrows() != x.nrows() {
        return Err(TrainError::Model(ModelError::DimensionMismatch {
            expected: model.n_outputs(),
            got: y.ncols(),
        }));
    }
    let pass = forward_detailed(model, x)?;
    let out = pass.output();
    let denom = (x.nrows() * y.ncols()) as f64;
    let residual = out - y;
    let mse = residual.iter().map(|r| r * r).sum::<f64>() / denom;
    let reg = compute_reg(&pass.edge_values);
    let total = mse + lambda_l1 * reg.l1 + lambda_entropy * reg.entropy;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    let out_adj = residual.mapv(|r| 2.0 * r / denom);
    let reg_grad = (lambda_l1 > 0.0 || lambda_entropy > 0.0)
        .then(|| RegGrad::new(&reg, lambda_l1, lambda_entropy, x.nrows()));
    let (grads, _) = backprop::backward(model, layout, &pass, &out_adj, reg_grad.as_ref());
    let parts =
        LossParts { total, mse, rmse: mse.sqrt(), l1: reg.l1, entropy: reg.entropy };
    Ok((parts, grads))
}

/// Loss and parameter gradients at the model's current weights.
pub fn loss_and_grad(
    model: &MultKanModel,
    x: &Array2<f64>,
    y: &Array2<f64>,
    config: &TrainConfig,
) -> Result<(LossParts, Vec<EdgeGrad>), TrainError> {
    config.validate()?;
    let layout = ParamLayout::build(model);
    let (parts, flat) = objective(model, &layout, x, y, config.lambda_l1, config.lambda_entropy)?;
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
    Ok((parts, grads))
}

/// Sparsity penalties of the activations cached by the last forward pass.
pub fn regularization(model: &MultKanModel) -> Result<(f64, f64), TrainError> {
    let cache = model.cache.as_ref().ok_or(ModelError::NoCache)?;
    let rep = compute_reg(&cache.edge_out);
    Ok((rep.l1, rep.entropy))
}

fn data_rmse(model: &MultKanModel, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, ModelError> {
    let out = model.run_forward(x, Extrapolation::Clamp, GuardMode::Clamp)?;
    let denom = (y.nrows() * y.ncols()) as f64;
    let mse =
        out.output().iter().zip(y.iter()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / denom;
    Ok(mse.sqrt())
}

/// Train in place. Losses are logged after each update; grids are refit at
/// the configured steps from the training-batch activations.
pub fn train(
    model: &mut MultKanModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if data.n_inputs() != model.n_inputs() {
        return Err(TrainError::Model(ModelError::DimensionMismatch {
            expected: model.n_inputs(),
            got: data.n_inputs(),
        }));
    }
    let mut layout = ParamLayout::build(model);
    let mut params = layout.read(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_train = data.train_inputs.nrows();
    let mut log = TrainLog::default();

    struct LbfgsState {
        opt: Lbfgs,
        /// (loss, grad) at the current params, valid for the full batch.
        carry: Option<(f64, Vec<f64>)>,
        /// Full-batch line search failed to move; nothing left to do until
        /// a grid update changes the objective.
        stalled: bool,
    }
    enum Opt {
        Adam(Adam),
        Lbfgs(LbfgsState),
    }
    let fresh_opt = |n: usize| match config.optimizer {
        OptimizerKind::Adam => Opt::Adam(Adam::new(n, config.learning_rate)),
        OptimizerKind::Lbfgs => {
            Opt::Lbfgs(LbfgsState { opt: Lbfgs::new(), carry: None, stalled: false })
        }
    };
    let mut opt = fresh_opt(layout.len);

    for step in 1..=config.steps {
        let (xb, yb) = match config.batch_size {
            Some(b) if b < n_train => {
                let picks = rand::seq::index::sample(&mut rng, n_train, b);
                let rows: Vec<usize> = picks.iter().collect();
                (
                    data.train_inputs.select(ndarray::Axis(0), &rows),
                    data.train_labels.select(ndarray::Axis(0), &rows),
                )
            }
            _ => (data.train_inputs.clone(), data.train_labels.clone()),
        };
        let step_result: Result<(), TrainError> = (|| {
            match &mut opt {
                Opt::Adam(adam) => {
                    layout.write(model, &params);
                    let (_, grads) =
                        objective(model, &layout, &xb, &yb, config.lambda_l1, config.lambda_entropy)?;
                    adam.step(&mut params, &grads);
                }
                Opt::Lbfgs(state) => {
                    let full_batch = xb.nrows() == n_train;
                    if state.stalled && full_batch {
                        return Ok(());
                    }
                    let (f0, g0) = match state.carry.take() {
                        Some(fg) if full_batch => fg,
                        _ => {
                            layout.write(model, &params);
                            let (parts, grads) = objective(
                                model,
                                &layout,
                                &xb,
                                &yb,
                                config.lambda_l1,
                                config.lambda_entropy,
                            )?;
                            (parts.total, grads)
                        }
                    };
                    let mut eval = |p: &[f64]| -> Result<(f64, Vec<f64>), TrainError> {
                        layout.write(model, p);
                        let (parts, grads) = objective(
                            model,
                            &layout,
                            &xb,
                            &yb,
                            config.lambda_l1,
                            config.lambda_entropy,
                        )?;
                        Ok((parts.total, grads))
                    };
                    let out = state.opt.step(&mut params, f0, &g0, &mut eval)?;
                    if full_batch {
                        state.carry = Some((out.f, out.g));
                        state.stalled = out.stalled;
                    }
                }
            }
            layout.write(model, &params);
            Ok(())
        })();
        if let Err(e) = step_result {
            // Mid-step overflow is divergence in slow motion; report it as
            // such and keep the history gathered so far.
            return match e {
                TrainError::Model(ModelError::NonFinite { .. }) | TrainError::NonFiniteLoss => {
                    Err(TrainError::Diverged { step, log })
                }
                other => Err(other),
            };
        }

        let test_loss = data_rmse(model, &data.test_inputs, &data.test_labels)?;
        model.forward(&data.train_inputs, true)?;
        let cache = model.cache.as_ref().expect("forward kept the cache");
        let denom = (n_train * data.n_outputs()) as f64;
        let train_mse = cache
            .output()
            .iter()
            .zip(data.train_labels.iter())
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / denom;
        let rep = compute_reg(&cache.edge_out);
        log.records.push(TrainRecord {
            step,
            train_loss: train_mse.sqrt(),
            test_loss,
            l1: rep.l1,
            entropy: rep.entropy,
        });
        let total =
            train_mse + config.lambda_l1 * rep.l1 + config.lambda_entropy * rep.entropy;
        if !total.is_finite() || total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step, log });
        }

        if config.grid_update_steps.contains(&step)
            && step < config.steps
            && !model.has_symbolic_edges()
        {
            model.update_grids_from_cache()?;
            layout = ParamLayout::build(model);
            params = layout.read(model);
            opt = fresh_opt(layout.len);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EdgeMode, GridSpec, SymbolicSpec, WidthSpec};
    use crate::parse_formula;
    use crate::primitives::Primitive;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("x{i}")).collect()
    }

    fn gen(formula: &str, n_inputs: usize, n_train: usize, seed: u64) -> Dataset {
        let nm = names(n_inputs);
        let expr = parse_formula(formula, &nm).unwrap();
        Dataset::generate(
            &[expr],
            &nm,
            &vec![(-1.0, 1.0); n_inputs],
            n_train,
            n_train / 2,
            0.0,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradients() {
        // Identity edge reproduces the label exactly.
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 0, false).unwrap();
        let e = model.layers[0].kan.edge_mut(0, 0);
        *e = crate::model::EdgeFunction::identity(e.spline.grid.clone());
        e.mode = EdgeMode::Both;
        e.frozen = false;
        let x = Array2::from_shape_fn((21, 1), |(s, _)| s as f64 / 10.0 - 1.0);
        let y = x.clone();
        let cfg = TrainConfig::default();
        let (parts, grads) = loss_and_grad(&model, &x, &y, &cfg).unwrap();
        assert!(parts.mse < 1e-28);
        for g in &grads {
            assert!(g.base_scale.abs() < 1e-12);
            assert!(g.spline_scale.abs() < 1e-12);
            assert!(g.coef.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Two blocks with a mult node in the middle; all parameter kinds hit.
        let width = WidthSpec::from_pairs(&[(3, 0), (4, 1), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 17, false).unwrap();
        let x = Array2::from_shape_fn((13, 3), |(s, i)| {
            ((s * 7 + i * 3) % 19) as f64 / 9.5 - 1.0
        });
        let y = Array2::from_shape_fn((13, 1), |(s, _)| (s as f64 / 6.0 - 1.0).sin());
        let cfg = TrainConfig { lambda_l1: 0.05, lambda_entropy: 0.02, ..TrainConfig::default() };

        let layout = ParamLayout::build(&model);
        assert!(layout.len >= 200, "layout has {} params", layout.len);
        let (_, flat) =
            objective(&model, &layout, &x, &y, cfg.lambda_l1, cfg.lambda_entropy).unwrap();

        let mut params = layout.read(&model);
        let h = 1e-4;
        let mut worst = 0.0_f64;
        for p in 0..layout.len {
            let orig = params[p];
            params[p] = orig + h;
            layout.write(&mut model, &params);
            let (plus, _) =
                objective(&model, &layout, &x, &y, cfg.lambda_l1, cfg.lambda_entropy).unwrap();
            params[p] = orig - h;
            layout.write(&mut model, &params);
            let (minus, _) =
                objective(&model, &layout, &x, &y, cfg.lambda_l1, cfg.lambda_entropy).unwrap();
            params[p] = orig;
            let fd = (plus.total - minus.total) / (2.0 * h);
            let rel = (flat[p] - fd).abs() / (flat[p].abs().max(fd.abs()) + 1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "param {p}: analytic {} vs fd {fd}, rel {rel}", flat[p]);
        }
        layout.write(&mut model, &params);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let width = WidthSpec::from_pairs(&[(2, 0), (2, 1), (1, 0)]);
        let model = MultKanModel::init(&width, GridSpec::default(), 5, false).unwrap();
        let layout = ParamLayout::build(&model);
        let x = Array2::from_shape_fn((4, 2), |(s, i)| 0.3 * (s as f64 - 1.5) + 0.1 * i as f64);
        let y = Array2::<f64>::zeros((4, 1));
        let pass = forward_detailed(&model, &x).unwrap();
        let denom = 4.0;
        let out_adj = (pass.output() - &y).mapv(|r| 2.0 * r / denom);
        let (_, in_grad) = backprop::backward(&model, &layout, &pass, &out_adj, None);
        let h = 1e-5;
        for s in 0..4 {
            for i in 0..2 {
                let mut xp = x.clone();
                xp[[s, i]] += h;
                let mut xm = x.clone();
                xm[[s, i]] -= h;
                let f = |xx: &Array2<f64>| {
                    let p = forward_detailed(&model, xx).unwrap();
                    p.output().iter().map(|o| o * o).sum::<f64>() / denom
                };
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!(
                    (in_grad[[s, i]] - fd).abs() < 1e-6,
                    "input ({s},{i}): {} vs {fd}",
                    in_grad[[s, i]]
                );
            }
        }
    }

    #[test]
    fn single_edge_entropy_is_zero() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 1, false).unwrap();
        let x = Array2::from_shape_fn((8, 1), |(s, _)| s as f64 / 4.0 - 1.0);
        model.forward(&x, true).unwrap();
        let (l1, entropy) = regularization(&model).unwrap();
        assert!(l1 > 0.0);
        assert!(entropy.abs() < 1e-12);
    }

    #[test]
    fn equal_edges_reach_log_m_entropy() {
        let width = WidthSpec::from_pairs(&[(1, 0), (4, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 2, false).unwrap();
        let reference = model.layers[0].kan.edge(0, 0).clone();
        for j in 1..4 {
            *model.layers[0].kan.edge_mut(0, j) = reference.clone();
        }
        let x = Array2::from_shape_fn((16, 1), |(s, _)| s as f64 / 8.0 - 1.0);
        model.forward(&x, true).unwrap();
        let (_, entropy) = regularization(&model).unwrap();
        assert!((entropy - 4.0_f64.ln()).abs() < 1e-9, "entropy {entropy}");
    }

    #[test]
    fn doubling_scales_doubles_l1_exactly() {
        // One block, so doubling every scale doubles every activation;
        // power-of-two scaling is exact in binary floating point.
        let width = WidthSpec::from_pairs(&[(2, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 4, false).unwrap();
        model.for_each_edge_mut(|_, e| e.base_scale = 0.0);
        let x = Array2::from_shape_fn((10, 2), |(s, i)| (s as f64 / 5.0 - 1.0) * (1.0 - 0.3 * i as f64));
        model.forward(&x, true).unwrap();
        let (l1_before, _) = regularization(&model).unwrap();
        model.for_each_edge_mut(|_, e| e.spline_scale *= 2.0);
        model.forward(&x, true).unwrap();
        let (l1_after, _) = regularization(&model).unwrap();
        assert_eq!(l1_after, 2.0 * l1_before);
    }

    #[test]
    fn regularization_requires_cache() {
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let model = MultKanModel::init(&width, GridSpec::default(), 1, false).unwrap();
        assert!(matches!(
            regularization(&model),
            Err(TrainError::Model(ModelError::NoCache))
        ));
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let data = gen("x1*x2", 2, 40, 9);
        let width = WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 9, false).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let log = train(&mut model, &data, &cfg).unwrap();
        assert!(log.records.is_empty());
        model.cache = None;
        assert_eq!(model, before);
    }

    #[test]
    fn frozen_and_masked_edges_never_move() {
        let data = gen("x1+x2", 2, 50, 3);
        let width = WidthSpec::from_pairs(&[(2, 0), (2, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 3, false).unwrap();
        model.layers[0].kan.edge_mut(0, 0).frozen = true;
        model.layers[0].kan.edge_mut(1, 1).mask = 0.0;
        let frozen_before = model.layers[0].kan.edge(0, 0).clone();
        let masked_before = model.layers[0].kan.edge(1, 1).clone();
        let cfg = TrainConfig { steps: 30, grid_update_steps: vec![], ..TrainConfig::default() };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(*model.layers[0].kan.edge(0, 0), frozen_before);
        assert_eq!(*model.layers[0].kan.edge(1, 1), masked_before);
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let data = gen("sin(3*x1)+x2", 2, 60, 11);
        let width = WidthSpec::from_pairs(&[(2, 0), (3, 0), (1, 0)]);
        let cfg = TrainConfig {
            steps: 25,
            batch_size: Some(16),
            seed: 42,
            ..TrainConfig::default()
        };
        let mut m1 = MultKanModel::init(&width, GridSpec::default(), 7, false).unwrap();
        let mut m2 = MultKanModel::init(&width, GridSpec::default(), 7, false).unwrap();
        let log1 = train(&mut m1, &data, &cfg).unwrap();
        let log2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(log1, log2);
        m1.cache = None;
        m2.cache = None;
        assert_eq!(m1, m2);
    }

    #[test]
    fn divergent_run_aborts_with_partial_log() {
        let data = gen("x1", 1, 30, 5);
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 5, false).unwrap();
        let cfg = TrainConfig {
            steps: 400,
            learning_rate: 1e4,
            grid_update_steps: vec![],
            ..TrainConfig::default()
        };
        match train(&mut model, &data, &cfg) {
            Err(TrainError::Diverged { step, log }) => {
                assert!(step >= 1);
                assert_eq!(log.records.len(), step.min(log.records.len()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn adam_learns_a_smooth_target() {
        let data = gen("x1^2", 1, 80, 21);
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 21, false).unwrap();
        let cfg = TrainConfig { steps: 300, learning_rate: 0.05, ..TrainConfig::default() };
        let log = train(&mut model, &data, &cfg).unwrap();
        let last = log.records.last().unwrap();
        assert!(last.train_loss < 1e-2, "train rmse {}", last.train_loss);
        assert!(last.test_loss < 2e-2, "test rmse {}", last.test_loss);
    }

    #[test]
    fn lbfgs_learns_faster_than_a_few_adam_steps() {
        let data = gen("sin(2*x1)", 1, 60, 33);
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 33, false).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            optimizer: OptimizerKind::Lbfgs,
            grid_update_steps: vec![],
            ..TrainConfig::default()
        };
        let log = train(&mut model, &data, &cfg).unwrap();
        assert!(log.final_test_rmse().unwrap() < 1e-3, "rmse {:?}", log.final_test_rmse());
    }

    #[test]
    fn grid_updates_keep_training_stable() {
        let data = gen("exp(x1)", 1, 70, 8);
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 8, false).unwrap();
        let cfg = TrainConfig { steps: 200, learning_rate: 0.05, ..TrainConfig::default() };
        let log = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(log.records.len(), 200);
        assert!(log.final_test_rmse().unwrap() < 5e-2);
    }

    #[test]
    fn symbolic_edges_freeze_grids() {
        let data = gen("sin(x1)", 1, 40, 2);
        let width = WidthSpec::from_pairs(&[(1, 0), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 2, false).unwrap();
        let e = model.layers[0].kan.edge_mut(0, 0);
        e.mode = EdgeMode::Both;
        e.symbolic = Some(SymbolicSpec::new(Primitive::Sin, 1.0, 0.0, 0.5, 0.0));
        let grid_before = model.layers[0].kan.edge(0, 0).spline.grid.clone();
        let cfg = TrainConfig { steps: 60, ..TrainConfig::default() };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.layers[0].kan.edge(0, 0).spline.grid, grid_before);
    }

    #[test]
    fn xy_entropy_does_not_grow_under_l1_pressure() {
        let data = gen("x1*x2", 2, 100, 14);
        let width = WidthSpec::from_pairs(&[(2, 0), (0, 1), (1, 0)]);
        let mut model = MultKanModel::init(&width, GridSpec::default(), 14, false).unwrap();
        model.forward(&data.train_inputs, true).unwrap();
        let (_, h0) = regularization(&model).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 0.02,
            lambda_l1: 1e-2,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &data, &cfg).unwrap();
        let h1 = log.records.last().unwrap().entropy;
        assert!(h1 <= h0 + 1e-9, "entropy grew: {h0} -> {h1}");
    }
}
