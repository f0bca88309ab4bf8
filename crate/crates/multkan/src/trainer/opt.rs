//! First-order and quasi-Newton optimizers over flat parameter vectors.

use super::TrainError;
use std::collections::VecDeque;

/// Adam with bias correction.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_BRACKET: usize = 20;
const MAX_ZOOM: usize = 30;

/// Limited-memory BFGS with two-loop recursion and a strong-Wolfe line
/// search. One `step` performs one outer iteration.
pub(crate) struct Lbfgs {
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    max_history: usize,
}

pub(crate) struct LbfgsOutcome {
    pub f: f64,
    pub g: Vec<f64>,
    /// Line search failed to move; caller should stop iterating.
    pub stalled: bool,
}

impl Lbfgs {
    pub fn new() -> Self {
        Lbfgs { history: VecDeque::new(), max_history: 10 }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let alpha = rho * dot(s, &q);
            for i in 0..q.len() {
                q[i] -= alpha * y[i];
            }
            alphas.push(alpha);
        }
        // Initial Hessian gamma = s.y / y.y from the latest pair.
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), alpha) in self.history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &q);
            for i in 0..q.len() {
                q[i] += (alpha - beta) * s[i];
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }

    pub fn step<F>(
        &mut self,
        params: &mut [f64],
        f0: f64,
        g0: &[f64],
        eval: &mut F,
    ) -> Result<LbfgsOutcome, TrainError>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
    {
        let mut d = self.direction(g0);
        let mut slope = dot(&d, g0);
        if !(slope < 0.0) {
            // Stale curvature produced a non-descent direction.
            self.reset();
            d = g0.iter().map(|&g| -g).collect();
            slope = dot(&d, g0);
            if !(slope < 0.0) {
                return Ok(LbfgsOutcome { f: f0, g: g0.to_vec(), stalled: true });
            }
        }
        let x0 = params.to_vec();
        let probe = |alpha: f64, eval: &mut F| -> Result<(f64, Vec<f64>, f64), TrainError> {
            let xt: Vec<f64> = x0.iter().zip(&d).map(|(x, di)| x + alpha * di).collect();
            let (f, g) = eval(&xt)?;
            let dphi = dot(&g, &d);
            Ok((f, g, dphi))
        };

        // Bracket phase (Nocedal & Wright 3.5).
        let mut alpha_prev = 0.0;
        let mut f_prev = f0;
        let mut dphi_prev = slope;
        let mut alpha = 1.0;
        let mut result: Option<(f64, f64, Vec<f64>)> = None;
        let mut zoom_bounds: Option<(f64, f64, f64, f64, f64)> = None;
        for it in 0..MAX_BRACKET {
            let (f, g, dphi) = probe(alpha, eval)?;
            if f > f0 + WOLFE_C1 * alpha * slope || (it > 0 && f >= f_prev) {
                zoom_bounds = Some((alpha_prev, f_prev, dphi_prev, alpha, f));
                break;
            }
            if dphi.abs() <= -WOLFE_C2 * slope {
                result = Some((alpha, f, g));
                break;
            }
            if dphi >= 0.0 {
                zoom_bounds = Some((alpha, f, dphi, alpha_prev, f_prev));
                break;
            }
            alpha_prev = alpha;
            f_prev = f;
            dphi_prev = dphi;
            alpha *= 2.0;
        }

        if result.is_none() {
            if let Some((mut lo, mut f_lo, mut dphi_lo, mut hi, mut f_hi)) = zoom_bounds {
                for _ in 0..MAX_ZOOM {
                    // Quadratic interpolation with a bisection safeguard.
                    let denom = f_hi - f_lo - dphi_lo * (hi - lo);
                    let mut a = if denom.abs() > 1e-300 {
                        lo - dphi_lo * (hi - lo) * (hi - lo) / (2.0 * denom)
                    } else {
                        0.5 * (lo + hi)
                    };
                    let (lb, ub) = if lo < hi { (lo, hi) } else { (hi, lo) };
                    let width = ub - lb;
                    if !(a.is_finite()) || a < lb + 0.1 * width || a > ub - 0.1 * width {
                        a = 0.5 * (lo + hi);
                    }
                    let (f, g, dphi) = probe(a, eval)?;
                    if f > f0 + WOLFE_C1 * a * slope || f >= f_lo {
                        hi = a;
                        f_hi = f;
                    } else {
                        if dphi.abs() <= -WOLFE_C2 * slope {
                            result = Some((a, f, g));
                            break;
                        }
                        if dphi * (hi - lo) >= 0.0 {
                            hi = lo;
                            f_hi = f_lo;
                        }
                        lo = a;
                        f_lo = f;
                        dphi_lo = dphi;
                    }
                    if (hi - lo).abs() < 1e-16 {
                        break;
                    }
                }
                if result.is_none() {
                    // Settle for sufficient decrease at the low endpoint.
                    if f_lo < f0 && lo > 0.0 {
                        let (f, g, _) = probe(lo, eval)?;
                        result = Some((lo, f, g));
                    }
                }
            }
        }

        let Some((alpha, f_new, g_new)) = result else {
            // Restore the starting point; nothing acceptable found.
            let (_, g) = eval(&x0)?;
            return Ok(LbfgsOutcome { f: f0, g, stalled: true });
        };

        for (p, (x, di)) in params.iter_mut().zip(x0.iter().zip(&d)) {
            *p = x + alpha * di;
        }
        let s: Vec<f64> = d.iter().map(|di| alpha * di).collect();
        let y: Vec<f64> = g_new.iter().zip(g0).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&y) * norm(&s) {
            if self.history.len() == self.max_history {
                self.history.pop_front();
            }
            let rho = 1.0 / sy;
            self.history.push_back((s, y, rho));
        }
        Ok(LbfgsOutcome { f: f_new, g: g_new, stalled: false })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
