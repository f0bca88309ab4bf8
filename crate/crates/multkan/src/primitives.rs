//! The symbolic primitive registry: the unary functions an edge can snap to.
//!
//! Every primitive knows its value and first two derivatives (the trainer
//! differentiates through symbolic edges, including once more for
//! input-gradient losses), its domain guard, and a complexity rank used to
//! break ties when ranking candidate fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrimitiveError {
    #[error("{prim} undefined at argument {x}")]
    Domain { prim: &'static str, x: f64 },
}

/// Domain policy for guarded primitives: clamp the argument into the safe
/// region (training) or reject it (strict evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardMode {
    Clamp,
    Strict,
}

/// Arguments closer than this to a pole are clamped or rejected.
pub const GUARD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Identity,
    Square,
    Cube,
    Quartic,
    Abs,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Exp,
    Log,
    Inv,
    InvSquare,
    InvSqrt,
    Gaussian,
    Atan,
    Asin,
    Tan,
}

use Primitive::*;

pub const ALL_PRIMITIVES: [Primitive; 18] = [
    Identity, Square, Cube, Quartic, Abs, Sqrt, Sin, Cos, Tanh, Exp, Log, Inv, InvSquare, InvSqrt,
    Gaussian, Atan, Asin, Tan,
];

impl Primitive {
    /// Human-readable name used in reports and suggestion tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Identity => "x",
            Square => "x^2",
            Cube => "x^3",
            Quartic => "x^4",
            Abs => "abs",
            Sqrt => "sqrt",
            Sin => "sin",
            Cos => "cos",
            Tanh => "tanh",
            Exp => "exp",
            Log => "log",
            Inv => "1/x",
            InvSquare => "1/x^2",
            InvSqrt => "1/sqrt(x)",
            Gaussian => "gaussian",
            Atan => "arctan",
            Asin => "arcsin",
            Tan => "tan",
        }
    }

    /// Function-call token accepted by the formula parser, when one exists.
    /// Power-like primitives are written with `^` instead.
    pub fn fn_token(self) -> Option<&'static str> {
        match self {
            Abs => Some("abs"),
            Sqrt => Some("sqrt"),
            Sin => Some("sin"),
            Cos => Some("cos"),
            Tanh => Some("tanh"),
            Exp => Some("exp"),
            Log => Some("log"),
            Gaussian => Some("gaussian"),
            Atan => Some("atan"),
            Asin => Some("asin"),
            Tan => Some("tan"),
            _ => None,
        }
    }

    /// Exponent for primitives expressible as `x^p`.
    pub fn power_exponent(self) -> Option<f64> {
        match self {
            Identity => Some(1.0),
            Square => Some(2.0),
            Cube => Some(3.0),
            Quartic => Some(4.0),
            Sqrt => Some(0.5),
            Inv => Some(-1.0),
            InvSquare => Some(-2.0),
            InvSqrt => Some(-0.5),
            _ => None,
        }
    }

    pub fn from_power_exponent(p: f64) -> Option<Primitive> {
        const CANDIDATES: [Primitive; 8] = [Identity, Square, Cube, Quartic, Sqrt, Inv, InvSquare, InvSqrt];
        CANDIDATES
            .into_iter()
            .find(|prim| (prim.power_exponent().unwrap() - p).abs() < 1e-12)
    }

    /// Total-ordered complexity rank; lower is simpler.
    pub fn complexity(self) -> u8 {
        match self {
            Identity => 1,
            Square => 2,
            Cube => 3,
            Quartic => 4,
            Abs => 5,
            Sqrt => 6,
            Sin => 7,
            Cos => 8,
            Tanh => 9,
            Exp => 10,
            Log => 11,
            Inv => 12,
            InvSquare => 13,
            InvSqrt => 14,
            Gaussian => 15,
            Atan => 16,
            Asin => 17,
            Tan => 18,
        }
    }

    fn clamp_arg(self, x: f64) -> f64 {
        match self {
            Sqrt | Log | InvSqrt => x.max(GUARD_EPS),
            Inv | InvSquare => {
                if x.abs() >= GUARD_EPS {
                    x
                } else if x < 0.0 {
                    -GUARD_EPS
                } else {
                    GUARD_EPS
                }
            }
            Asin => x.clamp(-1.0 + GUARD_EPS, 1.0 - GUARD_EPS),
            Exp => x.min(700.0),
            _ => x,
        }
    }

    /// True when `x` is a valid strict-mode argument.
    pub fn arg_in_domain(self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match self {
            Sqrt | Log | InvSqrt => x > 0.0,
            Inv | InvSquare => x != 0.0,
            Asin => (-1.0..=1.0).contains(&x),
            Exp => x <= 709.0,
            Tan => x.cos().abs() > GUARD_EPS,
            _ => true,
        }
    }

    /// Value and first two derivatives at `x`. In clamp mode out-of-domain
    /// arguments are moved to the domain boundary and reported as constant
    /// there (zero derivatives).
    pub fn eval_with_derivs(self, x: f64, mode: GuardMode) -> Result<(f64, f64, f64), PrimitiveError> {
        if mode == GuardMode::Strict && !self.arg_in_domain(x) {
            return Err(PrimitiveError::Domain { prim: self.display_name(), x });
        }
        let cx = self.clamp_arg(x);
        let clamped = cx != x;
        let (v, d1, d2) = self.raw_derivs(cx);
        if clamped {
            Ok((v, 0.0, 0.0))
        } else {
            Ok((v, d1, d2))
        }
    }

    pub fn eval(self, x: f64, mode: GuardMode) -> Result<f64, PrimitiveError> {
        Ok(self.eval_with_derivs(x, mode)?.0)
    }

    fn raw_derivs(self, x: f64) -> (f64, f64, f64) {
        match self {
            Identity => (x, 1.0, 0.0),
            Square => (x * x, 2.0 * x, 2.0),
            Cube => (x * x * x, 3.0 * x * x, 6.0 * x),
            Quartic => (x * x * x * x, 4.0 * x * x * x, 12.0 * x * x),
            Abs => (x.abs(), x.signum(), 0.0),
            Sqrt => {
                let s = x.sqrt();
                (s, 0.5 / s, -0.25 / (s * x))
            }
            Sin => (x.sin(), x.cos(), -x.sin()),
            Cos => (x.cos(), -x.sin(), -x.cos()),
            Tanh => {
                let t = x.tanh();
                let sech2 = 1.0 - t * t;
                (t, sech2, -2.0 * t * sech2)
            }
            Exp => {
                let e = x.exp();
                (e, e, e)
            }
            Log => (x.ln(), 1.0 / x, -1.0 / (x * x)),
            Inv => {
                let r = 1.0 / x;
                (r, -r * r, 2.0 * r * r * r)
            }
            InvSquare => {
                let r = 1.0 / x;
                let r2 = r * r;
                (r2, -2.0 * r2 * r, 6.0 * r2 * r2)
            }
            InvSqrt => {
                let r = 1.0 / x.sqrt();
                (r, -0.5 * r / x, 0.75 * r / (x * x))
            }
            Gaussian => {
                let g = (-x * x).exp();
                (g, -2.0 * x * g, (4.0 * x * x - 2.0) * g)
            }
            Atan => {
                let d = 1.0 + x * x;
                (x.atan(), 1.0 / d, -2.0 * x / (d * d))
            }
            Asin => {
                let d = 1.0 - x * x;
                let s = d.sqrt();
                (x.asin(), 1.0 / s, x / (s * d))
            }
            Tan => {
                let t = x.tan();
                let sec2 = 1.0 + t * t;
                (t, sec2, 2.0 * t * sec2)
            }
        }
    }

    /// True when `u` keeps a safe margin `band` from the primitive's poles,
    /// so a sample at `u` may participate in a symbolic fit.
    pub fn arg_clear_of_poles(self, u: f64, band: f64) -> bool {
        if !u.is_finite() {
            return false;
        }
        match self {
            Sqrt | Log | InvSqrt => u > band,
            Inv | InvSquare => u.abs() > band,
            Asin => u.abs() < 1.0 - band,
            Exp => u < 700.0,
            Tan => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                let nearest = ((u - half_pi) / std::f64::consts::PI).round();
                (u - (half_pi + nearest * std::f64::consts::PI)).abs() > band
            }
            _ => true,
        }
    }
}

/// An ordered collection of primitives available to symbolic fitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimitiveLibrary {
    entries: Vec<Primitive>,
}

impl Default for PrimitiveLibrary {
    fn default() -> Self {
        PrimitiveLibrary { entries: ALL_PRIMITIVES.to_vec() }
    }
}

impl PrimitiveLibrary {
    /// Restrict the library to a subset. Duplicates are dropped, order kept.
    pub fn from_primitives(prims: &[Primitive]) -> Self {
        let mut entries = Vec::new();
        for &p in prims {
            if !entries.contains(&p) {
                entries.push(p);
            }
        }
        PrimitiveLibrary { entries }
    }

    pub fn entries(&self) -> &[Primitive] {
        &self.entries
    }

    /// Resolve a parser token, accepting the usual aliases.
    pub fn lookup_token(token: &str) -> Option<Primitive> {
        match token {
            "arcsin" => return Some(Asin),
            "arctan" => return Some(Atan),
            "ln" => return Some(Log),
            _ => {}
        }
        ALL_PRIMITIVES.into_iter().find(|p| p.fn_token() == Some(token))
    }
}
