//! Formula parsing, evaluation and printing.
//!
//! The grammar is the usual infix arithmetic: `+ - * / ^`, numeric literals,
//! `pi`, named variables, and unary function calls like `sin(...)`. `^` is
//! right-associative and unary minus binds tighter than `*`, so `-x^2`
//! reads as `-(x^2)` and `-a*b` as `(-a)*b`.
//!
//! Parsed formulas are canonicalized into an [`ExprTree`]: sums and products
//! are flattened and constant-folded, `a - b` becomes `a + (-1)*b`, and
//! `a / b` becomes `a * b^-1`. Printing emits the same grammar, so a
//! print/parse round trip reproduces the tree.

use crate::primitives::{GuardMode, Primitive, PrimitiveLibrary};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("domain violation: {expr} evaluated at {value}")]
    Domain { expr: String, value: f64 },
    #[error("division by zero in {expr}")]
    DivisionByZero { expr: String },
    #[error("{expr} produced a non-finite value")]
    NonFinite { expr: String },
    #[error("unsupported construct: {0}")]
    Unsupported(String),
}

/// Canonicalized expression tree.
///
/// Sums and products hold two or more children and are never directly
/// nested inside the same kind; power exponents are constants.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprTree {
    Var(usize),
    Const(f64),
    Unary { prim: Primitive, child: Box<ExprTree> },
    Sum(Vec<ExprTree>),
    Product(Vec<ExprTree>),
    Power { base: Box<ExprTree>, exponent: f64 },
}

impl ExprTree {
    pub fn unary(prim: Primitive, child: ExprTree) -> ExprTree {
        ExprTree::Unary { prim, child: Box::new(child) }
    }

    pub fn power(base: ExprTree, exponent: f64) -> ExprTree {
        ExprTree::Power { base: Box::new(base), exponent }
    }

    /// Indices of the variables appearing in the tree.
    pub fn vars_used(&self) -> std::collections::BTreeSet<usize> {
        let mut out = std::collections::BTreeSet::new();
        self.walk_vars(&mut out);
        out
    }

    fn walk_vars(&self, out: &mut std::collections::BTreeSet<usize>) {
        match self {
            ExprTree::Var(i) => {
                out.insert(*i);
            }
            ExprTree::Const(_) => {}
            ExprTree::Unary { child, .. } => child.walk_vars(out),
            ExprTree::Sum(cs) | ExprTree::Product(cs) => {
                for c in cs {
                    c.walk_vars(out);
                }
            }
            ExprTree::Power { base, .. } => base.walk_vars(out),
        }
    }

    /// Evaluate with strict domain checking. `names` is only consulted when
    /// building error messages.
    pub fn eval(&self, vars: &[f64], names: &[String]) -> Result<f64, ExprError> {
        let v = self.eval_inner(vars, names)?;
        if !v.is_finite() {
            return Err(ExprError::NonFinite { expr: self.print(names) });
        }
        Ok(v)
    }

    fn eval_inner(&self, vars: &[f64], names: &[String]) -> Result<f64, ExprError> {
        match self {
            ExprTree::Var(i) => Ok(vars[*i]),
            ExprTree::Const(c) => Ok(*c),
            ExprTree::Unary { prim, child } => {
                let x = child.eval(vars, names)?;
                prim.eval(x, GuardMode::Strict)
                    .map_err(|_| ExprError::Domain { expr: self.print(names), value: x })
            }
            ExprTree::Sum(cs) => {
                let mut acc = 0.0;
                for c in cs {
                    acc += c.eval(vars, names)?;
                }
                Ok(acc)
            }
            ExprTree::Product(cs) => {
                let mut acc = 1.0;
                for c in cs {
                    acc *= c.eval(vars, names)?;
                }
                Ok(acc)
            }
            ExprTree::Power { base, exponent } => {
                let b = base.eval(vars, names)?;
                pow_checked(b, *exponent).map_err(|kind| match kind {
                    PowError::DivisionByZero => {
                        ExprError::DivisionByZero { expr: self.print(names) }
                    }
                    PowError::NegativeBase => ExprError::Domain { expr: self.print(names), value: b },
                })
            }
        }
    }

    /// Operator depth: layers the tree occupies once affine shifts, constant
    /// factors, and power chains fuse into single edge functions. A
    /// multi-factor product at the root costs one extra level because
    /// multiplication nodes feed an addition output layer; the minimum is 1.
    pub fn op_depth(&self) -> usize {
        let lift = matches!(self, ExprTree::Product(cs) if non_const(cs).len() >= 2);
        (self.node_level() + lift as usize).max(1)
    }

    /// The single edge a unary or power node turns into: the primitive plus
    /// the subtree it reads. Chained powers collapse to the deepest exponent
    /// the library covers (`sqrt(u)^-1` is one `InvSqrt` edge); `Err` carries
    /// an exponent with no matching primitive. `None` for other node kinds.
    pub(crate) fn edge_feed(&self) -> Option<Result<(Primitive, &ExprTree), f64>> {
        if let ExprTree::Unary { prim, child } = self {
            if prim.power_exponent().is_none() {
                return Some(Ok((*prim, child)));
            }
        }
        let (mut base, mut exp) = self.power_parts()?;
        let mut fused = Primitive::from_power_exponent(exp).map(|p| (p, base));
        while let Some((inner, p)) = base.power_parts() {
            // (u^p)^e == u^(p*e) needs p sign-transparent: odd integers keep
            // the sign and fractional exponents already restrict u >= 0. An
            // even p erases the sign, which only a still-even product hides
            // ((u^2)^0.5 is |u|, not u).
            let total = exp * p;
            if is_even_int(p) && !is_even_int(total) {
                break;
            }
            base = inner;
            exp = total;
            if let Some(prim) = Primitive::from_power_exponent(exp) {
                fused = Some((prim, base));
            }
        }
        Some(fused.ok_or(exp))
    }

    fn power_parts(&self) -> Option<(&ExprTree, f64)> {
        match self {
            ExprTree::Power { base, exponent } => Some((base, *exponent)),
            ExprTree::Unary { prim, child } => prim.power_exponent().map(|p| (&**child, p)),
            _ => None,
        }
    }

    // Subtree the compiled edge for a unary or power node reads from.
    fn edge_base(&self) -> &ExprTree {
        match (self.edge_feed(), self) {
            (Some(Ok((_, base))), _) => base,
            (_, ExprTree::Power { base, .. }) => base,
            (_, ExprTree::Unary { child, .. }) => child,
            _ => self,
        }
    }

    // Level where the subtree materializes as a network node. Single-operand
    // sums and products stay transparent: their constants fold into the
    // affine part of a downstream edge.
    fn node_level(&self) -> usize {
        match self {
            ExprTree::Var(_) | ExprTree::Const(_) => 0,
            ExprTree::Unary { .. } | ExprTree::Power { .. } => {
                self.edge_base().affine_source().level + 1
            }
            ExprTree::Sum(cs) => {
                let ops = non_const(cs);
                if let [lone] = ops[..] {
                    return lone.feed_source().level + 1;
                }
                let feeds: Vec<Placement> = ops.iter().map(|t| t.feed_source()).collect();
                let level = 1 + feeds.iter().map(|p| p.level).max().unwrap_or(0);
                // Two feeds reading one input would collide on a single grid
                // edge, so a copy layer separates them.
                let mut seen = std::collections::BTreeSet::new();
                if level == 1 && feeds.iter().filter_map(|p| p.input).any(|i| !seen.insert(i)) {
                    return 2;
                }
                level
            }
            ExprTree::Product(cs) => {
                let ops = non_const(cs);
                if let [lone] = ops[..] {
                    return lone.feed_source().level + 1;
                }
                // Factors land on separate subnodes, so shared inputs never
                // collide the way sum terms do.
                1 + ops.iter().map(|t| t.feed_source().level).max().unwrap_or(0)
            }
        }
    }

    // Node an edge reading this subtree starts from.
    fn feed_source(&self) -> Placement {
        match self {
            ExprTree::Var(i) => Placement { level: 0, input: Some(*i) },
            ExprTree::Const(_) => Placement { level: 0, input: None },
            ExprTree::Unary { .. } | ExprTree::Power { .. } => self.edge_base().affine_source(),
            ExprTree::Sum(cs) | ExprTree::Product(cs) => match non_const(cs)[..] {
                [lone] => lone.feed_source(),
                _ => Placement { level: self.node_level(), input: None },
            },
        }
    }

    // Node the subtree resolves to when only an affine wrapper separates
    // them (`k*u`, `u + k`).
    fn affine_source(&self) -> Placement {
        match self {
            ExprTree::Var(i) => Placement { level: 0, input: Some(*i) },
            ExprTree::Sum(cs) | ExprTree::Product(cs) => match non_const(cs)[..] {
                [lone] => lone.affine_source(),
                _ => Placement { level: self.node_level(), input: None },
            },
            _ => Placement { level: self.node_level(), input: None },
        }
    }

    /// Render in the grammar accepted by [`parse_formula`].
    pub fn print(&self, names: &[String]) -> String {
        self.print_prec(names, 0)
    }

    // Precedence levels: 0 sum, 1 product, 2 power operand, 3 atom.
    fn print_prec(&self, names: &[String], min_level: u8) -> String {
        match self {
            ExprTree::Var(i) => names
                .get(*i)
                .cloned()
                .unwrap_or_else(|| format!("x{}", i + 1)),
            ExprTree::Const(c) => {
                if *c < 0.0 && min_level > 0 {
                    format!("({c})")
                } else {
                    format!("{c}")
                }
            }
            ExprTree::Unary { prim, child } => {
                if let Some(tok) = prim.fn_token() {
                    format!("{}({})", tok, child.print(names))
                } else {
                    let p = prim.power_exponent().expect("primitive is printable");
                    ExprTree::power((**child).clone(), p).print_prec(names, min_level)
                }
            }
            ExprTree::Sum(cs) => {
                let mut out = String::new();
                for (idx, c) in cs.iter().enumerate() {
                    let (neg, mag) = c.split_negation();
                    if idx == 0 {
                        if neg {
                            out.push('-');
                        }
                    } else {
                        out.push_str(if neg { " - " } else { " + " });
                    }
                    out.push_str(&mag.print_prec(names, 1));
                }
                if min_level > 0 {
                    format!("({out})")
                } else {
                    out
                }
            }
            ExprTree::Product(cs) => {
                // A leading negative coefficient prints as a prefix minus
                // where the grammar allows it.
                if min_level == 0 {
                    let (neg, mag) = self.split_negation();
                    if neg {
                        return format!("-{}", mag.print_prec(names, 1));
                    }
                }
                let body = cs
                    .iter()
                    .map(|c| c.print_prec(names, 2))
                    .collect::<Vec<_>>()
                    .join("*");
                if min_level > 1 {
                    format!("({body})")
                } else {
                    body
                }
            }
            ExprTree::Power { base, exponent } => {
                let b = base.print_prec(names, 3);
                let e = if *exponent < 0.0 {
                    format!("(-{})", -exponent)
                } else {
                    format!("{exponent}")
                };
                let s = format!("{b}^{e}");
                // `^` is right-associative, so a power base must keep parens.
                if min_level >= 3 {
                    format!("({s})")
                } else {
                    s
                }
            }
        }
    }

    /// Split `(-1) * rest` products into a sign and magnitude for printing.
    fn split_negation(&self) -> (bool, ExprTree) {
        if let ExprTree::Product(cs) = self {
            if let ExprTree::Const(c) = cs[0] {
                if c < 0.0 {
                    let mut rest: Vec<ExprTree> = cs[1..].to_vec();
                    if c != -1.0 {
                        rest.insert(0, ExprTree::Const(-c));
                    }
                    return (
                        true,
                        match rest.len() {
                            0 => ExprTree::Const(1.0),
                            1 => rest.pop().unwrap(),
                            _ => ExprTree::Product(rest),
                        },
                    );
                }
            }
        }
        if let ExprTree::Const(c) = self {
            if *c < 0.0 {
                return (true, ExprTree::Const(-c));
            }
        }
        (false, self.clone())
    }
}

// Where a compiled feed originates: a layer level plus, when the source is
// an input node, which one.
#[derive(Clone, Copy)]
struct Placement {
    level: usize,
    input: Option<usize>,
}

/// Children of a sum or product that are not plain constants.
pub(crate) fn non_const(cs: &[ExprTree]) -> Vec<&ExprTree> {
    cs.iter().filter(|c| !matches!(c, ExprTree::Const(_))).collect()
}

fn is_even_int(p: f64) -> bool {
    (p - p.round()).abs() < 1e-12 && (p.round() as i64) % 2 == 0
}

enum PowError {
    DivisionByZero,
    NegativeBase,
}

fn pow_checked(b: f64, p: f64) -> Result<f64, PowError> {
    let rounded = p.round();
    if (p - rounded).abs() < 1e-12 {
        if b == 0.0 && rounded < 0.0 {
            return Err(PowError::DivisionByZero);
        }
        Ok(b.powi(rounded as i32))
    } else {
        if b < 0.0 {
            return Err(PowError::NegativeBase);
        }
        if b == 0.0 && p < 0.0 {
            return Err(PowError::DivisionByZero);
        }
        Ok(b.powf(p))
    }
}

/// Flatten, fold constants, and normalize subtraction / division rewrites.
pub fn canonicalize(tree: ExprTree) -> ExprTree {
    match tree {
        ExprTree::Var(_) | ExprTree::Const(_) => tree,
        ExprTree::Unary { prim, child } => {
            let child = canonicalize(*child);
            // Power-shaped primitives without a function token (x^2, 1/x, ...)
            // normalize to Power nodes; this also erases Identity.
            if prim.fn_token().is_none() {
                if let Some(p) = prim.power_exponent() {
                    return canonicalize(ExprTree::Power { base: Box::new(child), exponent: p });
                }
            }
            if let ExprTree::Const(c) = child {
                if let Ok(v) = prim.eval(c, GuardMode::Strict) {
                    if v.is_finite() {
                        return ExprTree::Const(v);
                    }
                }
            }
            ExprTree::unary(prim, child)
        }
        ExprTree::Sum(children) => {
            let mut flat = Vec::new();
            let mut const_acc = 0.0;
            for c in children {
                match canonicalize(c) {
                    ExprTree::Sum(inner) => {
                        for g in inner {
                            match g {
                                ExprTree::Const(k) => const_acc += k,
                                other => flat.push(other),
                            }
                        }
                    }
                    ExprTree::Const(k) => const_acc += k,
                    other => flat.push(other),
                }
            }
            if const_acc != 0.0 || flat.is_empty() {
                flat.push(ExprTree::Const(const_acc));
            }
            match flat.len() {
                1 => flat.pop().unwrap(),
                _ => ExprTree::Sum(flat),
            }
        }
        ExprTree::Product(children) => {
            let mut flat = Vec::new();
            let mut const_acc = 1.0;
            for c in children {
                match canonicalize(c) {
                    ExprTree::Product(inner) => {
                        for g in inner {
                            match g {
                                ExprTree::Const(k) => const_acc *= k,
                                other => flat.push(other),
                            }
                        }
                    }
                    ExprTree::Const(k) => const_acc *= k,
                    other => flat.push(other),
                }
            }
            if const_acc == 0.0 {
                return ExprTree::Const(0.0);
            }
            if const_acc != 1.0 || flat.is_empty() {
                flat.insert(0, ExprTree::Const(const_acc));
            }
            match flat.len() {
                1 => flat.pop().unwrap(),
                _ => ExprTree::Product(flat),
            }
        }
        ExprTree::Power { base, exponent } => {
            let base = canonicalize(*base);
            if exponent == 0.0 {
                return ExprTree::Const(1.0);
            }
            if exponent == 1.0 {
                return base;
            }
            if let ExprTree::Const(c) = base {
                if let Ok(v) = pow_checked(c, exponent) {
                    if v.is_finite() {
                        return ExprTree::Const(v);
                    }
                }
            }
            ExprTree::Power { base: Box::new(base), exponent }
        }
    }
}

// ===== tokenizer =====

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
    at: usize,
    end_pos: usize,
}

fn tokenize(src: &str) -> Result<Lexer, ExprError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                toks.push((Tok::Plus, start));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, start));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, start));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, start));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, start));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, start));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, start));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, start));
                i += 1;
            }
            '0'..='9' | '.' => {
                let mut j = i;
                let mut seen_e = false;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_digit() || d == '.' {
                        j += 1;
                    } else if (d == 'e' || d == 'E') && !seen_e && j + 1 < bytes.len() {
                        let next = bytes[j + 1] as char;
                        if next.is_ascii_digit() || next == '+' || next == '-' {
                            seen_e = true;
                            j += if next.is_ascii_digit() { 1 } else { 2 };
                        } else {
                            break;
                        }
                    } else {
                        break;
                    }
                }
                let text = &src[i..j];
                let v: f64 = text.parse().map_err(|_| ExprError::Parse {
                    pos: start,
                    msg: format!("invalid numeric literal `{text}`"),
                })?;
                if !v.is_finite() {
                    return Err(ExprError::Parse {
                        pos: start,
                        msg: format!("numeric literal `{text}` out of range"),
                    });
                }
                toks.push((Tok::Num(v), start));
                i = j;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                toks.push((Tok::Ident(src[i..j].to_string()), start));
                i = j;
            }
            _ => {
                return Err(ExprError::Parse { pos: start, msg: format!("unexpected character `{c}`") });
            }
        }
    }
    Ok(Lexer { toks, at: 0, end_pos: src.len() })
}

impl Lexer {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|(_, p)| *p).unwrap_or(self.end_pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(t, _)| t.clone());
        self.at += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ExprError> {
        let pos = self.pos();
        match self.next() {
            Some(t) if t == want => Ok(()),
            _ => Err(ExprError::Parse { pos, msg: format!("expected {what}") }),
        }
    }
}

// ===== parser =====

struct Parser<'a> {
    lex: Lexer,
    names: &'a [String],
}

// Binding powers. `^` outranks unary minus, which outranks `*`.
const BP_SUM: (u8, u8) = (1, 2);
const BP_PROD: (u8, u8) = (3, 4);
const BP_NEG: u8 = 5;
const BP_POW: (u8, u8) = (8, 7);

impl<'a> Parser<'a> {
    fn parse_expr(&mut self, min_bp: u8) -> Result<ExprTree, ExprError> {
        let mut lhs = self.parse_prefix()?;
        loop {
            let (l_bp, r_bp, tok) = match self.lex.peek() {
                Some(Tok::Plus) => (BP_SUM.0, BP_SUM.1, Tok::Plus),
                Some(Tok::Minus) => (BP_SUM.0, BP_SUM.1, Tok::Minus),
                Some(Tok::Star) => (BP_PROD.0, BP_PROD.1, Tok::Star),
                Some(Tok::Slash) => (BP_PROD.0, BP_PROD.1, Tok::Slash),
                Some(Tok::Caret) => (BP_POW.0, BP_POW.1, Tok::Caret),
                _ => break,
            };
            if l_bp < min_bp {
                break;
            }
            let op_pos = self.lex.pos();
            self.lex.next();
            let rhs = self.parse_expr(r_bp)?;
            lhs = match tok {
                Tok::Plus => ExprTree::Sum(vec![lhs, rhs]),
                Tok::Minus => {
                    ExprTree::Sum(vec![lhs, ExprTree::Product(vec![ExprTree::Const(-1.0), rhs])])
                }
                Tok::Star => ExprTree::Product(vec![lhs, rhs]),
                Tok::Slash => {
                    ExprTree::Product(vec![lhs, ExprTree::power(rhs, -1.0)])
                }
                Tok::Caret => {
                    let exp = canonicalize(rhs);
                    match exp {
                        ExprTree::Const(p) => ExprTree::power(lhs, p),
                        _ => {
                            return Err(ExprError::Parse {
                                pos: op_pos,
                                msg: "exponent must be a constant expression".into(),
                            })
                        }
                    }
                }
                _ => unreachable!(),
            };
        }
        Ok(lhs)
    }

    fn parse_prefix(&mut self) -> Result<ExprTree, ExprError> {
        let pos = self.lex.pos();
        match self.lex.next() {
            Some(Tok::Num(v)) => Ok(ExprTree::Const(v)),
            Some(Tok::Minus) => {
                let operand = self.parse_expr(BP_NEG)?;
                Ok(ExprTree::Product(vec![ExprTree::Const(-1.0), operand]))
            }
            Some(Tok::Plus) => self.parse_expr(BP_NEG),
            Some(Tok::LParen) => {
                let inner = self.parse_expr(0)?;
                self.lex.expect(Tok::RParen, "closing parenthesis")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if self.lex.peek() == Some(&Tok::LParen) {
                    self.lex.next();
                    if self.lex.peek() == Some(&Tok::RParen) {
                        return Err(ExprError::Parse {
                            pos: self.lex.pos(),
                            msg: format!("empty argument to `{name}`"),
                        });
                    }
                    let arg = self.parse_expr(0)?;
                    if self.lex.peek() == Some(&Tok::Comma) {
                        return Err(ExprError::Parse {
                            pos: self.lex.pos(),
                            msg: format!("`{name}` takes a single argument"),
                        });
                    }
                    self.lex.expect(Tok::RParen, "closing parenthesis")?;
                    let prim = PrimitiveLibrary::lookup_token(&name).ok_or_else(|| {
                        ExprError::UnknownIdentifier { name: name.clone(), pos }
                    })?;
                    Ok(ExprTree::unary(prim, arg))
                } else if name == "pi" {
                    Ok(ExprTree::Const(std::f64::consts::PI))
                } else {
                    let idx = self
                        .names
                        .iter()
                        .position(|n| *n == name)
                        .ok_or(ExprError::UnknownIdentifier { name, pos })?;
                    Ok(ExprTree::Var(idx))
                }
            }
            other => Err(ExprError::Parse {
                pos,
                msg: match other {
                    Some(_) => "unexpected token".into(),
                    None => "unexpected end of input".into(),
                },
            }),
        }
    }
}

/// Parse a formula over the given variable names into a canonical tree.
pub fn parse_formula(src: &str, names: &[String]) -> Result<ExprTree, ExprError> {
    let lex = tokenize(src)?;
    let mut parser = Parser { lex, names };
    let tree = parser.parse_expr(0)?;
    if parser.lex.peek().is_some() {
        return Err(ExprError::Parse {
            pos: parser.lex.pos(),
            msg: "trailing input after expression".into(),
        });
    }
    Ok(canonicalize(tree))
}

/// Convenience for building the `["x1", ...]` style name lists.
pub fn names_from(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
