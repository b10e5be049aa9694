//! Lagrangian expressions: parsing, printing, symbolic rewriting and
//! truncated Taylor jets.
//!
//! Variables live in a [`Scope`]. For Lagrangians in dimension `d` the scope
//! is `tau, v1..vd, q1..qd` (index 0 is `tau`, then velocities, then
//! positions); `v` and `q` are accepted as aliases when `d = 1`.

mod jet;
mod parse;
mod symbolic;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use jet::{Jet, JetLayout};
pub use parse::parse_in_scope;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("identifier `{name}` exceeds dimension {dimension}")]
    DimensionMismatch { name: String, dimension: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in expression evaluation")]
    NonFinite,
    #[error("singular velocity Hessian (|det a| = {0:e})")]
    SingularHessian(f64),
    #[error("empty expression")]
    Empty,
}

/// Named variables an expression may refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Scope {
    names: Vec<String>,
    aliases: Vec<(String, usize)>,
    /// Lagrangian dimension, if this is a `(tau, v, q)` scope.
    lagrangian_dim: Option<usize>,
}

impl Scope {
    /// `tau, v1..vd, q1..qd`.
    pub fn lagrangian(d: usize) -> Scope {
        let mut names = vec!["tau".to_string()];
        names.extend((1..=d).map(|i| format!("v{i}")));
        names.extend((1..=d).map(|i| format!("q{i}")));
        let aliases = if d == 1 {
            vec![("v".to_string(), 1), ("q".to_string(), 2)]
        } else {
            Vec::new()
        };
        Scope { names, aliases, lagrangian_dim: Some(d) }
    }

    /// `x1..xn`, with `x` as alias when `n = 1`.
    pub fn coordinates(prefix: &str, n: usize) -> Scope {
        let names = (1..=n).map(|i| format!("{prefix}{i}")).collect();
        let aliases = if n == 1 { vec![(prefix.to_string(), 0)] } else { Vec::new() };
        Scope { names, aliases, lagrangian_dim: None }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn lagrangian_dim(&self) -> Option<usize> {
        self.lagrangian_dim
    }

    pub(crate) fn lookup(&self, ident: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == ident)
            .or_else(|| self.aliases.iter().find(|(a, _)| a == ident).map(|&(_, i)| i))
    }

    /// True if `ident` looks like an indexed variable of this scope whose
    /// index is out of range (e.g. `v3` when d = 2).
    pub(crate) fn is_out_of_range(&self, ident: &str) -> bool {
        let prefixes: Vec<String> = self
            .names
            .iter()
            .filter_map(|n| {
                let p = n.trim_end_matches(|c: char| c.is_ascii_digit());
                (p.len() < n.len()).then(|| p.to_string())
            })
            .collect();
        prefixes.iter().any(|p| {
            ident
                .strip_prefix(p.as_str())
                .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Tanh => x.tanh(),
        }
    }
}

/// Expression tree node. Literals produced by the parser are non-negative;
/// negation is always an explicit `Neg` node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(usize),
    Param(String, f64),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    pub fn num(x: f64) -> Node {
        if x < 0.0 {
            Node::Neg(Box::new(Node::Num(-x)))
        } else {
            Node::Num(x)
        }
    }

    pub fn bin(op: BinOp, a: Node, b: Node) -> Node {
        Node::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn call(f: Func, a: Node) -> Node {
        Node::Call(f, Box::new(a))
    }

    /// True if the subtree references no variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Node::Num(_) | Node::Param(..) => true,
            Node::Var(_) => false,
            Node::Neg(a) | Node::Call(_, a) => a.is_constant(),
            Node::Bin(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Node::Num(_) | Node::Param(..) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Call(_, a) => a.max_var(),
            Node::Bin(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// Pointwise evaluation.
    pub fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        let r = match self {
            Node::Num(x) | Node::Param(_, x) => *x,
            Node::Var(i) => point[*i],
            Node::Neg(a) => -a.eval(point)?,
            Node::Call(f, a) => {
                let x = a.eval(point)?;
                match f {
                    Func::Log if x <= 0.0 => {
                        return Err(ExprError::Domain(format!("log of non-positive value {x}")))
                    }
                    Func::Sqrt if x < 0.0 => {
                        return Err(ExprError::Domain(format!("sqrt of negative value {x}")))
                    }
                    _ => f.apply(x),
                }
            }
            Node::Bin(op, a, b) => {
                let x = a.eval(point)?;
                let y = b.eval(point)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => pow_checked(x, y, b.is_constant())?,
                }
            }
        };
        if r.is_finite() {
            Ok(r)
        } else {
            Err(ExprError::NonFinite)
        }
    }
}

pub(crate) fn pow_checked(x: f64, y: f64, exponent_constant: bool) -> Result<f64, ExprError> {
    if exponent_constant && y.fract() == 0.0 && y.abs() < 1e9 {
        return Ok(x.powi(y as i32));
    }
    if x > 0.0 {
        Ok(x.powf(y))
    } else {
        Err(ExprError::Domain(format!("power {x}^{y} needs a positive base")))
    }
}

/// A parsed expression together with the scope its variables refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub root: Node,
    pub scope: Arc<Scope>,
}

/// Parse a Lagrangian `L(tau, v, q)` in dimension `d`.
pub fn parse(
    source: &str,
    dimension: usize,
    parameters: &BTreeMap<String, f64>,
) -> Result<Expression, ExprError> {
    parse_in_scope(source, Arc::new(Scope::lagrangian(dimension)), parameters)
}

impl Expression {
    pub fn new(root: Node, scope: Arc<Scope>) -> Expression {
        Expression { root, scope }
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        self.root.eval(point)
    }

    /// Jet over every scope variable.
    pub fn jet(&self, point: &[f64], order: usize) -> Result<Jet, ExprError> {
        let vars: Vec<usize> = (0..self.scope.len()).collect();
        self.jet_in(point, &vars, order)
    }

    /// Jet in the listed scope variables only; the others are held fixed.
    pub fn jet_in(&self, point: &[f64], vars: &[usize], order: usize) -> Result<Jet, ExprError> {
        jet::eval_node(&self.root, point, vars, order)
    }

    /// Derivative with respect to scope variable `var` (no simplification
    /// beyond dropping structural zeros).
    pub fn diff(&self, var: usize) -> Expression {
        Expression::new(symbolic::diff(&self.root, var), self.scope.clone())
    }

    /// Replace every variable `i` by `subs[i]` (expressed in `scope`).
    pub fn substitute(&self, subs: &[Node], scope: Arc<Scope>) -> Expression {
        Expression::new(symbolic::substitute(&self.root, subs), scope)
    }
}

/// Jet of a Lagrangian at `point = (tau, v, q)`.
pub fn jet_eval(expr: &Expression, point: &[f64], order: usize) -> Result<Jet, ExprError> {
    if point.iter().any(|x| !x.is_finite()) {
        return Err(ExprError::NonFinite);
    }
    expr.jet(point, order)
}

/// Velocity Hessian `a_ij = ∂²L/∂vⁱ∂vʲ` at the expansion point.
#[derive(Debug, Clone)]
pub struct VelocityHessian {
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    pub positive_definite: bool,
}

/// Extract `a` and `a⁻¹` from a Lagrangian jet (all velocity variables must be
/// active and the jet order at least 2).
pub fn velocity_hessian(jet: &Jet, d: usize) -> Result<VelocityHessian, ExprError> {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = jet.partial(&[1 + i, 1 + j]);
        }
    }
    let det = a.determinant();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    if det.abs() <= 1e-12 * scale.powi(d as i32) || det.abs() < 1e-300 {
        return Err(ExprError::SingularHessian(det));
    }
    let a_inv = a.clone().try_inverse().ok_or(ExprError::SingularHessian(det))?;
    let positive_definite = a.clone().cholesky().is_some();
    Ok(VelocityHessian { a, a_inv, positive_definite })
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, &self.scope, f)
    }
}

fn write_node(n: &Node, scope: &Scope, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Num(x) if *x < 0.0 => write!(f, "(-{})", -x),
        Node::Num(x) => write!(f, "{x}"),
        Node::Var(i) => write!(f, "{}", scope.name(*i)),
        Node::Param(name, _) => write!(f, "{name}"),
        Node::Neg(a) => {
            if matches!(**a, Node::Neg(_)) || matches!(**a, Node::Num(x) if x < 0.0) {
                write!(f, "-(")?;
                write_node(a, scope, f)?;
                write!(f, ")")
            } else {
                write!(f, "-")?;
                write_node(a, scope, f)
            }
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(a, scope, f)?;
            write!(f, ")")
        }
        Node::Bin(op, a, b) => {
            let s = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            write!(f, "(")?;
            write_node(a, scope, f)?;
            write!(f, " {s} ")?;
            write_node(b, scope, f)?;
            write!(f, ")")
        }
    }
}
