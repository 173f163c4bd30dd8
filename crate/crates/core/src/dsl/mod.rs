//! Scalar expression language for flow maps, jump maps and storage functions.
//!
//! Expressions are written over indexed variables:
//!
//! | name   | meaning                         |
//! |--------|---------------------------------|
//! | `x<k>` | state component `k` (1-based)   |
//! | `w<k>` | internal input component        |
//! | `u<k>` | external input component        |
//! | `xh<k>`, `wh<k>`, `uh<k>` | second-argument copies used by storage functions `V(x, xh)` |
//!
//! Grammar (EBNF):
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = power { ("*" | "/") power } ;
//! power   = unary [ "^" power ] ;             (* right associative *)
//! unary   = "-" unary | primary ;             (* binds tighter than any binary operator *)
//! primary = number | variable | func "(" expr { "," expr } ")" | "(" expr ")" ;
//! func    = "sin" | "cos" | "exp" | "ln" | "tanh" | "sqrt" | "abs" | "min" | "max" ;
//! number  = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] | "." digits [ exponent ] ;
//! ```
//!
//! Note that `-x1^2` parses as `(-x1)^2`.

mod eval;
mod parser;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use eval::{Bindings, EvalError};
pub use parser::ParseError;

/// Which family a variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    X,
    W,
    U,
    Xh,
    Wh,
    Uh,
}

impl VarKind {
    fn prefix(self) -> &'static str {
        match self {
            VarKind::X => "x",
            VarKind::W => "w",
            VarKind::U => "u",
            VarKind::Xh => "xh",
            VarKind::Wh => "wh",
            VarKind::Uh => "uh",
        }
    }

    pub fn is_hatted(self) -> bool {
        matches!(self, VarKind::Xh | VarKind::Wh | VarKind::Uh)
    }
}

/// A variable reference. `index` is 1-based as written in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    /// Parses a name such as `x3` or `wh1`.
    pub fn from_name(name: &str) -> Option<Var> {
        let split = name.find(|c: char| c.is_ascii_digit())?;
        let (prefix, digits) = name.split_at(split);
        let kind = match prefix {
            "x" => VarKind::X,
            "w" => VarKind::W,
            "u" => VarKind::U,
            "xh" => VarKind::Xh,
            "wh" => VarKind::Wh,
            "uh" => VarKind::Uh,
            _ => return None,
        };
        if !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return None;
        }
        let index = digits.parse::<usize>().ok()?;
        Some(Var { kind, index })
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
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

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Tanh,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

/// Expression tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Node::Const(_) => {}
            Node::Var(v) => {
                out.insert(*v);
            }
            Node::Neg(inner) => inner.collect_vars(out),
            Node::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Node::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }
}

impl fmt::Display for Node {
    /// Prints a fully parenthesized form that re-parses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Neg(inner) => write!(f, "(-{inner})"),
            Node::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// A parsed expression together with the set of variables it mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsExpr {
    root: Node,
    referenced_vars: BTreeSet<Var>,
    source: String,
}

impl DynamicsExpr {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let root = parser::parse(text)?;
        Ok(Self::from_node(root, text.to_string()))
    }

    pub fn from_node(root: Node, source: String) -> Self {
        let mut referenced_vars = BTreeSet::new();
        root.collect_vars(&mut referenced_vars);
        DynamicsExpr {
            root,
            referenced_vars,
            source,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn referenced_vars(&self) -> &BTreeSet<Var> {
        &self.referenced_vars
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, env: &Bindings<'_>) -> Result<f64, EvalError> {
        eval::eval_node(&self.root, env)
    }

    /// Evaluates against a name-keyed environment such as `{"x1": 1.0}`.
    pub fn eval_map(
        &self,
        env: &std::collections::HashMap<String, f64>,
    ) -> Result<f64, EvalError> {
        eval::eval_node_map(&self.root, env)
    }

    /// Checks every variable is of an allowed kind and within its dimension.
    pub fn check_vars(&self, limit: impl Fn(VarKind) -> Option<usize>) -> Result<(), DslError> {
        for v in &self.referenced_vars {
            match limit(v.kind) {
                None => return Err(DslError::ForbiddenVariable { var: v.to_string() }),
                Some(max) if v.index > max => {
                    return Err(DslError::IndexOutOfRange {
                        var: v.to_string(),
                        max,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for DynamicsExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

/// Parses an expression from text.
pub fn parse_expr(text: &str) -> Result<DynamicsExpr, ParseError> {
    DynamicsExpr::parse(text)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("variable `{var}` is not allowed here")]
    ForbiddenVariable { var: String },
    #[error("variable `{var}` exceeds the declared dimension {max}")]
    IndexOutOfRange { var: String, max: usize },
    #[error("vector field has {got} components, expected {expected}")]
    ComponentCount { expected: usize, got: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// `(n, q, m)`: state, internal-input and external-input dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub n: usize,
    pub q: usize,
    pub m: usize,
}

/// One expression per state component, over `x`, `w` and `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<DynamicsExpr>,
    arity: Arity,
}

impl VectorField {
    pub fn new(components: Vec<DynamicsExpr>, arity: Arity) -> Result<Self, DslError> {
        if components.len() != arity.n {
            return Err(DslError::ComponentCount {
                expected: arity.n,
                got: components.len(),
            });
        }
        for c in &components {
            c.check_vars(|k| match k {
                VarKind::X => Some(arity.n),
                VarKind::W => Some(arity.q),
                VarKind::U => Some(arity.m),
                _ => None,
            })?;
        }
        Ok(VectorField { components, arity })
    }

    pub fn parse<S: AsRef<str>>(texts: &[S], arity: Arity) -> Result<Self, DslError> {
        let components = texts
            .iter()
            .map(|t| DynamicsExpr::parse(t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(components, arity)
    }

    pub fn components(&self) -> &[DynamicsExpr] {
        &self.components
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    /// Writes `field(x, w, u)` into `out` without allocating.
    pub fn eval_into(&self, x: &[f64], w: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DslError> {
        self.check_dims(x, w, u)?;
        if out.len() != self.arity.n {
            return Err(DslError::DimensionMismatch {
                what: "output",
                expected: self.arity.n,
                got: out.len(),
            });
        }
        let env = Bindings::new(x, w, u);
        for (slot, c) in out.iter_mut().zip(&self.components) {
            *slot = c.eval(&env)?;
        }
        Ok(())
    }

    fn check_dims(&self, x: &[f64], w: &[f64], u: &[f64]) -> Result<(), DslError> {
        let a = self.arity;
        for (what, expected, got) in [("x", a.n, x.len()), ("w", a.q, w.len()), ("u", a.m, u.len())] {
            if expected != got {
                return Err(DslError::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Componentwise evaluation of a vector field.
pub fn eval_vector(field: &VectorField, x: &[f64], w: &[f64], u: &[f64]) -> Result<Vec<f64>, DslError> {
    let mut out = vec![0.0; field.arity.n];
    field.eval_into(x, w, u, &mut out)?;
    Ok(out)
}

/// Evaluates an expression against a name-keyed environment.
pub fn eval_expr(
    expr: &DynamicsExpr,
    env: &std::collections::HashMap<String, f64>,
) -> Result<f64, EvalError> {
    expr.eval_map(env)
}
