use std::collections::HashMap;

use thiserror::Error;

use super::{BinOp, Func, Node, Var, VarKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("variable `{var}` is not bound")]
    Unbound { var: String },
    #[error("domain error: {func} of {arg} in `{expr}`")]
    Domain {
        func: &'static str,
        arg: f64,
        expr: String,
    },
}

/// Positional variable bindings. Slices are indexed by `k - 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub x: &'a [f64],
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub xh: &'a [f64],
    pub wh: &'a [f64],
    pub uh: &'a [f64],
}

impl<'a> Bindings<'a> {
    pub fn new(x: &'a [f64], w: &'a [f64], u: &'a [f64]) -> Self {
        Bindings {
            x,
            w,
            u,
            ..Default::default()
        }
    }

    /// Bindings for a storage function `V(x, xh)`.
    pub fn pair(x: &'a [f64], xh: &'a [f64]) -> Self {
        Bindings {
            x,
            xh,
            ..Default::default()
        }
    }

    fn lookup(&self, v: Var) -> Result<f64, EvalError> {
        let slice = match v.kind {
            VarKind::X => self.x,
            VarKind::W => self.w,
            VarKind::U => self.u,
            VarKind::Xh => self.xh,
            VarKind::Wh => self.wh,
            VarKind::Uh => self.uh,
        };
        slice
            .get(v.index - 1)
            .copied()
            .ok_or_else(|| EvalError::Unbound { var: v.to_string() })
    }
}

fn apply(node: &Node, func: Func, args: &[f64]) -> Result<f64, EvalError> {
    let a = args[0];
    let domain = |name| EvalError::Domain {
        func: name,
        arg: a,
        expr: node.to_string(),
    };
    Ok(match func {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Exp => a.exp(),
        Func::Tanh => a.tanh(),
        Func::Abs => a.abs(),
        Func::Ln => {
            if a <= 0.0 {
                return Err(domain("ln"));
            }
            a.ln()
        }
        Func::Sqrt => {
            if a < 0.0 {
                return Err(domain("sqrt"));
            }
            a.sqrt()
        }
        Func::Min => a.min(args[1]),
        Func::Max => a.max(args[1]),
    })
}

fn binary(op: BinOp, l: f64, r: f64) -> f64 {
    match op {
        BinOp::Add => l + r,
        BinOp::Sub => l - r,
        BinOp::Mul => l * r,
        BinOp::Div => l / r,
        BinOp::Pow => pow(l, r),
    }
}

// Integer exponents go through powi so that e.g. (-2)^2 is exact and finite.
fn pow(base: f64, exp: f64) -> f64 {
    if exp.fract() == 0.0 && exp.abs() <= i32::MAX as f64 {
        base.powi(exp as i32)
    } else {
        base.powf(exp)
    }
}

fn eval_with<F>(node: &Node, lookup: &F) -> Result<f64, EvalError>
where
    F: Fn(Var) -> Result<f64, EvalError>,
{
    match node {
        Node::Const(c) => Ok(*c),
        Node::Var(v) => lookup(*v),
        Node::Neg(inner) => Ok(-eval_with(inner, lookup)?),
        Node::Binary(op, l, r) => {
            let l = eval_with(l, lookup)?;
            let r = eval_with(r, lookup)?;
            Ok(binary(*op, l, r))
        }
        Node::Call(func, args) => {
            let mut vals = [0.0; 2];
            for (slot, a) in vals.iter_mut().zip(args) {
                *slot = eval_with(a, lookup)?;
            }
            apply(node, *func, &vals[..args.len()])
        }
    }
}

pub(super) fn eval_node(node: &Node, env: &Bindings<'_>) -> Result<f64, EvalError> {
    eval_with(node, &|v| env.lookup(v))
}

pub(super) fn eval_node_map(node: &Node, env: &HashMap<String, f64>) -> Result<f64, EvalError> {
    eval_with(node, &|v: Var| {
        let name = v.to_string();
        env.get(&name).copied().ok_or(EvalError::Unbound { var: name })
    })
}
