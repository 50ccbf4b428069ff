//! Closed-form expressions in a small prefix grammar.
//!
//! Custom drift kernels are supplied as expression trees over the slow state
//! `x` and fast state `y`, written in whitespace-separated prefix (Polish)
//! notation. One expression per output component.
//!
//! Grammar:
//!
//! ```text
//! expr := add expr expr | sub expr expr | mul expr expr | div expr expr
//!       | neg expr | exp expr | log expr | sin expr | cos expr
//!       | square expr | tanh expr | softplus expr | relu expr
//!       | pow expr INT
//!       | x<i> | y<i> | FLOAT
//! ```
//!
//! Example: `mul x0 square y0` is `x_0 * y_0^2`.
//!
//! Expressions compile to a flat program evaluated by index; gradients with
//! respect to `y` come from a reverse sweep over the same program.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tape::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Instr {
    Const(f64),
    X(usize),
    Y(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    Pow(usize, i32),
}

/// A compiled expression. Children always precede parents, so evaluation is
/// a single forward sweep and differentiation a single reverse sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    instrs: Vec<Instr>,
    source: String,
}

impl Program {
    /// Parse a prefix expression.
    pub fn parse(source: &str) -> Result<Self, Error> {
        let tokens: Vec<&str> = source.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::config("empty expression"));
        }
        let mut instrs = Vec::new();
        let mut pos = 0;
        let root = parse_expr(&tokens, &mut pos, &mut instrs)?;
        if pos != tokens.len() {
            return Err(Error::config(format!(
                "trailing tokens in expression starting at `{}`",
                tokens[pos]
            )));
        }
        debug_assert_eq!(root, instrs.len() - 1);
        Ok(Program { instrs, source: source.trim().to_string() })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Highest `x` index referenced plus one.
    pub fn x_arity(&self) -> usize {
        self.instrs
            .iter()
            .filter_map(|i| if let Instr::X(k) = i { Some(k + 1) } else { None })
            .max()
            .unwrap_or(0)
    }

    /// Highest `y` index referenced plus one.
    pub fn y_arity(&self) -> usize {
        self.instrs
            .iter()
            .filter_map(|i| if let Instr::Y(k) = i { Some(k + 1) } else { None })
            .max()
            .unwrap_or(0)
    }

    fn forward<F: Scalar>(&self, x: &[F], y: &[F], vals: &mut Vec<F>) -> F {
        vals.clear();
        for instr in &self.instrs {
            let v = match *instr {
                Instr::Const(c) => F::c(c),
                Instr::X(i) => x[i],
                Instr::Y(i) => y[i],
                Instr::Add(a, b) => vals[a] + vals[b],
                Instr::Sub(a, b) => vals[a] - vals[b],
                Instr::Mul(a, b) => vals[a] * vals[b],
                Instr::Div(a, b) => vals[a] / vals[b],
                Instr::Neg(a) => -vals[a],
                Instr::Exp(a) => vals[a].exp(),
                Instr::Log(a) => vals[a].ln(),
                Instr::Sin(a) => vals[a].sin(),
                Instr::Cos(a) => vals[a].cos(),
                Instr::Square(a) => vals[a] * vals[a],
                Instr::Tanh(a) => Activation::Tanh.apply(vals[a]),
                Instr::Softplus(a) => Activation::Softplus.apply(vals[a]),
                Instr::Relu(a) => Activation::Relu.apply(vals[a]),
                Instr::Pow(a, k) => vals[a].powi(k),
            };
            vals.push(v);
        }
        *vals.last().unwrap()
    }

    /// Evaluate at `(x, y)` using caller scratch.
    pub fn eval<F: Scalar>(&self, x: &[F], y: &[F], vals: &mut Vec<F>) -> F {
        self.forward(x, y, vals)
    }

    /// Evaluate and accumulate `seed * d value / d y` into `grad_y`.
    pub fn eval_grad_y<F: Scalar>(
        &self,
        x: &[F],
        y: &[F],
        seed: F,
        grad_y: &mut [F],
        vals: &mut Vec<F>,
        adj: &mut Vec<F>,
    ) -> F {
        let out = self.forward(x, y, vals);
        adj.clear();
        adj.resize(self.instrs.len(), F::zero());
        *adj.last_mut().unwrap() = seed;
        for (i, instr) in self.instrs.iter().enumerate().rev() {
            let g = adj[i];
            if g == F::zero() {
                continue;
            }
            match *instr {
                Instr::Const(_) | Instr::X(_) => {}
                Instr::Y(k) => grad_y[k] += g,
                Instr::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Instr::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Instr::Mul(a, b) => {
                    adj[a] += g * vals[b];
                    adj[b] += g * vals[a];
                }
                Instr::Div(a, b) => {
                    adj[a] += g / vals[b];
                    adj[b] -= g * vals[a] / (vals[b] * vals[b]);
                }
                Instr::Neg(a) => adj[a] -= g,
                Instr::Exp(a) => adj[a] += g * vals[i],
                Instr::Log(a) => adj[a] += g / vals[a],
                Instr::Sin(a) => adj[a] += g * vals[a].cos(),
                Instr::Cos(a) => adj[a] -= g * vals[a].sin(),
                Instr::Square(a) => adj[a] += F::c(2.0) * vals[a] * g,
                Instr::Tanh(a) => adj[a] += (F::one() - vals[i] * vals[i]) * g,
                Instr::Softplus(a) => adj[a] += g / (F::one() + (-vals[a]).exp()),
                Instr::Relu(a) => {
                    if vals[a] > F::zero() {
                        adj[a] += g;
                    }
                }
                Instr::Pow(a, k) => {
                    adj[a] += F::from_i32(k).unwrap() * vals[a].powi(k - 1) * g;
                }
            }
        }
        out
    }
}

fn parse_expr(tokens: &[&str], pos: &mut usize, instrs: &mut Vec<Instr>) -> Result<usize, Error> {
    let tok = *tokens
        .get(*pos)
        .ok_or_else(|| Error::config("expression ended mid-term"))?;
    *pos += 1;
    let instr = match tok {
        "add" | "sub" | "mul" | "div" => {
            let a = parse_expr(tokens, pos, instrs)?;
            let b = parse_expr(tokens, pos, instrs)?;
            match tok {
                "add" => Instr::Add(a, b),
                "sub" => Instr::Sub(a, b),
                "mul" => Instr::Mul(a, b),
                _ => Instr::Div(a, b),
            }
        }
        "neg" | "exp" | "log" | "sin" | "cos" | "square" | "tanh" | "softplus" | "relu" => {
            let a = parse_expr(tokens, pos, instrs)?;
            match tok {
                "neg" => Instr::Neg(a),
                "exp" => Instr::Exp(a),
                "log" => Instr::Log(a),
                "sin" => Instr::Sin(a),
                "cos" => Instr::Cos(a),
                "square" => Instr::Square(a),
                "tanh" => Instr::Tanh(a),
                "softplus" => Instr::Softplus(a),
                _ => Instr::Relu(a),
            }
        }
        "pow" => {
            let a = parse_expr(tokens, pos, instrs)?;
            let k_tok = *tokens
                .get(*pos)
                .ok_or_else(|| Error::config("`pow` needs an integer exponent"))?;
            *pos += 1;
            let k: i32 = k_tok
                .parse()
                .map_err(|_| Error::config(format!("bad integer exponent `{k_tok}`")))?;
            Instr::Pow(a, k)
        }
        leaf => {
            if let Some(rest) = leaf.strip_prefix('x') {
                if let Ok(i) = rest.parse::<usize>() {
                    instrs.push(Instr::X(i));
                    return Ok(instrs.len() - 1);
                }
            }
            if let Some(rest) = leaf.strip_prefix('y') {
                if let Ok(i) = rest.parse::<usize>() {
                    instrs.push(Instr::Y(i));
                    return Ok(instrs.len() - 1);
                }
            }
            let c: f64 = leaf
                .parse()
                .map_err(|_| Error::config(format!("unknown token `{leaf}` in expression")))?;
            Instr::Const(c)
        }
    };
    instrs.push(instr);
    Ok(instrs.len() - 1)
}
