//! S-expression programs over named inputs.
//!
//! ```text
//! (scale 0.5 (dot x x))      ½‖x‖²
//! (lse x)                    log Σ exp(xᵢ)
//! (lse 2.0 x)                ½ log Σ exp(2xᵢ)
//! (sum (abspow 1.5 x))       Σ |xᵢ|^1.5
//! (dot y (matvec W x))       yᵀ W x
//! ```
//!
//! A program can be recorded onto a [`Tape`] or evaluated directly. The
//! direct evaluator does not touch the tape and serves as the independent
//! route for finite-difference checks.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use super::tape::{log_cosh, Tape, Var};
use super::DiffError;

pub type Inputs = BTreeMap<String, Array2<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Prim {
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Dot,
    MatVec,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    LogCosh,
    AbsPow,
    SignPow,
    Lse,
    Softmax,
    Sum,
    Max,
}

impl Prim {
    fn lookup(name: &str) -> Option<Prim> {
        Some(match name {
            "add" => Prim::Add,
            "sub" => Prim::Sub,
            "mul" => Prim::Mul,
            "neg" => Prim::Neg,
            "scale" => Prim::Scale,
            "dot" => Prim::Dot,
            "matvec" => Prim::MatVec,
            "exp" => Prim::Exp,
            "log" => Prim::Log,
            "sin" => Prim::Sin,
            "cos" => Prim::Cos,
            "tanh" => Prim::Tanh,
            "logcosh" => Prim::LogCosh,
            "abspow" => Prim::AbsPow,
            "signpow" => Prim::SignPow,
            "lse" => Prim::Lse,
            "softmax" => Prim::Softmax,
            "sum" => Prim::Sum,
            "max" => Prim::Max,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Num(f64),
    Input(String),
    Call(Prim, Vec<Expr>),
}

/// A parsed computation description.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    source: String,
    root: Expr,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> DiffError {
        DiffError::Parse { pos: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn atom(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn expr(&mut self) -> Result<Expr, DiffError> {
        self.skip_ws();
        match self.src[self.pos..].chars().next() {
            None => Err(self.err("unexpected end of input")),
            Some(')') => Err(self.err("unexpected `)`")),
            Some('(') => {
                self.pos += 1;
                self.skip_ws();
                let head = self.atom();
                if head.is_empty() {
                    return Err(self.err("missing primitive name"));
                }
                let prim = Prim::lookup(head)
                    .ok_or_else(|| DiffError::UnsupportedPrimitive(head.to_string()))?;
                let mut args = Vec::new();
                loop {
                    self.skip_ws();
                    match self.src[self.pos..].chars().next() {
                        Some(')') => {
                            self.pos += 1;
                            break;
                        }
                        None => return Err(self.err("unclosed `(`")),
                        _ => args.push(self.expr()?),
                    }
                }
                check_arity(prim, &args).map_err(|m| self.err(format!("`{head}`: {m}")))?;
                Ok(Expr::Call(prim, args))
            }
            Some(_) => {
                let tok = self.atom();
                if let Ok(v) = tok.parse::<f64>() {
                    Ok(Expr::Num(v))
                } else if tok.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_') {
                    Ok(Expr::Input(tok.to_string()))
                } else {
                    Err(self.err(format!("bad token `{tok}`")))
                }
            }
        }
    }
}

fn check_arity(prim: Prim, args: &[Expr]) -> Result<(), String> {
    use Prim::*;
    let n = args.len();
    let lead_num = matches!(args.first(), Some(Expr::Num(_)));
    let ok = match prim {
        Add | Sub | Mul | Dot | MatVec => n == 2,
        Neg | Exp | Log | Sin | Cos | Tanh | LogCosh | Sum | Max => n == 1,
        Softmax | Lse => n == 1 || (n == 2 && lead_num),
        Scale | AbsPow | SignPow => n == 2 && lead_num,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("wrong arguments ({n} given)"))
    }
}

impl Program {
    pub fn parse(src: &str) -> Result<Program, DiffError> {
        let mut p = Parser { src, pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Program { source: src.to_string(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Input names referenced by the program, sorted.
    pub fn input_names(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Num(_) => {}
                Expr::Input(n) => out.push(n.clone()),
                Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out.sort();
        out.dedup();
        out
    }

    /// Evaluate without a tape.
    pub fn evaluate(&self, inputs: &Inputs) -> Result<Array2<f64>, DiffError> {
        eval(&self.root, inputs)
    }

    /// Evaluate and require a scalar result.
    pub fn evaluate_scalar(&self, inputs: &Inputs) -> Result<f64, DiffError> {
        let v = self.evaluate(inputs)?;
        if v.dim() != (1, 1) {
            return Err(DiffError::NotScalar(v.dim()));
        }
        Ok(v[[0, 0]])
    }
}

fn num(e: &Expr) -> f64 {
    match e {
        Expr::Num(v) => *v,
        _ => unreachable!("arity checked"),
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array2<f64>, DiffError> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let pick = |x: usize, y: usize| if x == y || y == 1 { Some(x) } else if x == 1 { Some(y) } else { None };
    let (Some(r), Some(c)) = (pick(ra, rb), pick(ca, cb)) else {
        return Err(DiffError::ShapeMismatch { op, left: a.dim(), right: b.dim() });
    };
    Ok(Array2::from_shape_fn((r, c), |(i, j)| {
        let x = a[[if ra == 1 { 0 } else { i }, if ca == 1 { 0 } else { j }]];
        let y = b[[if rb == 1 { 0 } else { i }, if cb == 1 { 0 } else { j }]];
        f(x, y)
    }))
}

fn eval(e: &Expr, inputs: &Inputs) -> Result<Array2<f64>, DiffError> {
    use Prim::*;
    match e {
        Expr::Num(v) => Ok(Array2::from_elem((1, 1), *v)),
        Expr::Input(n) => inputs.get(n).cloned().ok_or_else(|| DiffError::UnknownInput(n.clone())),
        Expr::Call(prim, args) => {
            let last = eval(args.last().expect("arity"), inputs)?;
            Ok(match prim {
                Add => zip_broadcast("add", &eval(&args[0], inputs)?, &last, |x, y| x + y)?,
                Sub => zip_broadcast("sub", &eval(&args[0], inputs)?, &last, |x, y| x - y)?,
                Mul => zip_broadcast("mul", &eval(&args[0], inputs)?, &last, |x, y| x * y)?,
                Dot => {
                    let a = eval(&args[0], inputs)?;
                    if a.dim() != last.dim() {
                        return Err(DiffError::ShapeMismatch { op: "dot", left: a.dim(), right: last.dim() });
                    }
                    let s: f64 = a.iter().zip(last.iter()).map(|(x, y)| x * y).sum();
                    Array2::from_elem((1, 1), s)
                }
                MatVec => {
                    let m = eval(&args[0], inputs)?;
                    if m.ncols() != last.ncols() {
                        return Err(DiffError::ShapeMismatch { op: "matvec", left: m.dim(), right: last.dim() });
                    }
                    Array2::from_shape_fn((last.nrows(), m.nrows()), |(b, i)| {
                        (0..m.ncols()).map(|j| m[[i, j]] * last[[b, j]]).sum()
                    })
                }
                Neg => last.mapv(|x| -x),
                Scale => last.mapv(|x| num(&args[0]) * x),
                Exp => last.mapv(f64::exp),
                Log => last.mapv(f64::ln),
                Sin => last.mapv(f64::sin),
                Cos => last.mapv(f64::cos),
                Tanh => last.mapv(f64::tanh),
                LogCosh => last.mapv(log_cosh),
                AbsPow => {
                    let p = num(&args[0]);
                    last.mapv(|x| x.abs().powf(p))
                }
                SignPow => {
                    let p = num(&args[0]);
                    last.mapv(|x| x.signum() * x.abs().powf(p))
                }
                Lse | Softmax => {
                    let beta = if args.len() == 2 { num(&args[0]) } else { 1.0 };
                    let mut out = if *prim == Lse {
                        Array2::zeros((last.nrows(), 1))
                    } else {
                        Array2::zeros(last.dim())
                    };
                    for (i, row) in last.axis_iter(Axis(0)).enumerate() {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, |a, v| a.max(beta * v));
                        let s: f64 = row.iter().map(|v| (beta * v - m).exp()).sum();
                        if *prim == Lse {
                            out[[i, 0]] = (m + s.ln()) / beta;
                        } else {
                            for (j, v) in row.iter().enumerate() {
                                out[[i, j]] = (beta * v - m).exp() / s;
                            }
                        }
                    }
                    out
                }
                Sum => Array2::from_elem((1, 1), last.iter().sum()),
                Max => Array2::from_elem((1, 1), last.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            })
        }
    }
}

/// A program recorded on a tape, with the leaf handle of every input.
#[derive(Clone, Debug)]
pub struct Recording {
    pub tape: Tape,
    pub output: Var,
    pub inputs: BTreeMap<String, Var>,
}

impl Recording {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.output)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub gradients: BTreeMap<String, Array2<f64>>,
}

/// Record `program` on a fresh tape.
pub fn record_scalar(program: &Program, inputs: &Inputs) -> Result<Recording, DiffError> {
    let mut tape = Tape::new();
    let mut leaves = BTreeMap::new();
    for (name, value) in inputs {
        leaves.insert(name.clone(), tape.input(name.clone(), value.clone()));
    }
    let output = record(&program.root, &mut tape, &leaves)?;
    if tape.shape(output) != (1, 1) {
        return Err(DiffError::NotScalar(tape.shape(output)));
    }
    Ok(Recording { tape, output, inputs: leaves })
}

fn record(e: &Expr, t: &mut Tape, leaves: &BTreeMap<String, Var>) -> Result<Var, DiffError> {
    use Prim::*;
    match e {
        Expr::Num(v) => Ok(t.constant(Array2::from_elem((1, 1), *v))),
        Expr::Input(n) => leaves.get(n).copied().ok_or_else(|| DiffError::UnknownInput(n.clone())),
        Expr::Call(prim, args) => {
            let last = record(args.last().expect("arity"), t, leaves)?;
            Ok(match prim {
                Add => {
                    let a = record(&args[0], t, leaves)?;
                    t.add(a, last)?
                }
                Sub => {
                    let a = record(&args[0], t, leaves)?;
                    t.sub(a, last)?
                }
                Mul => {
                    let a = record(&args[0], t, leaves)?;
                    t.mul(a, last)?
                }
                Dot => {
                    let a = record(&args[0], t, leaves)?;
                    t.dot(a, last)?
                }
                MatVec => {
                    let m = record(&args[0], t, leaves)?;
                    t.matvec(m, last)?
                }
                Neg => t.neg(last),
                Scale => t.scale(last, num(&args[0])),
                Exp => t.exp(last),
                Log => t.log(last),
                Sin => t.sin(last),
                Cos => t.cos(last),
                Tanh => t.tanh(last),
                LogCosh => t.log_cosh(last),
                AbsPow => t.abs_pow(last, num(&args[0])),
                SignPow => t.sign_pow(last, num(&args[0])),
                Lse => t.row_lse(last, if args.len() == 2 { num(&args[0]) } else { 1.0 }),
                Softmax => t.row_softmax(last, if args.len() == 2 { num(&args[0]) } else { 1.0 }),
                Sum => t.sum(last),
                Max => t.max(last),
            })
        }
    }
}

/// Gradients of a recorded program with respect to the named inputs.
pub fn backward(rec: &Recording, requested: &[&str]) -> Result<GradientResult, DiffError> {
    let vars = requested
        .iter()
        .map(|n| rec.inputs.get(*n).copied().ok_or_else(|| DiffError::UnknownInput(n.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let grads = rec.tape.gradients(rec.output, &vars)?;
    Ok(GradientResult {
        value: rec.value(),
        gradients: requested.iter().map(|n| n.to_string()).zip(grads).collect(),
    })
}
