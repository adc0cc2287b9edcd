//! Reverse-mode tape over dense row-major blocks.
//!
//! Every node holds an `Array2<f64>`. A single state vector is a `1 x n` row,
//! a batch of states is `B x n`, and scalars are `1 x 1`. Elementwise binary
//! operations broadcast a right-hand (or left-hand) operand of shape `1 x n`
//! (shared row), `B x 1` (per-row scalar) or `1 x 1` (scalar); the backward
//! pass sums the incoming gradient back down to the operand's shape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. `backward` walks the nodes in reverse index order,
//! which fixes the accumulation order and makes gradients bit-reproducible.

use ndarray::{linalg::general_mat_mul, Array2, Axis, Zip};

use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    /// `log cosh(x)`, evaluated without overflow.
    LogCosh,
    /// `|x|^p`. Derivative `p |x|^(p-1) sign(x)`; at `x = 0` the subgradient 0 is used.
    AbsPow(f64),
    /// `sign(x) |x|^p`. Derivative `p |x|^(p-1)`; at `x = 0` the value 0 is used
    /// (a valid Clarke element when `p < 1`, the true derivative when `p > 1`).
    SignPow(f64),
    /// `(q-1) |x|^(q-2)`, the slope of `sign(x)|x|^(q-1)`. Taken as 0 at `x = 0`
    /// when `q < 2`.
    PowSlope(f64),
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
            Unary::LogCosh => "logcosh",
            Unary::AbsPow(_) => "abspow",
            Unary::SignPow(_) => "signpow",
            Unary::PowSlope(_) => "powslope",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::LogCosh => log_cosh(x),
            Unary::AbsPow(p) => x.abs().powf(p),
            Unary::SignPow(p) => x.signum() * x.abs().powf(p),
            Unary::PowSlope(q) => {
                if x == 0.0 && q < 2.0 {
                    0.0
                } else {
                    (q - 1.0) * x.abs().powf(q - 2.0)
                }
            }
        }
    }

    /// Derivative at `x`, given the already computed output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
            Unary::LogCosh => x.tanh(),
            // nonsmooth site: 0 is taken at the kink
            Unary::AbsPow(p) => {
                if x == 0.0 {
                    0.0
                } else {
                    p * x.abs().powf(p - 1.0) * x.signum()
                }
            }
            // nonsmooth site: 0 is taken at the kink
            Unary::SignPow(p) => {
                if x == 0.0 {
                    0.0
                } else {
                    p * x.abs().powf(p - 1.0)
                }
            }
            Unary::PowSlope(q) => {
                if x == 0.0 {
                    0.0
                } else {
                    (q - 1.0) * (q - 2.0) * x.abs().powf(q - 3.0) * x.signum()
                }
            }
        }
    }
}

/// Numerically stable `log cosh`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Map(Var, Unary),
    RowLse { a: Var, beta: f64 },
    RowSoftmax { a: Var, beta: f64 },
    Sum(Var),
    RowSum(Var),
    Max(Var),
    SliceCols { a: Var, start: usize },
    RowMatVec { m: Var, v: Var, rows: usize, cols: usize, transpose: bool },
    SkewApply { c: Var, v: Var, n: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    name: Option<String>,
}

/// A Wengert list of block operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Resulting shape of a broadcasting elementwise op, if compatible.
fn broadcast_shape(l: (usize, usize), r: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |a: usize, b: usize| {
        if a == b {
            Some(a)
        } else if a == 1 {
            Some(b)
        } else if b == 1 {
            Some(a)
        } else {
            None
        }
    };
    Some((dim(l.0, r.0)?, dim(l.1, r.1)?))
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
fn reduce_to(g: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    out_shape: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let av = a.broadcast(out_shape).expect("checked broadcast");
    let bv = b.broadcast(out_shape).expect("checked broadcast");
    let mut out = Array2::zeros(out_shape);
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn row_lse(a: &Array2<f64>, beta: f64) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), 1));
    for (i, row) in a.rows().into_iter().enumerate() {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
        let s: f64 = row.iter().map(|&v| (beta * v - m).exp()).sum();
        out[[i, 0]] = (m + s.ln()) / beta;
    }
    out
}

fn row_softmax(a: &Array2<f64>, beta: f64) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
        row.mapv_inplace(|v| (beta * v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>, ta: bool, tb: bool) -> Array2<f64> {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    let mut out = Array2::zeros((av.nrows(), bv.ncols()));
    general_mat_mul(1.0, &av, &bv, 0.0, &mut out);
    out
}

/// Plain counterpart of [`Tape::row_matvec`].
pub fn row_matvec(mv: &Array2<f64>, vv: &Array2<f64>, rows: usize, cols: usize, transpose: bool) -> Array2<f64> {
    let out_len = if transpose { cols } else { rows };
    let shared = mv.nrows() == 1;
    let mut out = Array2::zeros((vv.nrows(), out_len));
    for b in 0..vv.nrows() {
        let mr = mv.row(if shared { 0 } else { b });
        for i in 0..rows {
            for j in 0..cols {
                let mij = mr[i * cols + j];
                if transpose {
                    out[[b, j]] += mij * vv[[b, i]];
                } else {
                    out[[b, i]] += mij * vv[[b, j]];
                }
            }
        }
    }
    out
}

/// Plain counterpart of [`Tape::skew_apply`].
pub fn skew_apply(cv: &Array2<f64>, vv: &Array2<f64>, n: usize) -> Array2<f64> {
    let shared = cv.nrows() == 1;
    let mut out = Array2::zeros((vv.nrows(), n));
    for b in 0..vv.nrows() {
        let cr = cv.row(if shared { 0 } else { b });
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                out[[b, i]] += cr[k] * vv[[b, j]];
                out[[b, j]] -= cr[k] * vv[[b, i]];
                k += 1;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf: a state or parameter block the caller may request gradients for.
    pub fn input(&mut self, name: impl Into<String>, value: Array2<f64>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Anonymous leaf that is never differentiated against.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn row(&mut self, name: impl Into<String>, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.input(name, a)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or(DiffError::ShapeMismatch {
            op: name,
            left: sa,
            right: sb,
        })?;
        let value = broadcast_zip(self.value(a), self.value(b), out, f);
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(Op::Shift(a, c), value)
    }

    /// `op(a) · op(b)` with optional transposes; plain matrix product on blocks.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner_a = if ta { sa.0 } else { sa.1 };
        let inner_b = if tb { sb.1 } else { sb.0 };
        if inner_a != inner_b {
            return Err(DiffError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let value = matmul(self.value(a), self.value(b), ta, tb);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix-vector product `M v` for a matrix node `m` (r x c) and row vectors
    /// `v` (B x c); returns the rows `(M v_i)ᵀ` (B x r).
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.1 != sv.1 {
            return Err(DiffError::ShapeMismatch { op: "matvec", left: sm, right: sv });
        }
        self.matmul_t(v, m, false, true)
    }

    pub fn map(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).mapv(|x| f.apply(x));
        self.push(Op::Map(a, f), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Unary::Log)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, Unary::Cos)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Unary::Tanh)
    }
    pub fn log_cosh(&mut self, a: Var) -> Var {
        self.map(a, Unary::LogCosh)
    }
    pub fn abs_pow(&mut self, a: Var, p: f64) -> Var {
        self.map(a, Unary::AbsPow(p))
    }
    pub fn sign_pow(&mut self, a: Var, p: f64) -> Var {
        self.map(a, Unary::SignPow(p))
    }

    /// Row-wise `(1/β) log Σ_j exp(β a_ij)`, max-shifted; output `B x 1`.
    pub fn row_lse(&mut self, a: Var, beta: f64) -> Var {
        let value = row_lse(self.value(a), beta);
        self.push(Op::RowLse { a, beta }, value)
    }

    /// Row-wise softmax of `β a`.
    pub fn row_softmax(&mut self, a: Var, beta: f64) -> Var {
        let value = row_softmax(self.value(a), beta);
        self.push(Op::RowSoftmax { a, beta }, value)
    }

    /// Sum of every entry; output `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Array2::from_elem((1, 1), s))
    }

    /// Row sums; output `B x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowSum(a), value)
    }

    /// Maximum entry; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self.value(a).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        self.push(Op::Max(a), Array2::from_elem((1, 1), m))
    }

    /// Full inner product `Σ a ⊙ b`; output `1 x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: "dot",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Row-wise inner products; output `B x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        Ok(self.row_sum(p))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(DiffError::ShapeMismatch { op: "slice", left: s, right: (start, len) });
        }
        let value = self.value(a).slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(Op::SliceCols { a, start }, value))
    }

    /// Per-row matrix-vector product. Row `i` of `m` (length `rows*cols`) is a
    /// row-major `rows x cols` matrix `M_i`; returns rows `M_i v_i` (or `M_iᵀ v_i`).
    pub fn row_matvec(
        &mut self,
        m: Var,
        v: Var,
        rows: usize,
        cols: usize,
        transpose: bool,
    ) -> Result<Var, DiffError> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        let in_len = if transpose { rows } else { cols };
        if sm.1 != rows * cols || sv.1 != in_len || !(sm.0 == sv.0 || sm.0 == 1) {
            return Err(DiffError::ShapeMismatch { op: "row_matvec", left: sm, right: sv });
        }
        let out = row_matvec(self.value(m), self.value(v), rows, cols, transpose);
        Ok(self.push(Op::RowMatVec { m, v, rows, cols, transpose }, out))
    }

    /// Per-row skew-symmetric product `S(c_i) v_i`, where `S(c)` has `c_k` above
    /// the diagonal (row-major upper-triangle order) and `-c_k` below it.
    pub fn skew_apply(&mut self, c: Var, v: Var, n: usize) -> Result<Var, DiffError> {
        let (sc, sv) = (self.shape(c), self.shape(v));
        if sc.1 != n * (n - 1) / 2 || sv.1 != n || !(sc.0 == sv.0 || sc.0 == 1) {
            return Err(DiffError::ShapeMismatch { op: "skew_apply", left: sc, right: sv });
        }
        let out = skew_apply(self.value(c), self.value(v), n);
        Ok(self.push(Op::SkewApply { c, v, n }, out))
    }

    /// Recompute every non-leaf node from the leaves in tape order.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let val = |v: Var| &self.nodes[v.0].value;
            let value = match op {
                Op::Leaf => continue,
                Op::Add(a, b) => {
                    let s = broadcast_shape(val(a).dim(), val(b).dim()).expect("recorded");
                    broadcast_zip(val(a), val(b), s, |x, y| x + y)
                }
                Op::Sub(a, b) => {
                    let s = broadcast_shape(val(a).dim(), val(b).dim()).expect("recorded");
                    broadcast_zip(val(a), val(b), s, |x, y| x - y)
                }
                Op::Mul(a, b) => {
                    let s = broadcast_shape(val(a).dim(), val(b).dim()).expect("recorded");
                    broadcast_zip(val(a), val(b), s, |x, y| x * y)
                }
                Op::Scale(a, c) => val(a).mapv(|x| c * x),
                Op::Shift(a, c) => val(a).mapv(|x| x + c),
                Op::MatMul { a, b, ta, tb } => matmul(val(a), val(b), ta, tb),
                Op::Map(a, f) => val(a).mapv(|x| f.apply(x)),
                Op::RowLse { a, beta } => row_lse(val(a), beta),
                Op::RowSoftmax { a, beta } => row_softmax(val(a), beta),
                Op::Sum(a) => Array2::from_elem((1, 1), val(a).sum()),
                Op::RowSum(a) => val(a).sum_axis(Axis(1)).insert_axis(Axis(1)),
                Op::Max(a) => Array2::from_elem(
                    (1, 1),
                    val(a).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
                ),
                Op::SliceCols { a, start } => {
                    let len = self.nodes[i].value.ncols();
                    val(a).slice(ndarray::s![.., start..start + len]).to_owned()
                }
                Op::RowMatVec { m, v, rows, cols, transpose } => {
                    row_matvec(val(m), val(v), rows, cols, transpose)
                }
                Op::SkewApply { c, v, n } => skew_apply(val(c), val(v), n),
            };
            self.nodes[i].value = value;
        }
    }

    /// Overwrite a leaf value (same shape) before a [`Tape::replay`].
    pub fn set_leaf(&mut self, v: Var, value: Array2<f64>) -> Result<(), DiffError> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) || node.value.dim() != value.dim() {
            return Err(DiffError::ShapeMismatch { op: "set_leaf", left: node.value.dim(), right: value.dim() });
        }
        node.value = value;
        Ok(())
    }

    /// Reverse sweep from the scalar `output`. Returns the adjoint of every
    /// node (`None` for nodes that do not influence the output).
    pub fn adjoints(&self, output: Var) -> Result<Vec<Option<Array2<f64>>>, DiffError> {
        if self.shape(output) != (1, 1) {
            return Err(DiffError::NotScalar(self.shape(output)));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, reduce_to(&g, self.shape(a)));
                    acc(&mut grads, b, reduce_to(&g, self.shape(b)));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, reduce_to(&g, self.shape(a)));
                    acc(&mut grads, b, reduce_to(&g.mapv(|x| -x), self.shape(b)));
                }
                Op::Mul(a, b) => {
                    let s = g.dim();
                    let ga = broadcast_zip(&g, self.value(b), s, |x, y| x * y);
                    let gb = broadcast_zip(&g, self.value(a), s, |x, y| x * y);
                    acc(&mut grads, a, reduce_to(&ga, self.shape(a)));
                    acc(&mut grads, b, reduce_to(&gb, self.shape(b)));
                }
                Op::Scale(a, c) => acc(&mut grads, a, g.mapv(|x| c * x)),
                Op::Shift(a, _) => acc(&mut grads, a, g),
                Op::MatMul { a, b, ta, tb } => {
                    // C = A' B'  with A' = op(A), B' = op(B)
                    // dA' = G B'ᵀ, dB' = A'ᵀ G
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = if ta { matmul(vb, &g, tb, true) } else { matmul(&g, vb, false, !tb) };
                    let gb = if tb { matmul(&g, va, true, ta) } else { matmul(va, &g, !ta, false) };
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Map(a, f) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(a))
                        .and(&node.value)
                        .for_each(|gi, &x, &y| *gi *= f.derivative(x, y));
                    acc(&mut grads, a, ga);
                }
                Op::RowLse { a, beta } => {
                    // d/da (1/β) lse(β a) = softmax(β a)
                    let mut ga = row_softmax(self.value(a), beta);
                    for (mut row, gr) in ga.rows_mut().into_iter().zip(g.column(0)) {
                        row *= *gr;
                    }
                    acc(&mut grads, a, ga);
                }
                Op::RowSoftmax { a, beta } => {
                    // J = β (diag p - p pᵀ);  Jᵀ g = β p ⊙ (g - <p, g>)
                    let p = &node.value;
                    let mut ga = Array2::zeros(p.dim());
                    for ((mut out, pr), gr) in ga.rows_mut().into_iter().zip(p.rows()).zip(g.rows()) {
                        let pg = pr.dot(&gr);
                        Zip::from(&mut out)
                            .and(&pr)
                            .and(&gr)
                            .for_each(|o, &pi, &gi| *o = beta * pi * (gi - pg));
                    }
                    acc(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, a, Array2::from_elem(self.shape(a), s));
                }
                Op::RowSum(a) => {
                    let ga = g.broadcast(self.shape(a)).expect("row broadcast").to_owned();
                    acc(&mut grads, a, ga);
                }
                Op::Max(a) => {
                    let va = self.value(a);
                    let m = node.value[[0, 0]];
                    let mut ga = Array2::zeros(va.dim());
                    if let Some((idx, _)) = va.indexed_iter().find(|(_, &v)| v == m) {
                        ga[idx] = g[[0, 0]];
                    }
                    acc(&mut grads, a, ga);
                }
                Op::SliceCols { a, start } => {
                    let mut ga = Array2::zeros(self.shape(a));
                    let len = g.ncols();
                    ga.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                    acc(&mut grads, a, ga);
                }
                Op::RowMatVec { m, v, rows, cols, transpose } => {
                    let (vm, vv) = (self.value(m), self.value(v));
                    let shared = vm.nrows() == 1;
                    let mut gm = Array2::zeros(vm.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for b in 0..vv.nrows() {
                        let mb = if shared { 0 } else { b };
                        for i in 0..rows {
                            for j in 0..cols {
                                let mij = vm[[mb, i * cols + j]];
                                if transpose {
                                    // out_j += m_ij v_i
                                    gm[[mb, i * cols + j]] += g[[b, j]] * vv[[b, i]];
                                    gv[[b, i]] += mij * g[[b, j]];
                                } else {
                                    // out_i += m_ij v_j
                                    gm[[mb, i * cols + j]] += g[[b, i]] * vv[[b, j]];
                                    gv[[b, j]] += mij * g[[b, i]];
                                }
                            }
                        }
                    }
                    acc(&mut grads, m, gm);
                    acc(&mut grads, v, gv);
                }
                Op::SkewApply { c, v, n } => {
                    let (vc, vv) = (self.value(c), self.value(v));
                    let shared = vc.nrows() == 1;
                    let mut gc = Array2::zeros(vc.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for b in 0..vv.nrows() {
                        let cb = if shared { 0 } else { b };
                        let mut k = 0;
                        for i in 0..n {
                            for j in (i + 1)..n {
                                let ck = vc[[cb, k]];
                                // out_i += c v_j ; out_j -= c v_i
                                gc[[cb, k]] += g[[b, i]] * vv[[b, j]] - g[[b, j]] * vv[[b, i]];
                                gv[[b, j]] += ck * g[[b, i]];
                                gv[[b, i]] -= ck * g[[b, j]];
                                k += 1;
                            }
                        }
                    }
                    acc(&mut grads, c, gc);
                    acc(&mut grads, v, gv);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of the scalar `output` with respect to `requested` nodes.
    /// Nodes the output does not depend on get a zero gradient.
    pub fn gradients(&self, output: Var, requested: &[Var]) -> Result<Vec<Array2<f64>>, DiffError> {
        for &r in requested {
            if r.0 >= self.nodes.len() {
                return Err(DiffError::UnknownInput(format!("node #{}", r.0)));
            }
        }
        let mut adj = self.adjoints(output)?;
        Ok(requested
            .iter()
            .map(|&r| {
                if r.0 < adj.len() {
                    adj[r.0].take().unwrap_or_else(|| Array2::zeros(self.shape(r)))
                } else {
                    Array2::zeros(self.shape(r))
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn half_square_norm() {
        let mut t = Tape::new();
        let x = t.row("x", &[3.0, 4.0]);
        let d = t.dot(x, x).unwrap();
        let e = t.scale(d, 0.5);
        assert_eq!(t.scalar(e), 12.5);
        let g = t.gradients(e, &[x]).unwrap();
        assert_eq!(g[0], array![[3.0, 4.0]]);
    }

    #[test]
    fn lse_at_zero() {
        let mut t = Tape::new();
        let x = t.row("x", &[0.0, 0.0]);
        let l = t.row_lse(x, 1.0);
        let s = t.sum(l);
        assert!((t.scalar(s) - 2f64.ln()).abs() < 1e-15);
        let g = t.gradients(s, &[x]).unwrap();
        assert_eq!(g[0], array![[0.5, 0.5]]);
    }

    #[test]
    fn lse_survives_large_inputs() {
        let mut t = Tape::new();
        let x = t.row("x", &[1000.0, 1000.0]);
        let l = t.row_lse(x, 1.0);
        assert!((t.scalar(l) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let p = t.row_softmax(x, 1.0);
        assert_eq!(t.value(p), &array![[0.5, 0.5]]);
    }

    #[test]
    fn shape_mismatch_names_operands() {
        let mut t = Tape::new();
        let a = t.row("a", &[1.0, 2.0]);
        let b = t.row("b", &[1.0, 2.0, 3.0]);
        match t.add(a, b) {
            Err(DiffError::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, (1, 2));
                assert_eq!(right, (1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut t = Tape::new();
        let x = t.input("x", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = t.row("b", &[0.5, -0.5]);
        let y = t.add(x, b).unwrap();
        let s = t.sum(y);
        let g = t.gradients(s, &[b]).unwrap();
        assert_eq!(g[0], array![[3.0, 3.0]]);
    }

    #[test]
    fn abs_pow_kink_uses_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.row("x", &[0.0, 2.0]);
        let y = t.abs_pow(x, 1.5);
        let s = t.sum(y);
        let g = t.gradients(s, &[x]).unwrap();
        assert_eq!(g[0][[0, 0]], 0.0);
        assert!((g[0][[0, 1]] - 1.5 * 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.row("x", &[1.0, 2.0]);
        assert!(matches!(t.gradients(x, &[x]), Err(DiffError::NotScalar((1, 2)))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.row("x", &[0.3, -1.7, 2.2]);
        let m = t.input("m", array![[1.0, 0.5, -0.25], [0.1, 0.2, 0.3]]);
        let y = t.matvec(m, x).unwrap();
        let z = t.tanh(y);
        let w = t.row_lse(z, 2.0);
        let s = t.sum(w);
        let before = t.scalar(s);
        t.replay();
        assert_eq!(before.to_bits(), t.scalar(s).to_bits());
    }

    #[test]
    fn matvec_matches_manual_product() {
        let mut t = Tape::new();
        let m = t.input("m", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let v = t.row("v", &[1.0, -1.0]);
        let y = t.matvec(m, v).unwrap();
        assert_eq!(t.value(y), &array![[-1.0, -1.0, -1.0]]);
        let s = t.sum(y);
        let g = t.gradients(s, &[m, v]).unwrap();
        assert_eq!(g[0], array![[1.0, -1.0], [1.0, -1.0], [1.0, -1.0]]);
        assert_eq!(g[1], array![[9.0, 12.0]]);
    }

    #[test]
    fn skew_apply_is_antisymmetric() {
        let mut t = Tape::new();
        let c = t.row("c", &[2.0]);
        let v = t.row("v", &[1.0, 3.0]);
        let y = t.skew_apply(c, v, 2).unwrap();
        assert_eq!(t.value(y), &array![[6.0, -2.0]]);
        let d = t.dot(y, v).unwrap();
        assert_eq!(t.scalar(d), 0.0);
    }
}
