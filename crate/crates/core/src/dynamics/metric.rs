use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DynamicsError;
use crate::diffengine::{DiffError, Tape, Var};
use crate::energy::MatrixDoc;

/// State-dependent metric `Q(x)` with uniformly positive symmetric part.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricField {
    Identity,
    /// `[[1 + sin(x)/2, 0.3 cos(y)], [0.3 cos(y), 1 + cos(x + y)/2]]`.
    FixedSinCos,
    LearnedPsd(LearnedPsd),
}

/// `Q(x) = εI + B(x)B(x)ᵀ + S(c(x))` with `B = s_B tanh(·)` and `c = s_C tanh(·)`
/// read off a one-hidden-layer tanh map of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPsd {
    pub dim: usize,
    pub eps: f64,
    pub b_scale: f64,
    pub c_scale: f64,
    /// `dim x H`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `H x (dim² + dim(dim−1)/2)`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Metric parameter leaves recorded on a tape.
#[derive(Clone, Debug)]
pub struct MetricVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MetricVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

pub fn skew_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl LearnedPsd {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng>(
        dim: usize,
        hidden: usize,
        eps: f64,
        b_scale: f64,
        c_scale: f64,
        rng: &mut R,
    ) -> Result<Self, DynamicsError> {
        let out = dim * dim + skew_len(dim);
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Array2::from_shape_fn((dim, hidden), |_| rng.random_range(-a1..a1));
        let w2 = Array2::from_shape_fn((hidden, out), |_| rng.random_range(-a2..a2));
        let m = LearnedPsd {
            dim,
            eps,
            b_scale,
            c_scale,
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(out),
        };
        m.validate()?;
        Ok(m)
    }

    /// Zero map: `Q ≡ εI`.
    pub fn constant(dim: usize, hidden: usize, eps: f64) -> Self {
        let out = dim * dim + skew_len(dim);
        LearnedPsd {
            dim,
            eps,
            b_scale: 1.0,
            c_scale: 1.0,
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, out)),
            b2: Array1::zeros(out),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.eps >= 1e-2 && self.eps.is_finite()) {
            return Err(DynamicsError::MetricFloor(format!("floor eps must be >= 1e-2, got {}", self.eps)));
        }
        if !(self.b_scale.is_finite() && self.c_scale.is_finite()) {
            return Err(DynamicsError::Config("metric scales must be finite".into()));
        }
        let h = self.hidden();
        let out = self.dim * self.dim + skew_len(self.dim);
        if self.w1.nrows() != self.dim || self.b1.len() != h || self.w2.dim() != (h, out) || self.b2.len() != out {
            return Err(DynamicsError::Shape("learned metric blocks have inconsistent shapes".into()));
        }
        Ok(())
    }

    /// Squashed factors `(B, c)` per row: `B x dim²` and `B x dim(dim−1)/2`.
    fn factors(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let o = h.dot(&self.w2) + &self.b2;
        let n2 = self.dim * self.dim;
        let b = o.slice(s![.., ..n2]).mapv(|v| self.b_scale * v.tanh());
        let c = o.slice(s![.., n2..]).mapv(|v| self.c_scale * v.tanh());
        (b, c)
    }

    /// Upper bound on `‖Q(x)‖` over all `x`.
    pub fn norm_bound(&self) -> f64 {
        let n = self.dim as f64;
        self.eps + n * n * self.b_scale * self.b_scale + (n - 1.0).max(0.0) * self.c_scale.abs()
    }

    pub fn param_blocks(&self) -> Vec<(String, Array2<f64>)> {
        vec![
            ("Q.W1".into(), self.w1.clone()),
            ("Q.b1".into(), self.b1.clone().insert_axis(Axis(0))),
            ("Q.W2".into(), self.w2.clone()),
            ("Q.b2".into(), self.b2.clone().insert_axis(Axis(0))),
        ]
    }

    pub fn set_param_blocks(&mut self, blocks: &[Array2<f64>]) -> Result<(), DynamicsError> {
        let shapes: Vec<_> = self.param_blocks().iter().map(|(_, b)| b.dim()).collect();
        if blocks.len() != 4 || blocks.iter().zip(&shapes).any(|(b, s)| b.dim() != *s) {
            return Err(DynamicsError::Shape("learned metric parameter blocks do not match".into()));
        }
        self.w1.assign(&blocks[0]);
        self.b1.assign(&blocks[1].row(0));
        self.w2.assign(&blocks[2]);
        self.b2.assign(&blocks[3].row(0));
        Ok(())
    }

    pub fn record_params(&self, t: &mut Tape) -> MetricVars {
        MetricVars {
            w1: t.input("Q.W1", self.w1.clone()),
            b1: t.input("Q.b1", self.b1.clone().insert_axis(Axis(0))),
            w2: t.input("Q.W2", self.w2.clone()),
            b2: t.input("Q.b2", self.b2.clone().insert_axis(Axis(0))),
        }
    }

    /// Rows `Q(x_i) v_i` on a tape.
    pub fn record_apply(&self, t: &mut Tape, p: &MetricVars, x: Var, v: Var) -> Result<Var, DiffError> {
        let n = self.dim;
        let n2 = n * n;
        let a = t.matmul(x, p.w1)?;
        let a = t.add(a, p.b1)?;
        let h = t.tanh(a);
        let o = t.matmul(h, p.w2)?;
        let o = t.add(o, p.b2)?;
        let braw = t.slice_cols(o, 0, n2)?;
        let bt = t.tanh(braw);
        let b = t.scale(bt, self.b_scale);
        let btv = t.row_matvec(b, v, n, n, true)?;
        let bbtv = t.row_matvec(b, btv, n, n, false)?;
        let ev = t.scale(v, self.eps);
        let mut out = t.add(ev, bbtv)?;
        if n > 1 {
            let craw = t.slice_cols(o, n2, skew_len(n))?;
            let ct = t.tanh(craw);
            let c = t.scale(ct, self.c_scale);
            let sv = t.skew_apply(c, v, n)?;
            out = t.add(out, sv)?;
        }
        Ok(out)
    }
}

impl MetricField {
    pub fn dim(&self) -> Option<usize> {
        match self {
            MetricField::Identity => None,
            MetricField::FixedSinCos => Some(2),
            MetricField::LearnedPsd(l) => Some(l.dim),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricField::Identity => "identity",
            MetricField::FixedSinCos => "sincos",
            MetricField::LearnedPsd(_) => "learned",
        }
    }

    fn check_dim(&self, n: usize) -> Result<(), DynamicsError> {
        match self.dim() {
            Some(d) if d != n => Err(DynamicsError::Shape(format!("{} metric has dimension {d}, state has {n}", self.name()))),
            _ => Ok(()),
        }
    }

    /// `Q(x)` as a dense matrix.
    pub fn eval(&self, x: &[f64]) -> Result<Array2<f64>, DynamicsError> {
        let n = x.len();
        self.check_dim(n)?;
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite(format!("metric input coordinate {i}")));
        }
        Ok(match self {
            MetricField::Identity => Array2::eye(n),
            MetricField::FixedSinCos => {
                let (a, b) = (x[0], x[1]);
                let off = 0.3 * b.cos();
                ndarray::array![[1.0 + a.sin() / 2.0, off], [off, 1.0 + (a + b).cos() / 2.0]]
            }
            MetricField::LearnedPsd(l) => {
                let xr = Array2::from_shape_vec((1, n), x.to_vec()).expect("row");
                let (b, c) = l.factors(&xr);
                let bm = b.into_shape_with_order((n, n)).expect("square");
                let mut q = Array2::eye(n) * l.eps + bm.dot(&bm.t());
                let mut k = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        q[[i, j]] += c[[0, k]];
                        q[[j, i]] -= c[[0, k]];
                        k += 1;
                    }
                }
                q
            }
        })
    }

    /// Rows `Q(x_i) v_i`.
    pub fn apply_rows(&self, x: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>, DynamicsError> {
        if x.dim() != v.dim() {
            return Err(DynamicsError::Shape(format!("metric states {:?} vs vectors {:?}", x.dim(), v.dim())));
        }
        let n = x.ncols();
        self.check_dim(n)?;
        Ok(match self {
            MetricField::Identity => v.clone(),
            MetricField::FixedSinCos => {
                let mut out = Array2::zeros(v.dim());
                for i in 0..x.nrows() {
                    let (a, b) = (x[[i, 0]], x[[i, 1]]);
                    let off = 0.3 * b.cos();
                    out[[i, 0]] = (1.0 + a.sin() / 2.0) * v[[i, 0]] + off * v[[i, 1]];
                    out[[i, 1]] = off * v[[i, 0]] + (1.0 + (a + b).cos() / 2.0) * v[[i, 1]];
                }
                out
            }
            MetricField::LearnedPsd(l) => {
                let (b, c) = l.factors(x);
                let btv = crate::diffengine::row_matvec(&b, v, n, n, true);
                let mut out = crate::diffengine::row_matvec(&b, &btv, n, n, false);
                out.scaled_add(l.eps, v);
                if n > 1 {
                    out += &crate::diffengine::skew_apply(&c, v, n);
                }
                out
            }
        })
    }

    /// Rows `Q(x_i) v_i` on a tape; `p` is required for the learned metric.
    pub fn record_apply(&self, t: &mut Tape, p: Option<&MetricVars>, x: Var, v: Var) -> Result<Var, DiffError> {
        match self {
            MetricField::Identity => Ok(v),
            MetricField::FixedSinCos => {
                let a = t.slice_cols(x, 0, 1)?;
                let b = t.slice_cols(x, 1, 1)?;
                let v0 = t.slice_cols(v, 0, 1)?;
                let v1 = t.slice_cols(v, 1, 1)?;
                let sa = t.sin(a);
                let sa = t.scale(sa, 0.5);
                let q11 = t.shift(sa, 1.0);
                let cb = t.cos(b);
                let q12 = t.scale(cb, 0.3);
                let ab = t.add(a, b)?;
                let cab = t.cos(ab);
                let cab = t.scale(cab, 0.5);
                let q22 = t.shift(cab, 1.0);
                let p0 = t.mul(q11, v0)?;
                let p1 = t.mul(q12, v1)?;
                let o0 = t.add(p0, p1)?;
                let p2 = t.mul(q12, v0)?;
                let p3 = t.mul(q22, v1)?;
                let o1 = t.add(p2, p3)?;
                // place the two columns side by side
                let e0 = t.constant(ndarray::array![[1.0, 0.0]]);
                let e1 = t.constant(ndarray::array![[0.0, 1.0]]);
                let c0 = t.matmul(o0, e0)?;
                let c1 = t.matmul(o1, e1)?;
                t.add(c0, c1)
            }
            MetricField::LearnedPsd(l) => match p {
                Some(p) => l.record_apply(t, p, x, v),
                None => Err(DiffError::UnknownInput("Q.W1".into())),
            },
        }
    }

    pub fn to_doc(&self) -> MetricDoc {
        match self {
            MetricField::Identity => MetricDoc::Identity,
            MetricField::FixedSinCos => MetricDoc::Sincos,
            MetricField::LearnedPsd(l) => MetricDoc::Learned {
                dim: l.dim,
                eps: l.eps,
                b_scale: l.b_scale,
                c_scale: l.c_scale,
                w1: MatrixDoc::from_array(&l.w1),
                b1: l.b1.to_vec(),
                w2: MatrixDoc::from_array(&l.w2),
                b2: l.b2.to_vec(),
            },
        }
    }

    pub fn from_doc(doc: &MetricDoc) -> Result<Self, DynamicsError> {
        Ok(match doc {
            MetricDoc::Identity => MetricField::Identity,
            MetricDoc::Sincos => MetricField::FixedSinCos,
            MetricDoc::Learned { dim, eps, b_scale, c_scale, w1, b1, w2, b2 } => {
                let l = LearnedPsd {
                    dim: *dim,
                    eps: *eps,
                    b_scale: *b_scale,
                    c_scale: *c_scale,
                    w1: w1.to_array()?,
                    b1: Array1::from_vec(b1.clone()),
                    w2: w2.to_array()?,
                    b2: Array1::from_vec(b2.clone()),
                };
                l.validate()?;
                MetricField::LearnedPsd(l)
            }
        })
    }
}

/// Serialized metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricDoc {
    Identity,
    Sincos,
    Learned {
        dim: usize,
        eps: f64,
        b_scale: f64,
        c_scale: f64,
        w1: MatrixDoc,
        b1: Vec<f64>,
        w2: MatrixDoc,
        b2: Vec<f64>,
    },
}
