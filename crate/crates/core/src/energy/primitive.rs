//! Convex primitives `F` and their activations `Ψ = ∇F`.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use super::EnergyError;
use crate::diffengine::{log_cosh, DiffError, Tape, Unary, Var};

/// A proper convex C¹ function together with its gradient map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexPrimitive {
    /// `½‖x‖²`, activation `x`.
    Quadratic,
    /// `(1/β) log Σ exp(β xᵢ)`, activation `softmax(β x)`.
    LogSumExp { beta: f64 },
    /// `Σ |xᵢ|^q / q`, activation `sign(xᵢ)|xᵢ|^(q-1)`.
    PowerNorm { q: f64 },
    /// `Σ log cosh(xᵢ)`, activation `tanh(xᵢ)`.
    LogCosh,
}

impl ConvexPrimitive {
    pub fn softmax() -> Self {
        ConvexPrimitive::LogSumExp { beta: 1.0 }
    }

    pub fn power(q: f64) -> Result<Self, EnergyError> {
        let p = ConvexPrimitive::PowerNorm { q };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        match *self {
            ConvexPrimitive::LogSumExp { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(EnergyError::InvalidPrimitive(format!("log-sum-exp needs beta > 0, got {beta}")))
            }
            ConvexPrimitive::PowerNorm { q } if !(q > 1.0 && q.is_finite()) => {
                Err(EnergyError::InvalidPrimitive(format!("power norm needs q > 1, got {q}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConvexPrimitive::Quadratic => "quadratic",
            ConvexPrimitive::LogSumExp { .. } => "log_sum_exp",
            ConvexPrimitive::PowerNorm { .. } => "power_norm",
            ConvexPrimitive::LogCosh => "log_cosh",
        }
    }

    /// Exponent `q` with `F(x) ~ Θ(‖x‖^q)`.
    pub fn growth_exponent(&self) -> f64 {
        match *self {
            ConvexPrimitive::Quadratic => 2.0,
            ConvexPrimitive::PowerNorm { q } => q,
            ConvexPrimitive::LogSumExp { .. } | ConvexPrimitive::LogCosh => 1.0,
        }
    }

    /// Whether the activation image is bounded.
    pub fn bounded_activation(&self) -> bool {
        matches!(self, ConvexPrimitive::LogSumExp { .. } | ConvexPrimitive::LogCosh)
    }

    pub fn value(&self, x: ArrayView1<f64>) -> f64 {
        match *self {
            ConvexPrimitive::Quadratic => 0.5 * x.dot(&x),
            ConvexPrimitive::LogSumExp { beta } => {
                let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
                let s: f64 = x.iter().map(|&v| (beta * v - m).exp()).sum();
                (m + s.ln()) / beta
            }
            ConvexPrimitive::PowerNorm { q } => x.iter().map(|v| v.abs().powf(q)).sum::<f64>() / q,
            ConvexPrimitive::LogCosh => x.iter().map(|&v| log_cosh(v)).sum(),
        }
    }

    pub fn activation(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match *self {
            ConvexPrimitive::Quadratic => x.to_owned(),
            ConvexPrimitive::LogSumExp { beta } => {
                let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
                let mut e = x.mapv(|v| (beta * v - m).exp());
                let s = e.sum();
                e /= s;
                e
            }
            ConvexPrimitive::PowerNorm { q } => x.mapv(|v| v.signum() * v.abs().powf(q - 1.0)),
            ConvexPrimitive::LogCosh => x.mapv(f64::tanh),
        }
    }

    /// `DΨ(x) v`, given `act = Ψ(x)`. At PowerNorm kinks with `q < 2` the
    /// zero element of the Clarke Jacobian is used.
    pub fn jvp(&self, x: ArrayView1<f64>, act: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
        match *self {
            ConvexPrimitive::Quadratic => v.to_owned(),
            ConvexPrimitive::LogSumExp { beta } => {
                let pv = act.dot(&v);
                Zip::from(&act).and(&v).map_collect(|&p, &vi| beta * p * (vi - pv))
            }
            ConvexPrimitive::PowerNorm { q } => {
                Zip::from(&x).and(&v).map_collect(|&xi, &vi| power_slope(q, xi) * vi)
            }
            ConvexPrimitive::LogCosh => Zip::from(&act).and(&v).map_collect(|&t, &vi| (1.0 - t * t) * vi),
        }
    }

    /// Row-wise [`ConvexPrimitive::value`].
    pub fn value_rows(&self, x: &Array2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.value(r)).collect()
    }

    pub fn activation_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (mut o, r) in out.rows_mut().into_iter().zip(x.rows()) {
            o.assign(&self.activation(r));
        }
        out
    }

    pub fn jvp_rows(&self, x: &Array2<f64>, act: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(v.dim());
        for (i, mut o) in out.rows_mut().into_iter().enumerate() {
            o.assign(&self.jvp(x.row(i), act.row(i), v.row(i)));
        }
        out
    }

    /// Row-wise value on a tape; output `B x 1`.
    pub fn record_value(&self, t: &mut Tape, x: Var) -> Var {
        match *self {
            ConvexPrimitive::Quadratic => {
                let sq = t.mul(x, x).expect("same shape");
                let s = t.row_sum(sq);
                t.scale(s, 0.5)
            }
            ConvexPrimitive::LogSumExp { beta } => t.row_lse(x, beta),
            ConvexPrimitive::PowerNorm { q } => {
                let p = t.abs_pow(x, q);
                let s = t.row_sum(p);
                t.scale(s, 1.0 / q)
            }
            ConvexPrimitive::LogCosh => {
                let l = t.log_cosh(x);
                t.row_sum(l)
            }
        }
    }

    pub fn record_activation(&self, t: &mut Tape, x: Var) -> Var {
        match *self {
            ConvexPrimitive::Quadratic => x,
            ConvexPrimitive::LogSumExp { beta } => t.row_softmax(x, beta),
            ConvexPrimitive::PowerNorm { q } => t.sign_pow(x, q - 1.0),
            ConvexPrimitive::LogCosh => t.tanh(x),
        }
    }

    /// `DΨ(x) v` on a tape, given the recorded activation `act`.
    pub fn record_jvp(&self, t: &mut Tape, x: Var, act: Var, v: Var) -> Result<Var, DiffError> {
        match *self {
            ConvexPrimitive::Quadratic => Ok(v),
            ConvexPrimitive::LogSumExp { beta } => {
                let pv = t.row_dot(act, v)?;
                let centered = t.sub(v, pv)?;
                let out = t.mul(act, centered)?;
                Ok(if beta == 1.0 { out } else { t.scale(out, beta) })
            }
            ConvexPrimitive::PowerNorm { q } => {
                let slope = t.map(x, Unary::PowSlope(q));
                t.mul(slope, v)
            }
            ConvexPrimitive::LogCosh => {
                let sq = t.mul(act, act)?;
                let neg = t.scale(sq, -1.0);
                let d = t.shift(neg, 1.0);
                t.mul(d, v)
            }
        }
    }
}

/// `(q-1)|x|^(q-2)`, with 0 at the kink when `q < 2`.
pub(crate) fn power_slope(q: f64, x: f64) -> f64 {
    Unary::PowSlope(q).apply(x)
}

/// `Ψ(x)` for a single state, rejecting non-finite input.
pub fn activation(p: &ConvexPrimitive, x: &[f64]) -> Result<Vec<f64>, EnergyError> {
    check_finite(x)?;
    Ok(p.activation(ArrayView1::from(x)).to_vec())
}

/// `F(x)` for a single state, rejecting non-finite input.
pub fn primitive_value(p: &ConvexPrimitive, x: &[f64]) -> Result<f64, EnergyError> {
    check_finite(x)?;
    Ok(p.value(ArrayView1::from(x)))
}

fn check_finite(x: &[f64]) -> Result<(), EnergyError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(EnergyError::NonFiniteInput { index: i }),
        None => Ok(()),
    }
}
