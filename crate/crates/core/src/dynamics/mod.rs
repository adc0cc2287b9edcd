//! Vector fields, the state metric and explicit Euler integration.

mod euler;
mod metric;
mod recurrent;

pub use euler::{fmt17, integrate_euler, Trajectory, DIVERGENCE_LIMIT};
pub use metric::{skew_len, LearnedPsd, MetricDoc, MetricField, MetricVars};
pub use recurrent::{recurrent_field, RecurrentEbm};

use ndarray::Array2;
use thiserror::Error;

use crate::diffengine::DiffError;
use crate::energy::{EnergyError, HybridEbm};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("W is not symmetric (max deviation {max_deviation:e})")]
    Asymmetric { max_deviation: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error("metric not uniformly positive: {0}")]
    MetricFloor(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize, partial: Box<Trajectory> },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// `−∇E(x₁)` of the composed hybrid energy, by reverse mode.
pub fn visible_field(m: &HybridEbm, x1: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    Ok(m.energy_gradient_field_rows(&row(x1))?.into_iter().collect())
}

/// Closed-form reduced visible field; requires the structural conditions.
pub fn visible_field_reduced(m: &HybridEbm, x1: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    Ok(m.reduced_field_rows(&row(x1))?.into_iter().collect())
}

pub fn metric_eval(q: &MetricField, x: &[f64]) -> Result<Array2<f64>, DynamicsError> {
    q.eval(x)
}

/// `Q(x₁) f(x₁)` with the authoritative visible field.
pub fn ph_field(m: &HybridEbm, q: &MetricField, x1: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    let f = visible_field(m, x1)?;
    let xr = row(x1);
    Ok(q.apply_rows(&xr, &row(&f))?.into_iter().collect())
}

/// A hybrid model paired with its metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PhSystem {
    pub model: HybridEbm,
    pub metric: MetricField,
}

impl PhSystem {
    pub fn new(model: HybridEbm, metric: MetricField) -> Result<Self, DynamicsError> {
        if let Some(d) = metric.dim() {
            if d != model.visible_width() {
                return Err(DynamicsError::Shape(format!(
                    "metric dimension {d} does not match visible width {}",
                    model.visible_width()
                )));
            }
        }
        Ok(PhSystem { model, metric })
    }

    /// Batched `Q(x) f(x)` using the reduced visible field.
    pub fn field_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>, DynamicsError> {
        let f = self.model.reduced_field_rows(x)?;
        self.metric.apply_rows(x, &f)
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        Ok(self.field_rows(&row(x))?.into_iter().collect())
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64, DynamicsError> {
        Ok(self.model.energy(x)?)
    }

    /// Euler rollout of many starts at once; row `k` of the result holds step `k`.
    pub fn rollout_rows(&self, x0: &Array2<f64>, dt: f64, steps: usize) -> Result<Vec<Array2<f64>>, DynamicsError> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut x = x0.clone();
        out.push(x.clone());
        for k in 0..steps {
            let f = self.field_rows(&x)?;
            x.scaled_add(dt, &f);
            if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
                return Err(DynamicsError::Diverged {
                    step: k + 1,
                    partial: Box::new(Trajectory { times: vec![], states: vec![], fields: None }),
                });
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}
