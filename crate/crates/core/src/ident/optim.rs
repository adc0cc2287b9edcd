use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::IdentError;
use crate::energy::MatrixDoc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerDoc {
    pub step: u64,
    pub m: Vec<MatrixDoc>,
    pub v: Vec<MatrixDoc>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[Array2<f64>]) -> Self {
        let z: Vec<_> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        OptimizerState { step: 0, m: z.clone(), v: z }
    }

    pub fn to_doc(&self) -> OptimizerDoc {
        OptimizerDoc {
            step: self.step,
            m: self.m.iter().map(MatrixDoc::from_array).collect(),
            v: self.v.iter().map(MatrixDoc::from_array).collect(),
        }
    }

    pub fn from_doc(d: &OptimizerDoc) -> Result<Self, IdentError> {
        let conv = |v: &[MatrixDoc]| v.iter().map(MatrixDoc::to_array).collect::<Result<Vec<_>, _>>();
        Ok(OptimizerState { step: d.step, m: conv(&d.m)?, v: conv(&d.v)? })
    }

    pub fn check_shapes(&self, params: &[Array2<f64>]) -> Result<(), IdentError> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|((p, m), v)| p.dim() == m.dim() && p.dim() == v.dim());
        if ok {
            Ok(())
        } else {
            Err(IdentError::Config("optimizer state does not match the parameter blocks".into()))
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr (m̂/(√v̂ + ε) + wd p)`.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), IdentError> {
    state.check_shapes(params)?;
    if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.dim() != p.dim()) {
        return Err(IdentError::Config("gradient blocks do not match the parameter blocks".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = flush(cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            *v = flush(cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let mh = *m / c1;
            let vh = *v / c2;
            *p = flush(*p - lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p));
        });
    }
    Ok(())
}

// Moments of parameters with vanishing gradients decay geometrically into the
// subnormal range, where matrix products slow down by orders of magnitude.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE { 0.0 } else { x }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 + cos(π e / E)) / 2` at epoch `e` of `E`.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if epochs > 0 => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
            LrSchedule::Cosine => base,
        }
    }
}
