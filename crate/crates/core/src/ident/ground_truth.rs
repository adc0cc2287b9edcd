use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::IdentError;
use crate::dynamics::MetricField;

/// Planar potentials used as identification targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `α(x² + βy²) + ω sin(γx) cos(y)`
    MultiWell { alpha: f64, beta: f64, omega: f64, gamma: f64 },
    /// `α(x² + y² − 1)² + ω sin(γx) cos(ζy) + ξ sin(x² − y²) + θ cos(ρxy) + δ(x²y − y³)`
    Exotic {
        alpha: f64,
        omega: f64,
        gamma: f64,
        zeta: f64,
        xi: f64,
        theta: f64,
        rho: f64,
        delta: f64,
    },
}

impl Potential {
    pub fn multi_well() -> Self {
        Potential::MultiWell { alpha: 0.5, beta: 1.0, omega: 1.0, gamma: 3.0 }
    }

    pub fn exotic() -> Self {
        Potential::Exotic { alpha: 1.0, omega: 0.5, gamma: 3.0, zeta: 3.0, xi: 0.3, theta: 0.3, rho: 2.0, delta: 0.2 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Potential::MultiWell { .. } => "multi_well",
            Potential::Exotic { .. } => "exotic",
        }
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Potential::MultiWell { alpha, beta, omega, gamma } => {
                vec![("alpha", alpha), ("beta", beta), ("omega", omega), ("gamma", gamma)]
            }
            Potential::Exotic { alpha, omega, gamma, zeta, xi, theta, rho, delta } => vec![
                ("alpha", alpha),
                ("omega", omega),
                ("gamma", gamma),
                ("zeta", zeta),
                ("xi", xi),
                ("theta", theta),
                ("rho", rho),
                ("delta", delta),
            ],
        }
    }

    /// Parameters must be finite and non-negative.
    pub fn validate(&self) -> Result<(), IdentError> {
        for (k, v) in self.params() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IdentError::Config(format!("potential parameter `{k}` must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Potential::MultiWell { alpha, beta, omega, gamma } => {
                alpha * (x * x + beta * y * y) + omega * (gamma * x).sin() * y.cos()
            }
            Potential::Exotic { alpha, omega, gamma, zeta, xi, theta, rho, delta } => {
                let r2 = x * x + y * y - 1.0;
                alpha * r2 * r2
                    + omega * (gamma * x).sin() * (zeta * y).cos()
                    + xi * (x * x - y * y).sin()
                    + theta * (rho * x * y).cos()
                    + delta * (x * x * y - y * y * y)
            }
        }
    }

    pub fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        match *self {
            Potential::MultiWell { alpha, beta, omega, gamma } => [
                2.0 * alpha * x + omega * gamma * (gamma * x).cos() * y.cos(),
                2.0 * alpha * beta * y - omega * (gamma * x).sin() * y.sin(),
            ],
            Potential::Exotic { alpha, omega, gamma, zeta, xi, theta, rho, delta } => {
                let r2 = x * x + y * y - 1.0;
                let c = (x * x - y * y).cos();
                let s = (rho * x * y).sin();
                [
                    4.0 * alpha * x * r2 + omega * gamma * (gamma * x).cos() * (zeta * y).cos() + 2.0 * xi * x * c
                        - theta * rho * y * s
                        + 2.0 * delta * x * y,
                    4.0 * alpha * y * r2 - omega * zeta * (gamma * x).sin() * (zeta * y).sin() - 2.0 * xi * y * c
                        - theta * rho * x * s
                        + delta * (x * x - 3.0 * y * y),
                ]
            }
        }
    }
}

/// Target dynamics `sign · Q(x) ∇V(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub potential: Potential,
    pub metric: MetricField,
    pub sign: f64,
}

impl GroundTruth {
    pub fn new(potential: Potential, metric: MetricField, sign: f64) -> Result<Self, IdentError> {
        potential.validate()?;
        if sign != 1.0 && sign != -1.0 {
            return Err(IdentError::Config(format!("field_sign must be +1 or -1, got {sign}")));
        }
        if let Some(d) = metric.dim() {
            if d != 2 {
                return Err(IdentError::Config(format!("ground-truth metric must be planar, got dimension {d}")));
            }
        }
        Ok(GroundTruth { potential, metric, sign })
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>, IdentError> {
        if x.len() != 2 {
            return Err(IdentError::Config(format!("ground truth is planar, got state of length {}", x.len())));
        }
        let g = self.potential.gradient(x[0], x[1]);
        let q = self.metric.eval(x)?;
        Ok(vec![
            self.sign * (q[[0, 0]] * g[0] + q[[0, 1]] * g[1]),
            self.sign * (q[[1, 0]] * g[0] + q[[1, 1]] * g[1]),
        ])
    }

    pub fn field_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>, IdentError> {
        if x.ncols() != 2 {
            return Err(IdentError::Config("ground truth is planar".into()));
        }
        let mut g = Array2::zeros(x.dim());
        for (i, r) in x.rows().into_iter().enumerate() {
            let d = self.potential.gradient(r[0], r[1]);
            g[[i, 0]] = self.sign * d[0];
            g[[i, 1]] = self.sign * d[1];
        }
        Ok(self.metric.apply_rows(x, &g)?)
    }
}
