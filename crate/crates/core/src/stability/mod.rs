//! Dissipation checks, growth classification and the invariance certificate.

mod certify;
mod dissipation;
mod growth;

pub use certify::{
    certify, expansion_radius, gamma_bounds, gamma_bounds_exact, invariance_verify, metric_bounds, model_hash,
    ph_radius, BoundaryStats, CertificationReport, CERTIFICATE_LABEL,
};
pub use dissipation::{
    dissipation_check, nudge_kinks, trajectory_monotonicity, DissipationReport, MonotonicityReport,
    DISSIPATION_TOL,
};
pub use growth::{growth_classify, GrowthSubject, GrowthVerdict, RayProbe};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::energy::EnergyError;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("metric is not positive on the mesh (q_min = {q_min:e})")]
    MetricNotPositive { q_min: f64 },
    #[error("non-finite value at sample {index}: {what}")]
    NonFinite { index: usize, what: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Regular grid over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mesh {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: usize,
}

impl Mesh {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, resolution: usize) -> Result<Self, StabilityError> {
        let m = Mesh { lo, hi, resolution };
        m.validate()?;
        Ok(m)
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64, resolution: usize) -> Result<Self, StabilityError> {
        Self::new(vec![lo; dim], vec![hi; dim], resolution)
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(StabilityError::Mesh("lo and hi must be non-empty and of equal length".into()));
        }
        if self.resolution < 2 {
            return Err(StabilityError::Mesh(format!("resolution must be at least 2, got {}", self.resolution)));
        }
        for (d, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return Err(StabilityError::Mesh(format!("dimension {d}: need finite lo < hi, got [{l}, {h}]")));
            }
        }
        self.resolution
            .checked_pow(self.dim() as u32)
            .ok_or_else(|| StabilityError::Mesh("too many mesh points".into()))?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate values along dimension `d`.
    pub fn axis(&self, d: usize) -> Vec<f64> {
        let n = self.resolution;
        (0..n)
            .map(|i| self.lo[d] + (self.hi[d] - self.lo[d]) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// All points, one per row, the first coordinate varying slowest.
    pub fn points(&self) -> Array2<f64> {
        let d = self.dim();
        let axes: Vec<Vec<f64>> = (0..d).map(|k| self.axis(k)).collect();
        let n = self.len();
        let r = self.resolution;
        Array2::from_shape_fn((n, d), |(i, k)| {
            let stride = r.pow((d - 1 - k) as u32);
            axes[k][(i / stride) % r]
        })
    }
}

/// Rows per work unit for parallel sweeps. Fixed so results do not depend on
/// the number of threads.
pub(crate) const CHUNK: usize = 1024;

/// Apply `f` to fixed-size row chunks in parallel and return the results in
/// chunk order.
pub(crate) fn map_chunks<T, E, F>(x: &Array2<f64>, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, Array2<f64>) -> Result<T, E> + Sync,
{
    let n = x.nrows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    starts
        .into_par_iter()
        .map(|s| {
            let e = (s + CHUNK).min(n);
            f(s, x.slice(ndarray::s![s..e, ..]).to_owned())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_counts() {
        let m = Mesh::cube(2, -2.0, 2.0, 200).unwrap();
        assert_eq!(m.len(), 40_000);
        let p = Mesh::cube(2, -2.0, 2.0, 2).unwrap().points();
        assert_eq!(p, ndarray::array![[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]]);
    }

    #[test]
    fn mesh_rejects_bad_boxes() {
        assert!(Mesh::cube(2, 1.0, 1.0, 10).is_err());
        assert!(Mesh::cube(2, -1.0, 1.0, 1).is_err());
        assert!(Mesh::new(vec![0.0], vec![1.0, 2.0], 3).is_err());
    }
}
