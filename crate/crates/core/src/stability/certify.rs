use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{map_chunks, Mesh, StabilityError, DISSIPATION_TOL};
use crate::dynamics::{MetricField, PhSystem};
use crate::energy::{ConvexPrimitive, HybridEbm};

pub const CERTIFICATE_LABEL: &str = "data-restricted certificate";

/// Per-layer bounds: the largest norm over the mesh of each summand of the
/// reduced visible field (the first summand includes the visible bias).
pub fn gamma_bounds(m: &HybridEbm, mesh: &Mesh) -> Result<Vec<f64>, StabilityError> {
    m.check_conditions()?;
    check_mesh(m.visible_width(), mesh)?;
    let pts = mesh.points();
    let per_chunk = map_chunks::<_, StabilityError, _>(&pts, |_, x| {
        let s = m.field_summands_rows(&x)?;
        Ok(s.iter().map(max_row_norm).collect::<Vec<f64>>())
    })?;
    let k = per_chunk.first().map_or(0, Vec::len);
    Ok((0..k).map(|i| per_chunk.iter().map(|c| c[i]).fold(0.0, f64::max)).collect())
}

/// Bounds over the whole activation image, available for a visible-only
/// model and for one log-sum-exp hidden layer, where `‖b₁ + W₁₂p‖` is convex
/// in `p` and so peaks at a simplex vertex.
pub fn gamma_bounds_exact(m: &HybridEbm) -> Option<Vec<f64>> {
    let b1 = &m.biases()[0];
    match m.depth() {
        1 => Some(vec![b1.dot(b1).sqrt()]),
        2 if matches!(m.layers()[1].primitive, ConvexPrimitive::LogSumExp { .. }) => {
            let w = &m.weights()[0];
            let g = w
                .axis_iter(Axis(1))
                .map(|col| {
                    let v = &col + b1;
                    v.dot(&v).sqrt()
                })
                .fold(0.0, f64::max);
            Some(vec![g])
        }
        _ => None,
    }
}

pub fn expansion_radius(gamma: &[f64]) -> f64 {
    gamma.iter().sum()
}

/// `q_min` = smallest eigenvalue of the symmetric part, `q_max` = largest
/// spectral norm, both over the mesh.
pub fn metric_bounds(q: &MetricField, mesh: &Mesh) -> Result<(f64, f64), StabilityError> {
    if let MetricField::Identity = q {
        return Ok((1.0, 1.0));
    }
    if let Some(d) = q.dim() {
        check_mesh(d, mesh)?;
    }
    let pts = mesh.points();
    let parts = map_chunks::<_, StabilityError, _>(&pts, |_, x| {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for r in x.rows() {
            let m = q.eval(r.as_slice().expect("row"))?;
            let n = m.nrows();
            let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
            let sym = (&dm + dm.transpose()) * 0.5;
            lo = lo.min(SymmetricEigen::new(sym).eigenvalues.min());
            hi = hi.max(dm.singular_values().max());
        }
        Ok((lo, hi))
    })?;
    let q_min = parts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let q_max = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    if !(q_min > 0.0) {
        return Err(StabilityError::MetricNotPositive { q_min });
    }
    Ok((q_min, q_max))
}

pub fn ph_radius(r_ex: f64, q_min: f64, q_max: f64) -> f64 {
    (q_max / q_min) * r_ex
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryStats {
    pub radius: f64,
    pub samples: usize,
    pub inward_fraction: f64,
    pub max_inner_product: f64,
    pub passed: bool,
}

/// Uniform samples on the sphere of radius `r` (normalized standard normal
/// draws); counts points with `xᵀ f(x) ≤ 0`.
pub fn invariance_verify<F>(field_rows: F, dim: usize, r: f64, n: usize, seed: u64) -> Result<BoundaryStats, StabilityError>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>, StabilityError> + Sync,
{
    if !(r > 0.0) || n == 0 || dim == 0 {
        return Err(StabilityError::Argument(format!("need radius > 0 and samples >= 1, got {r} and {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<f64>::zeros((n, dim));
    for mut row in x.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row *= r / norm;
                break;
            }
        }
    }
    let parts = map_chunks::<_, StabilityError, _>(&x, |start, xc| {
        let f = field_rows(&xc)?;
        let inner = (&xc * &f).sum_axis(Axis(1));
        let mut inward = 0usize;
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in inner.iter().enumerate() {
            if !v.is_finite() {
                return Err(StabilityError::NonFinite { index: start + i, what: "boundary inner product".into() });
            }
            if v <= 0.0 {
                inward += 1;
            }
            max = max.max(v);
        }
        Ok((inward, max))
    })?;
    let inward: usize = parts.iter().map(|p| p.0).sum();
    let max = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(BoundaryStats {
        radius: r,
        samples: n,
        inward_fraction: inward as f64 / n as f64,
        max_inner_product: max,
        passed: inward == n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationReport {
    pub label: String,
    pub gamma: Vec<f64>,
    /// Bounds over the full activation image, when cheaply available.
    pub gamma_exact: Option<Vec<f64>>,
    pub r_ex: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub rho_ex: f64,
    pub mesh: Mesh,
    pub boundary_stats: BoundaryStats,
    pub model_hash: String,
    pub tool_version: String,
    pub dissipation_tolerance: f64,
    pub rollout_tolerance: String,
}

/// SHA-256 of the serialized model and metric.
pub fn model_hash(sys: &PhSystem) -> String {
    let doc = serde_json::json!({ "model": sys.model.to_doc(), "metric": sys.metric.to_doc() });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Full certificate: γ table, `r_ex`, metric bounds, `ρ_ex`, and boundary
/// sampling at `radius_factor · ρ_ex`.
pub fn certify(
    sys: &PhSystem,
    mesh: &Mesh,
    radius_factor: f64,
    samples: usize,
    seed: u64,
) -> Result<CertificationReport, StabilityError> {
    let gamma = gamma_bounds(&sys.model, mesh)?;
    let r_ex = expansion_radius(&gamma);
    let (q_min, q_max) = metric_bounds(&sys.metric, mesh)?;
    let rho_ex = ph_radius(r_ex, q_min, q_max);
    // a zero radius is trivially invariant; probe a unit sphere instead
    let radius = if rho_ex > 0.0 { radius_factor * rho_ex } else { radius_factor };
    let boundary_stats = invariance_verify(|x| Ok(sys.field_rows(x)?), sys.model.visible_width(), radius, samples, seed)?;
    Ok(CertificationReport {
        label: CERTIFICATE_LABEL.to_string(),
        gamma_exact: gamma_bounds_exact(&sys.model),
        gamma,
        r_ex,
        q_min,
        q_max,
        rho_ex,
        mesh: mesh.clone(),
        boundary_stats,
        model_hash: model_hash(sys),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dissipation_tolerance: DISSIPATION_TOL,
        rollout_tolerance: "10*dt^2*(1+|f|^2)".to_string(),
    })
}

fn check_mesh(dim: usize, mesh: &Mesh) -> Result<(), StabilityError> {
    mesh.validate()?;
    if mesh.dim() != dim {
        return Err(StabilityError::Mesh(format!("mesh has dimension {}, model {dim}", mesh.dim())));
    }
    Ok(())
}

fn max_row_norm(a: &Array2<f64>) -> f64 {
    a.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
}
