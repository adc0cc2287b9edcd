use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::StabilityError;
use crate::dynamics::RecurrentEbm;
use crate::energy::{ConvexPrimitive, HybridEbm};

const RAYS: usize = 16;
/// Probe radii `10^1 .. 10^4`, four per decade.
fn radii() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powf(1.0 + k as f64 / 4.0)).collect()
}

#[derive(Clone, Debug)]
pub enum GrowthSubject {
    Recurrent(RecurrentEbm),
    Hybrid(HybridEbm),
}

/// Energy values along one probe ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayProbe {
    pub direction: Vec<f64>,
    pub radii: Vec<f64>,
    pub energy: Vec<f64>,
    pub escape_ray: bool,
}

impl RayProbe {
    fn finite(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.radii.iter().copied().zip(self.energy.iter().copied()).filter(|(_, e)| e.is_finite())
    }

    /// Energy grows and ends positive.
    pub fn grows(&self) -> bool {
        let v: Vec<_> = self.finite().collect();
        match (v.first(), v.last()) {
            (Some(a), Some(b)) if v.len() >= 2 => b.1 > a.1 && b.1 > 0.0,
            _ => self.energy.contains(&f64::INFINITY),
        }
    }

    /// Energy decreases and ends negative.
    pub fn escapes(&self) -> bool {
        let v: Vec<_> = self.finite().collect();
        match (v.first(), v.last()) {
            (Some(a), Some(b)) if v.len() >= 2 => b.1 < a.1 && b.1 < 0.0,
            _ => self.energy.contains(&f64::NEG_INFINITY),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthVerdict {
    pub q: f64,
    /// Symbolic rule `q < 2`.
    pub radially_unbounded: bool,
    /// Whether the rule's hypotheses hold (positive eigenvalue, no zero entries).
    pub conditions_met: bool,
    pub notes: Vec<String>,
    /// Mean fitted log-log slope of `E_Ham` along the random rays.
    pub ham_slope: Option<f64>,
    /// Mean fitted log-log slope of `|E_Quad|` along the random rays.
    pub quad_slope: Option<f64>,
    pub expected_ham_slope: f64,
    pub expected_quad_slope: f64,
    /// Every probe ray grows to `+∞`.
    pub empirical_unbounded: bool,
    /// Some probe ray (typically the top-eigenvector ray) falls to `−∞`.
    pub empirical_escape: bool,
    /// Non-finite energies seen at probe radii.
    pub non_finite_probes: usize,
    pub rays: Vec<RayProbe>,
}

impl GrowthVerdict {
    pub fn agrees(&self) -> bool {
        self.radially_unbounded == self.empirical_unbounded && self.radially_unbounded != self.empirical_escape
    }
}

fn slope(ts: &[f64], vs: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(vs)
        .filter(|(_, v)| v.is_finite() && v.abs() > 0.0)
        .map(|(t, v)| (t.ln(), v.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `(E_Quad, E_Ham)` at each row.
fn parts(s: &GrowthSubject, x: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>), StabilityError> {
    match s {
        GrowthSubject::Hybrid(m) => Ok(m.energy_parts_rows(x)?),
        GrowthSubject::Recurrent(r) => {
            let p = r.primitive;
            let psi = p.activation_rows(x);
            let quad = -0.5 * (&psi.dot(&r.w) * &psi).sum_axis(ndarray::Axis(1));
            let ham = ((x - &r.b) * &psi).sum_axis(ndarray::Axis(1)) - p.value_rows(x);
            Ok((quad, ham))
        }
    }
}

/// Preimage direction of `u` under the activation, so that `Ψ(t v) ∝ u`.
fn preimage_dir(p: &ConvexPrimitive, u: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = match *p {
        ConvexPrimitive::PowerNorm { q } => u.iter().map(|x| x.signum() * x.abs().powf(1.0 / (q - 1.0))).collect(),
        _ => u.to_vec(),
    };
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Symbolic `q < 2` verdict plus empirical ray probes and slope fits.
pub fn growth_classify(subject: &GrowthSubject, seed: u64) -> Result<GrowthVerdict, StabilityError> {
    let mut notes = Vec::new();
    let (q, n, w, primitive) = match subject {
        GrowthSubject::Recurrent(r) => (r.primitive.growth_exponent(), r.dim(), r.w.clone(), r.primitive),
        GrowthSubject::Hybrid(m) => {
            notes.push(
                "hybrid model: the rule covers fully recurrent single-primitive models; the assembled block-tridiagonal W has zero blocks"
                    .to_string(),
            );
            let p = m.layers()[0].primitive;
            (p.growth_exponent(), m.visible_width(), Array2::zeros((m.visible_width(), m.visible_width())), p)
        }
    };
    let mut conditions_met = matches!(subject, GrowthSubject::Recurrent(_));
    let wm = DMatrix::from_fn(n, n, |i, j| w[[i, j]]);
    let eig = SymmetricEigen::new(wm);
    let (top, lmax) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    if conditions_met {
        if !(lmax > 0.0) {
            conditions_met = false;
            notes.push(format!("W has no positive eigenvalue (max {lmax:e})"));
        }
        if w.iter().any(|&v| v == 0.0) {
            conditions_met = false;
            notes.push("W has zero entries".to_string());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<(Vec<f64>, bool)> = (0..RAYS)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (v.iter().map(|x| x / nv).collect(), false)
        })
        .collect();
    if lmax > 0.0 {
        let u: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        dirs.push((preimage_dir(&primitive, &u), true));
    }

    let rs = radii();
    let mut rays = Vec::with_capacity(dirs.len());
    let mut ham_slopes = Vec::new();
    let mut quad_slopes = Vec::new();
    let mut non_finite = 0;
    for (d, escape) in dirs {
        let x = Array2::from_shape_fn((rs.len(), n), |(i, k)| rs[i] * d[k]);
        let (quad, ham) = parts(subject, &x).unwrap_or_else(|_| {
            (Array1::from_elem(rs.len(), f64::NAN), Array1::from_elem(rs.len(), f64::NAN))
        });
        let energy: Vec<f64> = (&quad + &ham).to_vec();
        non_finite += energy.iter().filter(|e| !e.is_finite()).count();
        if !escape {
            if let Some(s) = slope(&rs, ham.as_slice().expect("contiguous")) {
                ham_slopes.push(s);
            }
            if let Some(s) = slope(&rs, quad.as_slice().expect("contiguous")) {
                quad_slopes.push(s);
            }
        }
        rays.push(RayProbe { direction: d, radii: rs.clone(), energy, escape_ray: escape });
    }
    if non_finite > 0 {
        notes.push(format!("{non_finite} probe energies were non-finite (counted as divergence evidence)"));
    }
    Ok(GrowthVerdict {
        q,
        radially_unbounded: q < 2.0,
        conditions_met,
        notes,
        ham_slope: mean(&ham_slopes),
        quad_slope: mean(&quad_slopes),
        expected_ham_slope: q,
        expected_quad_slope: 2.0 * (q - 1.0),
        empirical_unbounded: rays.iter().all(RayProbe::grows),
        empirical_escape: rays.iter().any(RayProbe::escapes),
        non_finite_probes: non_finite,
        rays,
    })
}
