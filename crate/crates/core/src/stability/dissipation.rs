use serde::{Deserialize, Serialize};

use super::StabilityError;
use crate::dynamics::Trajectory;

/// Largest admissible sampled Lie derivative.
pub const DISSIPATION_TOL: f64 = 1e-10;
const KINK_RADIUS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub samples: usize,
    pub max_lie_derivative: f64,
    /// `(sample index, Lie derivative)` of every sample above the tolerance.
    pub violations: Vec<(usize, f64)>,
    /// Indices of samples moved off a kink before evaluation.
    pub nudged: Vec<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Move coordinates within `1e-9` of zero to `±1e-9` so that `|·|^p`
/// primitives are differentiable there. Returns the indices touched.
pub fn nudge_kinks(samples: &mut [Vec<f64>]) -> Vec<usize> {
    let mut touched = Vec::new();
    for (i, s) in samples.iter_mut().enumerate() {
        let mut hit = false;
        for v in s.iter_mut() {
            if v.abs() < KINK_RADIUS {
                *v = if v.is_sign_negative() { -KINK_RADIUS } else { KINK_RADIUS };
                hit = true;
            }
        }
        if hit {
            touched.push(i);
        }
    }
    touched
}

/// Sampled Lie derivative `∇E(x)ᵀ f(x)`; passes iff every value is at most
/// [`DISSIPATION_TOL`].
pub fn dissipation_check<G, F>(
    energy_grad: G,
    field: F,
    samples: &[Vec<f64>],
    nudge: bool,
) -> Result<DissipationReport, StabilityError>
where
    G: Fn(&[f64]) -> Result<Vec<f64>, StabilityError>,
    F: Fn(&[f64]) -> Result<Vec<f64>, StabilityError>,
{
    let mut pts = samples.to_vec();
    let nudged = if nudge { nudge_kinks(&mut pts) } else { vec![] };
    let mut max = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for (i, x) in pts.iter().enumerate() {
        let g = energy_grad(x)?;
        let f = field(x)?;
        let lie: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        if !lie.is_finite() {
            return Err(StabilityError::NonFinite { index: i, what: "Lie derivative".into() });
        }
        max = max.max(lie);
        if lie > DISSIPATION_TOL {
            violations.push((i, lie));
        }
    }
    Ok(DissipationReport {
        samples: pts.len(),
        max_lie_derivative: max,
        passed: violations.is_empty(),
        violations,
        nudged,
        tolerance: DISSIPATION_TOL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub steps: usize,
    /// Steps where `E(x_{k+1}) > E(x_k) + tol_k`.
    pub violations: Vec<usize>,
    /// Largest `E(x_{k+1}) − E(x_k) − tol_k`.
    pub max_excess: f64,
    pub passed: bool,
}

impl MonotonicityReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            1.0 - self.violations.len() as f64 / self.steps as f64
        }
    }
}

/// Discrete energy decrease with slack `10·dt²·(1 + ‖f(x_k)‖²)`. Field values
/// come from the trajectory, or from state differences when absent.
pub fn trajectory_monotonicity<E>(energy: E, traj: &Trajectory) -> Result<MonotonicityReport, StabilityError>
where
    E: Fn(&[f64]) -> Result<f64, StabilityError>,
{
    let n = traj.len();
    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    let mut prev = match traj.states.first() {
        Some(x) => energy(x)?,
        None => f64::NAN,
    };
    for k in 0..n.saturating_sub(1) {
        let dt = traj.times[k + 1] - traj.times[k];
        let f2: f64 = match &traj.fields {
            Some(f) => f[k].iter().map(|v| v * v).sum(),
            None => traj.states[k + 1].iter().zip(&traj.states[k]).map(|(a, b)| ((a - b) / dt).powi(2)).sum(),
        };
        let tol = 10.0 * dt * dt * (1.0 + f2);
        let next = energy(&traj.states[k + 1])?;
        let excess = next - prev - tol;
        if !excess.is_finite() {
            return Err(StabilityError::NonFinite { index: k + 1, what: "energy".into() });
        }
        max_excess = max_excess.max(excess);
        if excess > 0.0 {
            violations.push(k);
        }
        prev = next;
    }
    Ok(MonotonicityReport { steps: n.saturating_sub(1), passed: violations.is_empty(), violations, max_excess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_euler;

    fn half_sq(x: &[f64]) -> Result<f64, StabilityError> {
        Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn leak_lie_derivative() {
        let r = dissipation_check(|x| Ok(x.to_vec()), |x| Ok(x.iter().map(|v| -v).collect()), &[vec![1.0, 1.0]], false)
            .unwrap();
        assert_eq!(r.max_lie_derivative, -2.0);
        assert!(r.passed);
    }

    #[test]
    fn expanding_field_fails() {
        let r = dissipation_check(|x| Ok(x.to_vec()), |x| Ok(x.to_vec()), &[vec![0.0, 0.0], vec![1.0, 0.0]], false).unwrap();
        assert!(!r.passed);
        assert_eq!(r.violations, vec![(1, 1.0)]);
    }

    #[test]
    fn kinks_are_nudged() {
        let mut s = vec![vec![0.0, 1.0], vec![0.5, -0.0], vec![0.3, 0.3]];
        assert_eq!(nudge_kinks(&mut s), vec![0, 1]);
        assert_eq!(s[1][1], -1e-9);
    }

    #[test]
    fn constant_trajectory_passes() {
        let tr = integrate_euler(|x| Ok(vec![0.0; x.len()]), &[1.0, 2.0], 0.01, 20).unwrap();
        assert!(trajectory_monotonicity(half_sq, &tr).unwrap().passed);
    }

    #[test]
    fn leak_strictly_decreases() {
        let tr = integrate_euler(|x| Ok(x.iter().map(|v| -v).collect()), &[3.0, 4.0], 0.01, 500).unwrap();
        let r = trajectory_monotonicity(half_sq, &tr).unwrap();
        assert!(r.passed);
        let e: Vec<f64> = tr.states.iter().map(|x| half_sq(x).unwrap()).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]));
    }
}
