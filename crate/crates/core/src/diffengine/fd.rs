//! Central finite differences, the reference every gradient is checked against.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::program::{Inputs, Program};
use super::DiffError;

/// Central-difference gradient of `f` with respect to each named input:
/// `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` per coordinate.
pub fn central_difference<F>(
    f: F,
    inputs: &Inputs,
    names: &[&str],
    step: f64,
) -> Result<BTreeMap<String, Array2<f64>>, DiffError>
where
    F: Fn(&Inputs) -> Result<f64, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::BadStep(step));
    }
    let mut work = inputs.clone();
    let mut out = BTreeMap::new();
    for &name in names {
        let base = inputs.get(name).ok_or_else(|| DiffError::UnknownInput(name.to_string()))?;
        let mut grad = Array2::zeros(base.dim());
        for (k, (idx, &x0)) in base.indexed_iter().enumerate() {
            let slot = work.get_mut(name).expect("cloned");
            slot[idx] = x0 + step;
            let fp = f(&work)?;
            let slot = work.get_mut(name).expect("cloned");
            slot[idx] = x0 - step;
            let fm = f(&work)?;
            work.get_mut(name).expect("cloned")[idx] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(DiffError::NonFinite { input: name.to_string(), index: k });
            }
            grad[idx] = (fp - fm) / (2.0 * step);
        }
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}

/// Finite-difference gradient of a program, using its tape-free evaluator.
pub fn finite_difference_oracle(
    program: &Program,
    inputs: &Inputs,
    step: f64,
) -> Result<BTreeMap<String, Array2<f64>>, DiffError> {
    let names = program.input_names();
    let names: Vec<&str> = names.iter().map(String::as_str).filter(|n| inputs.contains_key(*n)).collect();
    central_difference(|ins| program.evaluate_scalar(ins), inputs, &names, step)
}

/// Worst-case comparison of an analytic gradient against a reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|a - r| / max(|a|, |r|)`, ignoring coordinates
    /// whose absolute error is within the floor
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

/// Coordinates pass when `|a - r| <= abs_floor` or `|a - r| <= rel_tol * max(|a|, |r|)`.
pub fn grad_close(analytic: &[f64], reference: &[f64], rel_tol: f64, abs_floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), reference.len());
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut passed = true;
    for (&a, &r) in analytic.iter().zip(reference) {
        let err = (a - r).abs();
        max_abs = max_abs.max(err);
        if err <= abs_floor {
            continue;
        }
        let rel = err / a.abs().max(r.abs());
        max_rel = max_rel.max(rel);
        if !(rel <= rel_tol) {
            passed = false;
        }
    }
    GradCheck { max_rel, max_abs, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn half_norm_at_unit_vector() {
        let p = Program::parse("(scale 0.5 (dot x x))").unwrap();
        let ins: Inputs = [("x".to_string(), array![[1.0, 0.0]])].into();
        let g = finite_difference_oracle(&p, &ins, 1e-5).unwrap();
        assert!((g["x"][[0, 0]] - 1.0).abs() < 1e-8);
        assert!(g["x"][[0, 1]].abs() < 1e-8);
    }

    #[test]
    fn sine_at_zero() {
        let p = Program::parse("(sum (sin x))").unwrap();
        let ins: Inputs = [("x".to_string(), array![[0.0]])].into();
        let g = finite_difference_oracle(&p, &ins, 1e-5).unwrap();
        assert!((g["x"][[0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let p = Program::parse("(sum (log x))").unwrap();
        // only the second coordinate crosses zero under the perturbation
        let ins: Inputs = [("x".to_string(), array![[1.0, 1e-6]])].into();
        let err = finite_difference_oracle(&p, &ins, 1e-5).unwrap_err();
        assert_eq!(err, DiffError::NonFinite { input: "x".into(), index: 1 });
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Program::parse("(sum x)").unwrap();
        let ins: Inputs = [("x".to_string(), array![[1.0]])].into();
        assert!(matches!(finite_difference_oracle(&p, &ins, 0.0), Err(DiffError::BadStep(_))));
    }
}
