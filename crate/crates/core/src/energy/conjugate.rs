use ndarray::{Array1, ArrayView1};

use super::{ConvexPrimitive, EnergyError};

const MAX_ITERS: usize = 200_000;

/// `F*(y) = sup_{‖x‖ ≤ R} xᵀy − F(x)` by projected gradient ascent with
/// backtracking, from several starts. Fails if the best maximizer sits on the
/// ball boundary.
pub fn conjugate_numeric(p: &ConvexPrimitive, y: &[f64], search_radius: f64) -> Result<f64, EnergyError> {
    p.validate()?;
    if !(search_radius > 0.0) {
        return Err(EnergyError::RadiusTooSmall { radius: search_radius });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(EnergyError::NonFiniteInput { index: i });
    }
    let y = ArrayView1::from(y);
    let n = y.len();
    let ny = y.dot(&y).sqrt();
    let mut starts = vec![Array1::zeros(n)];
    if ny > 0.0 {
        starts.push(y.mapv(|v| 0.5 * search_radius * v / ny));
        starts.push(y.mapv(|v| -0.5 * search_radius * v / ny));
    }
    let mut best: Option<(f64, Array1<f64>)> = None;
    for s in starts {
        let (val, x) = ascend(p, y, s, search_radius);
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((val, x));
        }
    }
    let (val, x) = best.expect("at least one start");
    if x.dot(&x).sqrt() >= search_radius * (1.0 - 1e-9) {
        return Err(EnergyError::RadiusTooSmall { radius: search_radius });
    }
    Ok(val)
}

fn objective(p: &ConvexPrimitive, y: ArrayView1<f64>, x: &Array1<f64>) -> f64 {
    x.dot(&y) - p.value(x.view())
}

fn project(mut x: Array1<f64>, r: f64) -> Array1<f64> {
    let n = x.dot(&x).sqrt();
    if n > r {
        x *= r / n;
    }
    x
}

fn ascend(p: &ConvexPrimitive, y: ArrayView1<f64>, mut x: Array1<f64>, r: f64) -> (f64, Array1<f64>) {
    let mut val = objective(p, y, &x);
    let mut step = 1.0;
    for _ in 0..MAX_ITERS {
        let g = &y - &p.activation(x.view());
        let gn2 = g.dot(&g);
        if gn2.sqrt() <= 1e-13 * (1.0 + y.dot(&y).sqrt()) {
            break;
        }
        let mut moved = false;
        while step > 1e-300 {
            let cand = project(&x + &(step * &g), r);
            let cv = objective(p, y, &cand);
            let d = &cand - &x;
            // Armijo condition for the projected step
            if cv >= val + 1e-4 * g.dot(&d) && d.iter().any(|&v| v != 0.0) {
                moved = cv > val || d.dot(&d) > 0.0;
                x = cand;
                val = cv;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        step *= 2.0;
    }
    (val, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_self_conjugate() {
        let v = conjugate_numeric(&ConvexPrimitive::Quadratic, &[3.0, 4.0], 100.0).unwrap();
        assert!((v - 12.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn power_norm_closed_form() {
        let v = conjugate_numeric(&ConvexPrimitive::PowerNorm { q: 1.5 }, &[1.0], 50.0).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn log_sum_exp_negative_entropy() {
        let v = conjugate_numeric(&ConvexPrimitive::softmax(), &[0.5, 0.5], 50.0).unwrap();
        assert!((v + 2f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn boundary_maximizer_rejected() {
        // the maximizer of xy - x²/2 at y = 10 is x = 10, outside a ball of radius 2
        let e = conjugate_numeric(&ConvexPrimitive::Quadratic, &[10.0], 2.0);
        assert_eq!(e, Err(EnergyError::RadiusTooSmall { radius: 2.0 }));
    }

    #[test]
    fn grid_search_agrees() {
        let p = ConvexPrimitive::PowerNorm { q: 1.5 };
        let y = 0.7;
        let grid = (0..=200_000)
            .map(|i| -10.0 + 20.0 * i as f64 / 200_000.0)
            .map(|x: f64| x * y - x.abs().powf(1.5) / 1.5)
            .fold(f64::NEG_INFINITY, f64::max);
        let v = conjugate_numeric(&p, &[y], 10.0).unwrap();
        assert!((v - grid).abs() < 1e-8, "{v} vs {grid}");
    }
}
