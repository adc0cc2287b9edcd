use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::DynamicsError;
use crate::diffengine::Tape;
use crate::energy::ConvexPrimitive;

const SYMMETRY_TOL: f64 = 1e-12;

/// Single-layer fully recurrent model `ẋ = −x + WΨ(x) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentEbm {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub primitive: ConvexPrimitive,
}

impl RecurrentEbm {
    pub fn new(w: Array2<f64>, b: Array1<f64>, primitive: ConvexPrimitive) -> Result<Self, DynamicsError> {
        let n = b.len();
        if w.dim() != (n, n) {
            return Err(DynamicsError::Shape(format!("W is {:?}, b has length {n}", w.dim())));
        }
        let dev = (&w - &w.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > SYMMETRY_TOL {
            return Err(DynamicsError::Asymmetric { max_deviation: dev });
        }
        primitive.validate()?;
        Ok(RecurrentEbm { w, b, primitive })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.dim() {
            return Err(DynamicsError::Shape(format!("state has length {}, model {}", x.len(), self.dim())));
        }
        Ok(())
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check(x)?;
        let xv = ArrayView1::from(x);
        let psi = self.primitive.activation(xv);
        Ok((self.w.dot(&psi) + &self.b - xv).to_vec())
    }

    /// `−½ΨᵀWΨ + (x − b)ᵀΨ − F(x)`.
    pub fn energy(&self, x: &[f64]) -> Result<f64, DynamicsError> {
        self.check(x)?;
        let xv = ArrayView1::from(x);
        let psi = self.primitive.activation(xv);
        Ok(-0.5 * psi.dot(&self.w.dot(&psi)) + (&xv - &self.b).dot(&psi) - self.primitive.value(xv))
    }

    /// `∇E` by reverse mode on a recording of [`RecurrentEbm::energy`].
    pub fn energy_gradient(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check(x)?;
        let n = self.dim();
        let mut t = Tape::new();
        let xv = t.row("x", x);
        let w = t.constant(self.w.clone());
        let b = t.constant(self.b.clone().insert_axis(Axis(0)));
        let psi = self.primitive.record_activation(&mut t, xv);
        let wpsi = t.matvec(w, psi)?;
        let quad = t.dot(psi, wpsi)?;
        let quad = t.scale(quad, -0.5);
        let shifted = t.sub(xv, b)?;
        let lin = t.dot(shifted, psi)?;
        let f = self.primitive.record_value(&mut t, xv);
        let e = t.add(quad, lin)?;
        let e = t.sub(e, f)?;
        let g = t.gradients(e, &[xv])?.remove(0);
        debug_assert_eq!(g.len(), n);
        Ok(g.into_iter().collect())
    }
}

/// `−x + WΨ(x) + b` for a symmetric `W`.
pub fn recurrent_field(
    w: &Array2<f64>,
    b: &[f64],
    p: &ConvexPrimitive,
    x: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    RecurrentEbm::new(w.clone(), Array1::from_vec(b.to_vec()), *p)?.field(x)
}
