#![allow(dead_code)]

use std::path::PathBuf;

use ebm_sysid::cli::RunConfig;
use ebm_sysid::dynamics::RecurrentEbm;
use ebm_sysid::energy::{ConvexPrimitive, HybridEbm, LayerSpec};
use ebm_sysid::ident::Checkpoint;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_config(name: &str) -> RunConfig {
    let p = repo_root().join("configs").join(format!("{name}.json"));
    RunConfig::parse(&std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).expect("config")
}

pub fn trained_checkpoint(name: &str) -> Result<Checkpoint, String> {
    let p = repo_root().join("artifacts").join(name).join("checkpoint.json");
    let s = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    Checkpoint::from_json(&s).map_err(|e| e.to_string())
}

/// Visible plane, a bounded first hidden layer and optionally a second one,
/// with random weights and nonzero hidden biases.
pub fn random_hybrid(rng: &mut ChaCha8Rng, dim: usize, max_width: usize) -> HybridEbm {
    let first = if rng.random_bool(0.5) { ConvexPrimitive::LogSumExp { beta: rng.random_range(0.5..2.0) } } else { ConvexPrimitive::LogCosh };
    let mut layers = vec![LayerSpec::new(dim, ConvexPrimitive::Quadratic), LayerSpec::new(rng.random_range(2..=max_width), first)];
    if rng.random_bool(0.6) {
        let p = match rng.random_range(0..4) {
            0 => ConvexPrimitive::PowerNorm { q: 3.0 },
            1 => ConvexPrimitive::LogCosh,
            2 => ConvexPrimitive::softmax(),
            _ => ConvexPrimitive::Quadratic,
        };
        layers.push(LayerSpec::new(rng.random_range(2..=max_width), p));
    }
    let mut m = HybridEbm::random(layers, true, rng).expect("model");
    for h in 0..m.depth() {
        if let Some(b) = m.hidden_bias_mut(h) {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    m.visible_bias_mut().mapv_inplace(|_| rng.random_range(-0.5..0.5));
    m.check_conditions().expect("compliant");
    m
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let a = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    (&a + &a.t()) * 0.5
}

pub fn random_recurrent(rng: &mut ChaCha8Rng, n: usize, p: ConvexPrimitive) -> RecurrentEbm {
    let b = Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5));
    RecurrentEbm::new(random_symmetric(rng, n), b, p).expect("symmetric")
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, r: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-r..r)).collect()).collect()
}

/// Extreme eigenvalues of the symmetric part and the spectral norm of a 2x2
/// matrix, in closed form.
pub fn bounds_2x2(m: &Array2<f64>) -> (f64, f64) {
    let (a, b, c, d) = (m[[0, 0]], m[[0, 1]], m[[1, 0]], m[[1, 1]]);
    let off = 0.5 * (b + c);
    let lam_min = 0.5 * (a + d) - (0.25 * (a - d).powi(2) + off * off).sqrt();
    let fro2 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let sigma = (0.5 * (fro2 + (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt())).sqrt();
    (lam_min, sigma)
}
