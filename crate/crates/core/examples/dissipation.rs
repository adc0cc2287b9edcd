//! Sampled energy dissipation for fully recurrent EBMs, one per primitive,
//! and discrete energy decrease along an Euler trajectory.

use ebm_sysid::dynamics::{integrate_euler, RecurrentEbm};
use ebm_sysid::energy::ConvexPrimitive;
use ebm_sysid::stability::{dissipation_check, trajectory_monotonicity};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(n: usize, p: ConvexPrimitive, rng: &mut ChaCha8Rng) -> RecurrentEbm {
    let a = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let w = (&a + &a.t()) * 0.5;
    let b = Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5));
    RecurrentEbm::new(w, b, p).expect("symmetric")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let primitives = [
        ConvexPrimitive::Quadratic,
        ConvexPrimitive::softmax(),
        ConvexPrimitive::power(1.5)?,
        ConvexPrimitive::power(3.0)?,
        ConvexPrimitive::LogCosh,
    ];
    let samples: Vec<Vec<f64>> = (0..2000).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    for p in primitives {
        let m = random_model(4, p, &mut rng);
        let r = dissipation_check(|x| Ok(m.energy_gradient(x)?), |x| Ok(m.field(x)?), &samples, true)?;
        println!(
            "{:<24} max dE/dt {:+.3e}  violations {}  nudged {}",
            format!("{p:?}"),
            r.max_lie_derivative,
            r.violations.len(),
            r.nudged.len()
        );
    }

    let m = random_model(4, ConvexPrimitive::softmax(), &mut rng);
    let traj = integrate_euler(|x| m.field(x), &[2.0, -1.0, 0.5, 1.5], 0.01, 500)?;
    let mono = trajectory_monotonicity(|x| Ok(m.energy(x)?), &traj)?;
    println!("euler rollout: {} steps, energy decrease holds on {:.1}%", mono.steps, 100.0 * mono.pass_fraction());
    Ok(())
}
