//! AdamW with decoupled weight decay on the Rosenbrock valley.

use ebm_sysid::ident::{adamw_step, AdamConfig, LrSchedule, OptimizerState};
use ndarray::{array, Array2};

fn rosenbrock(p: &Array2<f64>) -> (f64, Array2<f64>) {
    let (x, y) = (p[[0, 0]], p[[0, 1]]);
    let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
    let g = array![[-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)]];
    (f, g)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = 5000;
    for decay in [0.0, 1e-2] {
        let cfg = AdamConfig { weight_decay: decay, ..AdamConfig::default() };
        let mut params = vec![array![[-1.5, 2.0]]];
        let mut state = OptimizerState::zeros_like(&params);
        for e in 0..epochs {
            let (_, g) = rosenbrock(&params[0]);
            let lr = LrSchedule::Cosine.at(0.05, e, epochs);
            adamw_step(&mut state, &mut params, &[g], &cfg, lr)?;
        }
        let (f, _) = rosenbrock(&params[0]);
        println!("weight decay {decay:<5} -> ({:.5}, {:.5})  f = {f:.3e}", params[0][[0, 0]], params[0][[0, 1]]);
    }
    Ok(())
}
