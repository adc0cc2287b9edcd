//! Reverse-mode gradients of a small energy program, checked against
//! central differences.

use ebm_sysid::diffengine::{backward, finite_difference_oracle, grad_close, record_scalar, Inputs, Program};
use ndarray::array;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Hopfield-style energy with a softmax layer: ½‖x‖² − lse(Wx)
    let program = Program::parse("(sub (scale 0.5 (dot x x)) (lse (matvec W x)))")?;
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), array![[0.3, -1.2, 0.7]]);
    inputs.insert("W".into(), array![[1.0, 0.2, -0.5], [0.0, -1.0, 0.4], [0.3, 0.3, 0.3], [-0.8, 0.1, 1.1]]);

    let rec = record_scalar(&program, &inputs)?;
    let grads = backward(&rec, &["x", "W"])?;
    let fd = finite_difference_oracle(&program, &inputs, 1e-6)?;

    println!("E = {:.6}  ({} tape nodes)", grads.value, rec.tape.len());
    for name in ["x", "W"] {
        let a = &grads.gradients[name];
        let r = &fd[name];
        let c = grad_close(a.as_slice().unwrap(), r.as_slice().unwrap(), 1e-6, 1e-10);
        println!("d/d{name}: max rel err {:.2e}  {}", c.max_rel, if c.passed { "ok" } else { "MISMATCH" });
    }
    println!("dE/dx = {}", grads.gradients["x"]);
    Ok(())
}
