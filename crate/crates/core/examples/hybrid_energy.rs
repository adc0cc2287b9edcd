//! A two-layer hybrid EBM: energy, the full visible field against the
//! reduced closed form, and the Legendre identity for the softmax primitive.

use ebm_sysid::dynamics::{visible_field, visible_field_reduced};
use ebm_sysid::energy::{activation, conjugate_numeric, primitive_value, ConvexPrimitive, HybridEbm, LayerSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layers = vec![
        LayerSpec::new(2, ConvexPrimitive::Quadratic),
        LayerSpec::new(16, ConvexPrimitive::softmax()),
        LayerSpec::new(8, ConvexPrimitive::power(3.0)?),
    ];
    let m = HybridEbm::random(layers, true, &mut rng)?;
    m.check_conditions()?;
    println!("{} parameters over {} layers", m.num_params(), m.depth());

    for x in [[0.5, -0.25], [1.5, 1.0], [-2.0, 0.1]] {
        let full = visible_field(&m, &x)?;
        let red = visible_field_reduced(&m, &x)?;
        let gap = full.iter().zip(&red).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("x = {x:?}  E = {:+.5}  f = [{:+.5}, {:+.5}]  |full - reduced| = {gap:.1e}", m.energy(&x)?, red[0], red[1]);
    }

    // F*(∇F(x)) = xᵀ∇F(x) − F(x)
    let p = ConvexPrimitive::softmax();
    let x = [0.4, -0.3, 1.1];
    let y = activation(&p, &x)?;
    let closed = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() - primitive_value(&p, &x)?;
    let numeric = conjugate_numeric(&p, &y, 50.0)?;
    println!("softmax conjugate: closed form {closed:.8}  numeric sup {numeric:.8}");
    Ok(())
}
