//! Radial unboundedness of the energy for power activations: the `q < 2`
//! rule against ray probes, with the fitted growth exponents.

use ebm_sysid::dynamics::RecurrentEbm;
use ebm_sysid::energy::ConvexPrimitive;
use ebm_sysid::stability::{growth_classify, GrowthSubject};
use ndarray::{array, Array1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // one positive eigenvalue so the escape direction exists for q > 2
    let w = array![[1.5, 0.2, 0.0], [0.2, -0.7, 0.1], [0.0, 0.1, -0.4]];
    println!("   q  rule       probes     E_Ham slope (want)   E_Quad slope (want)");
    for q in [1.2, 1.5, 1.8, 2.5, 3.0] {
        let m = RecurrentEbm::new(w.clone(), Array1::zeros(3), ConvexPrimitive::power(q)?)?;
        let v = growth_classify(&GrowthSubject::Recurrent(m), 3)?;
        println!(
            "{q:>4}  {:<9}  {:<9}  {:>6.3} ({:.3})       {:>6.3} ({:.3})",
            if v.radially_unbounded { "grow" } else { "escape" },
            if v.empirical_escape { "escape" } else if v.empirical_unbounded { "grow" } else { "unclear" },
            v.ham_slope.unwrap_or(f64::NAN),
            v.expected_ham_slope,
            v.quad_slope.unwrap_or(f64::NAN),
            v.expected_quad_slope
        );
    }
    Ok(())
}
