//! Absorbing-ball certificate for an untrained model with a learned metric:
//! per-layer bounds, expansion radius, metric bounds and boundary sampling.

use ebm_sysid::dynamics::PhSystem;
use ebm_sysid::ident::{init_system, Architecture, MetricSpec};
use ebm_sysid::stability::{certify, ph_radius, Mesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sys: PhSystem = init_system(&Architecture::exotic(), &MetricSpec::learned(), &mut rng)?;
    let mesh = Mesh::cube(2, -2.0, 2.0, 81)?;
    let cert = certify(&sys, &mesh, 1.01, 20_000, 0)?;

    for (h, g) in cert.gamma.iter().enumerate() {
        println!("gamma_{}  {g:.6}", h + 1);
    }
    println!("r_ex     {:.6}", cert.r_ex);
    println!("q_min    {:.6}\nq_max    {:.6}  (ratio {:.3})", cert.q_min, cert.q_max, cert.q_max / cert.q_min);
    println!("rho_ex   {:.6}", cert.rho_ex);
    assert_eq!(cert.rho_ex, ph_radius(cert.r_ex, cert.q_min, cert.q_max));
    let b = &cert.boundary_stats;
    println!(
        "sphere r = {:.4}: {} samples, inward fraction {}, max x.f {:.3e}  [{}]",
        b.radius,
        b.samples,
        b.inward_fraction,
        b.max_inner_product,
        if b.passed { "PASS" } else { "FAIL" }
    );
    println!("{}", cert.label);
    Ok(())
}
