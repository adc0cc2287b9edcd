//! End-to-end identification: sample a ground-truth system, fit a hybrid EBM
//! with a learned metric, and report losses and attractor agreement.
//!
//! cargo run --release --example identify -- [multi_well|exotic] [epochs]

use ebm_sysid::cli::RunConfig;
use ebm_sysid::ident::{evaluate, generate_dataset, init_system, train, TrainConfig};
use ebm_sysid::stability::Mesh;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    ebm_sysid::fpmode::install_flushing_pool(0);
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first().map(String::as_str) {
        Some("exotic") => RunConfig::exotic(),
        _ => RunConfig::multi_well(),
    };
    cfg.train = TrainConfig { epochs: args.get(1).map_or(Ok(150), |s| s.parse())?, ..cfg.train };

    let truth = cfg.system.build()?;
    let ds = generate_dataset(&truth, &cfg.data, cfg.seed)?;
    println!(
        "{}: {} samples, {}/{} trajectories",
        truth.potential.name(),
        ds.meta.samples,
        ds.meta.train_trajectories.len(),
        ds.meta.test_trajectories.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sys = init_system(&cfg.architecture, &cfg.metric, &mut rng)?;
    let every = (cfg.train.epochs / 10).max(1);
    let out = train(sys, &ds, &cfg.train, cfg.seed, None, |row, _| {
        if row.epoch % every == 0 {
            println!("epoch {:>5}  train {:.5}  test {:.5}", row.epoch, row.train_loss, row.test_loss);
        }
    })?;

    let mesh = Mesh::cube(2, cfg.data.lo, cfg.data.hi, 41)?;
    let ev = evaluate(&out.system, &ds, &cfg.train, &cfg.eval, &mesh, cfg.seed)?;
    let r = &ev.report;
    println!("final train {:.5}  test {:.5}", r.train.total, r.test.as_ref().map_or(f64::NAN, |t| t.total));
    println!("field cosine similarity {:.4}", r.cosine_similarity);
    println!(
        "{} of {} paired trajectories settle in the same well ({} true minima)",
        r.attractors.agreeing,
        r.attractors.pairs,
        r.attractors.minima.len()
    );
    Ok(())
}
