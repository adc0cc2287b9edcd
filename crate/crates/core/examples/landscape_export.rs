//! Energy landscape and vector fields on a grid, plus paired true/learned
//! trajectories, as CSV files ready for contour and quiver plots.
//!
//! cargo run --release --example landscape_export -- [checkpoint.json] [out_dir]

use std::fs::File;
use std::path::PathBuf;

use ebm_sysid::cli::RunConfig;
use ebm_sysid::ident::{
    energy_grid, field_grid, grid_local_minima, init_system, pair_starts, paired_trajectories, write_grid, write_pairs,
    Checkpoint,
};
use ebm_sysid::stability::Mesh;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::multi_well();
    let sys = match args.first() {
        Some(p) => Checkpoint::from_json(&std::fs::read_to_string(p)?)?.system()?,
        None => init_system(&cfg.architecture, &cfg.metric, &mut ChaCha8Rng::seed_from_u64(0))?,
    };
    let dir = PathBuf::from(args.get(1).map_or("landscape", String::as_str));
    std::fs::create_dir_all(&dir)?;

    let truth = cfg.system.build()?;
    let mesh = Mesh::cube(2, -2.5, 2.5, 51)?;
    let (pts, e) = energy_grid(&sys, &mesh)?;
    let minima = grid_local_minima(&e, mesh.resolution);
    write_grid(File::create(dir.join("energy.csv"))?, &["x", "y", "energy"], &pts, &e.view().insert_axis(Axis(1)).to_owned())?;
    let (_, fl) = field_grid(&mesh, |x| Ok(sys.field_rows(x)?))?;
    write_grid(File::create(dir.join("field_learned.csv"))?, &["x", "y", "fx", "fy"], &pts, &fl)?;
    let (_, ft) = field_grid(&mesh, |x| truth.field_rows(x))?;
    write_grid(File::create(dir.join("field_true.csv"))?, &["x", "y", "fx", "fy"], &pts, &ft)?;

    let starts = pair_starts(-2.0, 2.0, 12, 0);
    let pairs = paired_trajectories(&truth, &sys, &starts, 0.01, 1500)?;
    write_pairs(File::create(dir.join("pairs.csv"))?, &pairs)?;

    println!("{} grid points, {} discrete energy minima", pts.nrows(), minima.len());
    for i in minima {
        println!("  ({:+.2}, {:+.2})  E = {:.4}", pts[[i, 0]], pts[[i, 1]], e[i]);
    }
    println!("wrote energy.csv, field_learned.csv, field_true.csv, pairs.csv to {}", dir.display());
    Ok(())
}
