//! Small hyperparameter sweep: each grid point gets its own dataset, training
//! run and certificate, summarized in one CSV.

use ebm_sysid::cli::{expand_grid, run_sweep, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::multi_well();
    cfg.data.trajectories = 200;
    cfg.train.epochs = 20;
    cfg.certify.samples = 2000;
    cfg.mesh.resolution = 41;
    cfg.output_dir = std::env::temp_dir().join("ebm_sysid_sweep");

    let grid = r#"{"train.learning_rate": [0.001, 0.01], "train.lambda_rollout": [0.0, 0.1]}"#;
    println!("{} runs", expand_grid(grid).map_err(|e| e.message)?.len());
    let rows = run_sweep(&cfg, grid).map_err(|e| e.message)?;
    for r in rows {
        println!(
            "{:<50} {:<6} train {:.4}  test {:.4}  r_ex {:.3}  rho_ex {:.3}",
            r.overrides, r.status, r.train_loss, r.test_loss, r.r_ex, r.rho_ex
        );
    }
    println!("summary: {}", cfg.output_dir.join("sweep_summary.csv").display());
    Ok(())
}
