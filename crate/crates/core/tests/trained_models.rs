mod common;

use ebm_sysid::ident::{energy_grid, grid_local_minima};
use ebm_sysid::stability::Mesh;

use common::*;

#[test]
fn multi_well_energy_has_several_wells() {
    let sys = trained_checkpoint("multi_well").unwrap().system().unwrap();
    let mesh = Mesh::cube(2, -2.0, 2.0, 200).unwrap();
    let (pts, e) = energy_grid(&sys, &mesh).unwrap();
    let minima = grid_local_minima(&e, mesh.resolution);
    assert!(minima.len() >= 2, "{} minima", minima.len());
    for i in minima {
        assert!(pts[[i, 0]].abs() <= 2.0 && pts[[i, 1]].abs() <= 2.0);
    }
}

#[test]
fn shipped_checkpoints_match_their_configs() {
    for name in ["multi_well", "exotic"] {
        let cfg = shipped_config(name);
        let ck = trained_checkpoint(name).unwrap();
        let st = ck.training.as_ref().expect("training state");
        assert_eq!(st.epoch, cfg.train.epochs, "{name}");
        assert_eq!(st.seed, cfg.seed, "{name}");
        assert_eq!(st.curve.len(), cfg.train.epochs, "{name}");
        let sys = ck.system().unwrap();
        assert_eq!(sys.model.layers().len(), cfg.architecture.layers.len(), "{name}");
        let curve = std::fs::read_to_string(repo_root().join("artifacts").join(name).join("loss_curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), cfg.train.epochs + 1, "{name}");
    }
}
