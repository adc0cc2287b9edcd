use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adamw_step, dataset_loss, grad_params, set_system_params, system_params, AdamConfig, Batch, Dataset, FieldWeighting,
    IdentError, LossParts, LrSchedule, OptimizerDoc, OptimizerState, TrajData,
};
use crate::dynamics::{fmt17, MetricDoc, MetricField, PhSystem};
use crate::energy::{HybridEbm, ModelDoc};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_field: f64,
    pub lambda_rollout: f64,
    pub lambda_reg: f64,
    pub rollout_steps: usize,
    pub dt: f64,
    /// Full passes over the training trajectories.
    pub epochs: usize,
    /// Target samples per batch; batches hold whole trajectories.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weighting: FieldWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_field: 1.0,
            lambda_rollout: 0.1,
            lambda_reg: 1e-5,
            rollout_steps: 5,
            dt: 0.01,
            epochs: 1000,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weighting: FieldWeighting::Uniform,
        }
    }
}

impl TrainConfig {
    /// Loss weights non-negative and `dt > 0`; enough to evaluate a loss.
    pub fn validate_terms(&self) -> Result<(), IdentError> {
        for (k, v) in [("lambda_field", self.lambda_field), ("lambda_rollout", self.lambda_rollout), ("lambda_reg", self.lambda_reg)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IdentError::Config(format!("{k} must be >= 0, got {v}")));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(IdentError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// Full training validation; the field weight must be positive.
    pub fn validate(&self) -> Result<(), IdentError> {
        self.validate_terms()?;
        if !(self.lambda_field > 0.0) {
            return Err(IdentError::Config("lambda_field must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(IdentError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(IdentError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(IdentError::Config("need 0 <= beta1, beta2 < 1 and adam_eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(IdentError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: OptimizerDoc,
    pub curve: Vec<CurveRow>,
}

/// Model, metric and (optionally) optimizer state in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: ModelDoc,
    pub metric: MetricDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn of(sys: &PhSystem, training: Option<TrainingState>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: sys.model.to_doc(),
            metric: sys.metric.to_doc(),
            training,
        }
    }

    pub fn system(&self) -> Result<PhSystem, IdentError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(IdentError::Data(format!("unsupported checkpoint format_version {}", self.format_version)));
        }
        Ok(PhSystem::new(HybridEbm::from_doc(&self.model)?, MetricField::from_doc(&self.metric)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, IdentError> {
        serde_json::from_str(s).map_err(|e| IdentError::Data(format!("checkpoint: {e}")))
    }
}

pub fn write_curve<W: Write>(rows: &[CurveRow], w: W) -> Result<(), IdentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "test_loss"])?;
    for r in rows {
        out.write_record([r.epoch.to_string(), fmt17(r.train_loss), fmt17(r.test_loss)])?;
    }
    out.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub system: PhSystem,
    pub state: TrainingState,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::of(&self.system, Some(self.state.clone()))
    }

    pub fn final_losses(&self) -> Option<CurveRow> {
        self.state.curve.last().copied()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

fn eval_split(sys: &PhSystem, trajs: Vec<&TrajData>, cfg: &TrainConfig) -> Result<f64, IdentError> {
    if trajs.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(dataset_loss(sys, trajs, cfg)?.total)
}

/// Train and test loss of `sys` on `ds`, with one rollout window from each
/// initial state.
pub fn split_losses(sys: &PhSystem, ds: &Dataset, cfg: &TrainConfig) -> Result<(LossParts, Option<LossParts>), IdentError> {
    let tr = dataset_loss(sys, ds.train(), cfg)?;
    let te = if ds.meta.test_trajectories.is_empty() { None } else { Some(dataset_loss(sys, ds.test(), cfg)?) };
    Ok((tr, te))
}

/// Shuffled mini-batch AdamW over whole training trajectories. Each batch
/// also draws one random rollout window per trajectory. Epoch `e` uses its
/// own random stream, so a resumed run matches an uninterrupted one bit for
/// bit. `on_epoch` sees each finished epoch with its resumable checkpoint.
pub fn train(
    mut sys: PhSystem,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainingState>,
    mut on_epoch: impl FnMut(&CurveRow, &Checkpoint),
) -> Result<TrainOutcome, IdentError> {
    cfg.validate()?;
    if (cfg.dt - ds.meta.config.dt).abs() > 1e-15 {
        return Err(IdentError::Config(format!(
            "train.dt = {} differs from the dataset dt = {}",
            cfg.dt, ds.meta.config.dt
        )));
    }
    if ds.meta.train_trajectories.is_empty() {
        return Err(IdentError::Data("no training trajectories".into()));
    }
    let mut params = system_params(&sys);
    let (mut opt, mut curve, first) = match resume {
        Some(st) => {
            if st.seed != seed {
                return Err(IdentError::Config(format!("checkpoint was trained with seed {}, got {seed}", st.seed)));
            }
            let o = OptimizerState::from_doc(&st.optimizer)?;
            o.check_shapes(&params)?;
            (o, st.curve, st.epoch)
        }
        None => (OptimizerState::zeros_like(&params), Vec::new(), 0),
    };
    let per_batch = (cfg.batch_size / (ds.meta.config.steps + 1)).max(1);
    let adam = cfg.adam();
    let mut last_good = Checkpoint::of(
        &sys,
        Some(TrainingState { epoch: first, seed, optimizer: opt.to_doc(), curve: curve.clone() }),
    );
    let abort = |epoch: usize, reason: String, last_good: &Checkpoint| IdentError::Training {
        epoch,
        reason,
        last_good: Box::new(last_good.clone()),
    };
    for epoch in first..cfg.epochs {
        let mut rng = epoch_rng(seed, epoch);
        let mut order = ds.meta.train_trajectories.clone();
        order.shuffle(&mut rng);
        let lr = cfg.lr_schedule.at(cfg.learning_rate, epoch, cfg.epochs);
        for ids in order.chunks(per_batch) {
            let trajs: Vec<&TrajData> = ids.iter().map(|&i| &ds.trajectories[i]).collect();
            let starts: Vec<Option<usize>> = trajs
                .iter()
                .map(|t| (cfg.rollout_steps > 0 && t.len() > cfg.rollout_steps).then(|| rng.random_range(0..t.len() - cfg.rollout_steps)))
                .collect();
            let batch = Batch::from_trajectories(&trajs, &starts, cfg.rollout_steps);
            let (value, grads) = grad_params(&sys, &batch, cfg).map_err(|e| abort(epoch, e.to_string(), &last_good))?;
            if !value.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(abort(epoch, "non-finite loss or gradient".into(), &last_good));
            }
            adamw_step(&mut opt, &mut params, &grads, &adam, lr)?;
            set_system_params(&mut sys, &params)?;
        }
        let train_loss = eval_split(&sys, ds.train().collect(), cfg).map_err(|e| abort(epoch, e.to_string(), &last_good))?;
        let test_loss = eval_split(&sys, ds.test().collect(), cfg).map_err(|e| abort(epoch, e.to_string(), &last_good))?;
        if !train_loss.is_finite() {
            return Err(abort(epoch, "non-finite training loss".into(), &last_good));
        }
        let row = CurveRow { epoch: epoch + 1, train_loss, test_loss };
        curve.push(row);
        last_good = Checkpoint::of(
            &sys,
            Some(TrainingState { epoch: epoch + 1, seed, optimizer: opt.to_doc(), curve: curve.clone() }),
        );
        on_epoch(&row, &last_good);
    }
    let state = TrainingState { epoch: cfg.epochs.max(first), seed, optimizer: opt.to_doc(), curve };
    Ok(TrainOutcome { system: sys, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LearnedPsd;
    use crate::energy::{ConvexPrimitive, LayerSpec};
    use crate::ident::{generate_dataset, GenConfig, GroundTruth, Potential};

    fn setup() -> (PhSystem, Dataset) {
        let g = GroundTruth::new(Potential::multi_well(), MetricField::FixedSinCos, -1.0).unwrap();
        let ds = generate_dataset(&g, &GenConfig { trajectories: 20, ..GenConfig::default() }, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = HybridEbm::random(
            vec![LayerSpec::new(2, ConvexPrimitive::Quadratic), LayerSpec::new(8, ConvexPrimitive::softmax())],
            true,
            &mut rng,
        )
        .unwrap();
        let q = MetricField::LearnedPsd(LearnedPsd::random(2, 4, 0.1, 2.0, 1.0, &mut rng).unwrap());
        (PhSystem::new(m, q).unwrap(), ds)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, learning_rate: 1e-2, batch_size: 44, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (s, ds) = setup();
        let out = train(s.clone(), &ds, &cfg(0), 0, None, |_, _| {}).unwrap();
        assert_eq!(out.system, s);
        assert!(out.state.curve.is_empty());
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let (s, ds) = setup();
        let a = train(s.clone(), &ds, &cfg(5), 3, None, |_, _| {}).unwrap();
        let b = train(s.clone(), &ds, &cfg(5), 3, None, |_, _| {}).unwrap();
        assert_eq!(a.state.curve, b.state.curve);
        let first = dataset_loss(&s, ds.train(), &cfg(5)).unwrap().total;
        assert!(a.state.curve.last().unwrap().train_loss < first);
    }

    #[test]
    fn resume_matches_straight_run() {
        let (s, ds) = setup();
        let straight = train(s.clone(), &ds, &cfg(4), 9, None, |_, _| {}).unwrap();
        let half = train(s, &ds, &TrainConfig { epochs: 2, ..cfg(4) }, 9, None, |_, _| {}).unwrap();
        // round-trip through JSON as the CLI does
        let ck = Checkpoint::from_json(&half.checkpoint().to_json()).unwrap();
        let sys = ck.system().unwrap();
        let rest = train(sys, &ds, &cfg(4), 9, ck.training, |_, _| {}).unwrap();
        assert_eq!(rest.system, straight.system);
        assert_eq!(rest.state, straight.state);
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let (s, _) = setup();
        let ck = Checkpoint::of(&s, None);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.system().unwrap(), s);
        assert!(Checkpoint::from_json("{\"format_version\": 1}").is_err());
    }

    #[test]
    fn curve_csv_shape() {
        let mut buf = Vec::new();
        write_curve(&[CurveRow { epoch: 1, train_loss: 0.5, test_loss: 0.25 }], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("epoch,train_loss,test_loss\n1,5.0000000000000000e-1,"));
    }

    #[test]
    fn mismatched_dt_rejected() {
        let (s, ds) = setup();
        let c = TrainConfig { dt: 0.02, ..cfg(1) };
        assert!(matches!(train(s, &ds, &c, 0, None, |_, _| {}), Err(IdentError::Config(_))));
    }

    #[test]
    fn divergent_training_keeps_last_good() {
        let (s, ds) = setup();
        let c = TrainConfig { learning_rate: 1e6, ..cfg(30) };
        match train(s, &ds, &c, 0, None, |_, _| {}) {
            Err(IdentError::Training { last_good, .. }) => {
                let sys = last_good.system().unwrap();
                assert!(system_params(&sys).iter().all(|b| b.iter().all(|v| v.is_finite())));
            }
            Ok(o) => assert!(o.state.curve.iter().all(|r| r.train_loss.is_finite())),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
