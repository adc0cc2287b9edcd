//! Ground-truth systems, datasets, training and evaluation.

mod dataset;
mod evaluate;
mod ground_truth;
mod loss;
mod optim;
mod train;

pub use dataset::{generate_dataset, Dataset, DatasetMeta, GenConfig, GroundTruthDoc, TrajData, DATASET_FORMAT_VERSION};
pub use evaluate::{
    attractor_agreement, cosine_similarity, energy_grid, evaluate, field_grid, grid_local_minima, local_minima, pair_starts,
    paired_trajectories, write_grid, write_pairs, AttractorStats, EvalConfig, EvalReport, Evaluation, PairedTrajectory,
};
pub use ground_truth::{GroundTruth, Potential};
pub use loss::{
    dataset_loss, grad_params, loss, named_params, set_system_params, system_params, Batch, FieldWeighting, LossParts,
};
pub use optim::{adamw_step, AdamConfig, LrSchedule, OptimizerDoc, OptimizerState};
pub use train::{
    split_losses, train, write_curve, Checkpoint, CurveRow, TrainConfig, TrainOutcome, TrainingState,
    CHECKPOINT_FORMAT_VERSION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, LearnedPsd, MetricField, PhSystem};
use crate::energy::{EnergyError, HybridEbm, LayerDoc};
use crate::stability::StabilityError;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("non-finite {term} loss at index {index}")]
    NonFiniteLoss { term: &'static str, index: usize },
    #[error("training aborted in epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Diff(#[from] crate::diffengine::DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer list of the hybrid model to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: Vec<LayerDoc>,
    #[serde(default = "yes")]
    pub hidden_bias: bool,
}

fn yes() -> bool {
    true
}

impl Architecture {
    fn layer(width: usize, kind: &str, params: &[(&str, f64)]) -> LayerDoc {
        LayerDoc {
            width,
            kind: kind.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Visible plane plus one softmax layer of width 128.
    pub fn multi_well() -> Self {
        Architecture {
            layers: vec![Self::layer(2, "quadratic", &[]), Self::layer(128, "log_sum_exp", &[("beta", 1.0)])],
            hidden_bias: true,
        }
    }

    /// Visible plane, softmax layer of width 512, power layer of width 128.
    pub fn exotic() -> Self {
        Architecture {
            layers: vec![
                Self::layer(2, "quadratic", &[]),
                Self::layer(512, "log_sum_exp", &[("beta", 1.0)]),
                Self::layer(128, "power_norm", &[("q", 3.0)]),
            ],
            hidden_bias: true,
        }
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<HybridEbm, IdentError> {
        let specs = self.layers.iter().map(LayerDoc::to_spec).collect::<Result<Vec<_>, _>>()?;
        let m = HybridEbm::random(specs, self.hidden_bias, rng)?;
        m.check_conditions()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    Identity,
    Sincos,
    Learned {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_b_scale")]
        b_scale: f64,
        #[serde(default = "default_c_scale")]
        c_scale: f64,
    },
}

fn default_hidden() -> usize {
    32
}
fn default_eps() -> f64 {
    0.1
}
fn default_b_scale() -> f64 {
    8.0
}
fn default_c_scale() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn learned() -> Self {
        MetricSpec::Learned { hidden: default_hidden(), eps: default_eps(), b_scale: default_b_scale(), c_scale: default_c_scale() }
    }

    pub fn build<R: Rng>(&self, dim: usize, rng: &mut R) -> Result<MetricField, IdentError> {
        Ok(match *self {
            MetricSpec::Identity => MetricField::Identity,
            MetricSpec::Sincos => MetricField::FixedSinCos,
            MetricSpec::Learned { hidden, eps, b_scale, c_scale } => {
                if hidden == 0 {
                    return Err(IdentError::Config("learned metric needs at least one hidden unit".into()));
                }
                MetricField::LearnedPsd(LearnedPsd::random(dim, hidden, eps, b_scale, c_scale, rng)?)
            }
        })
    }
}

/// Fresh model and metric; the model is drawn first from the same stream.
pub fn init_system<R: Rng>(arch: &Architecture, metric: &MetricSpec, rng: &mut R) -> Result<PhSystem, IdentError> {
    let m = arch.build(rng)?;
    let q = metric.build(m.visible_width(), rng)?;
    Ok(PhSystem::new(m, q)?)
}
