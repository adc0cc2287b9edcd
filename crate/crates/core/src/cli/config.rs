use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::MetricDoc;
use crate::ident::{Architecture, EvalConfig, GenConfig, GroundTruthDoc, LrSchedule, MetricSpec, Potential, TrainConfig};
use crate::stability::Mesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub radius_factor: f64,
    pub samples: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig { radius_factor: 1.01, samples: 100_000 }
    }
}

/// One JSON document describing a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: GroundTruthDoc,
    pub data: GenConfig,
    pub architecture: Architecture,
    pub metric: MetricSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub mesh: Mesh,
    pub certify: CertifyConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::multi_well()
    }
}

impl RunConfig {
    /// Multi-well system, one softmax layer, learned metric, 5000 epochs.
    pub fn multi_well() -> Self {
        RunConfig {
            system: GroundTruthDoc { potential: Potential::multi_well(), metric: MetricDoc::Sincos, sign: -1.0 },
            data: GenConfig::default(),
            architecture: Architecture::multi_well(),
            metric: MetricSpec::learned(),
            train: TrainConfig { learning_rate: 1e-2, lr_schedule: LrSchedule::Cosine, epochs: 5000, ..TrainConfig::default() },
            eval: EvalConfig::default(),
            mesh: Mesh::cube(2, -2.0, 2.0, 200).expect("valid mesh"),
            certify: CertifyConfig::default(),
            output_dir: PathBuf::from("runs/multi_well"),
            seed: 0,
        }
    }

    /// Ring potential, softmax plus power layer, learned metric, 1000 epochs.
    pub fn exotic() -> Self {
        RunConfig {
            system: GroundTruthDoc { potential: Potential::exotic(), metric: MetricDoc::Sincos, sign: -1.0 },
            architecture: Architecture::exotic(),
            output_dir: PathBuf::from("runs/exotic"),
            ..RunConfig::multi_well()
        }
        .with_epochs(1000)
    }

    fn with_epochs(mut self, epochs: usize) -> Self {
        self.train.epochs = epochs;
        self
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("line {} column {}: {e}", e.line(), e.column()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}
