use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GroundTruth, IdentError, Potential};
use crate::dynamics::{fmt17, integrate_euler, DynamicsError, MetricDoc, MetricField};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Initial states are uniform in `[lo, hi]²`.
    pub lo: f64,
    pub hi: f64,
    pub trajectories: usize,
    pub steps: usize,
    pub dt: f64,
    pub train_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { lo: -2.0, hi: 2.0, trajectories: 2000, steps: 10, dt: 0.01, train_fraction: 0.8 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        let bad = |m: String| Err(IdentError::Config(m));
        if !(self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite()) {
            return bad(format!("initial box needs lo < hi, got [{}, {}]", self.lo, self.hi));
        }
        if self.trajectories == 0 || self.steps == 0 {
            return bad("trajectories and steps must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction must lie in [0, 1], got {}", self.train_fraction));
        }
        Ok(())
    }
}

/// Serializable ground-truth description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthDoc {
    pub potential: Potential,
    pub metric: MetricDoc,
    pub sign: f64,
}

impl GroundTruthDoc {
    pub fn of(g: &GroundTruth) -> Self {
        GroundTruthDoc { potential: g.potential, metric: g.metric.to_doc(), sign: g.sign }
    }

    pub fn build(&self) -> Result<GroundTruth, IdentError> {
        GroundTruth::new(self.potential, MetricField::from_doc(&self.metric)?, self.sign)
    }
}

/// JSON sidecar written next to the samples CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub ground_truth: GroundTruthDoc,
    pub config: GenConfig,
    pub samples: usize,
    pub train_trajectories: Vec<usize>,
    pub test_trajectories: Vec<usize>,
    /// Trajectories cut short by divergence.
    pub truncated: Vec<usize>,
    pub csv_sha256: String,
}

/// One sampled trajectory: states and ground-truth fields per step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajData {
    pub id: usize,
    pub states: Array2<f64>,
    pub fields: Array2<f64>,
}

impl TrajData {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Indexed by trajectory id.
    pub trajectories: Vec<TrajData>,
    pub meta: DatasetMeta,
}

/// Integrates the ground truth from uniform random starts and splits the
/// trajectories into train and test sets.
pub fn generate_dataset(truth: &GroundTruth, cfg: &GenConfig, seed: u64) -> Result<Dataset, IdentError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<[f64; 2]> =
        (0..cfg.trajectories).map(|_| [rng.random_range(cfg.lo..cfg.hi), rng.random_range(cfg.lo..cfg.hi)]).collect();
    let mut trajectories = Vec::with_capacity(cfg.trajectories);
    let mut truncated = Vec::new();
    for (id, x0) in starts.iter().enumerate() {
        let field = |x: &[f64]| truth.field(x).map_err(|e| DynamicsError::NonFinite(e.to_string()));
        let tr = match integrate_euler(field, x0, cfg.dt, cfg.steps) {
            Ok(tr) => tr,
            Err(DynamicsError::Diverged { partial, .. }) => {
                truncated.push(id);
                *partial
            }
            Err(e) => return Err(e.into()),
        };
        let fields = tr.fields.as_ref().expect("integrator records fields");
        let n = tr.len();
        trajectories.push(TrajData {
            id,
            states: Array2::from_shape_fn((n, 2), |(i, j)| tr.states[i][j]),
            fields: Array2::from_shape_fn((n, 2), |(i, j)| fields[i][j]),
        });
    }
    let mut ids: Vec<usize> = (0..cfg.trajectories).collect();
    ids.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * cfg.trajectories as f64).round() as usize;
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let mut ds = Dataset {
        trajectories,
        meta: DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            ground_truth: GroundTruthDoc::of(truth),
            config: cfg.clone(),
            samples: 0,
            train_trajectories: train,
            test_trajectories: test,
            truncated,
            csv_sha256: String::new(),
        },
    };
    ds.meta.samples = ds.trajectories.iter().map(TrajData::len).sum();
    ds.meta.csv_sha256 = hex::encode(Sha256::digest(ds.csv_bytes()?));
    Ok(ds)
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &TrajData> {
        self.meta.train_trajectories.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &TrajData> {
        self.meta.test_trajectories.iter().map(|&i| &self.trajectories[i])
    }

    pub fn truth(&self) -> Result<GroundTruth, IdentError> {
        self.meta.ground_truth.build()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), IdentError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "fx", "fy", "traj_id", "step"])?;
        for t in &self.trajectories {
            for k in 0..t.len() {
                out.write_record([
                    fmt17(t.states[[k, 0]]),
                    fmt17(t.states[[k, 1]]),
                    fmt17(t.fields[[k, 0]]),
                    fmt17(t.fields[[k, 1]]),
                    t.id.to_string(),
                    k.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>, IdentError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Reads samples and checks them against the sidecar: hash, counts,
    /// contiguous steps and a split that covers every trajectory once.
    pub fn read<R: Read>(csv_in: R, meta: DatasetMeta) -> Result<Self, IdentError> {
        let mut raw = Vec::new();
        let mut csv_in = csv_in;
        csv_in.read_to_end(&mut raw)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(IdentError::Data(format!("unsupported dataset format_version {}", meta.format_version)));
        }
        let digest = hex::encode(Sha256::digest(&raw));
        if digest != meta.csv_sha256 {
            return Err(IdentError::Data("samples CSV does not match the sidecar hash".into()));
        }
        let mut rd = csv::Reader::from_reader(raw.as_slice());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != ["x", "y", "fx", "fy", "traj_id", "step"] {
            return Err(IdentError::Data(format!("unexpected samples header {header:?}")));
        }
        let mut rows: BTreeMap<usize, Vec<(usize, [f64; 4])>> = BTreeMap::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| IdentError::Data(format!("row {}: bad {what}", line + 2));
            let mut v = [0.0f64; 4];
            for (j, slot) in v.iter_mut().enumerate() {
                *slot = rec.get(j).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("number"))?;
                if !slot.is_finite() {
                    return Err(bad("non-finite value"));
                }
            }
            let id: usize = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("traj_id"))?;
            let step: usize = rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
            rows.entry(id).or_default().push((step, v));
        }
        let n = meta.config.trajectories;
        if rows.len() != n || rows.keys().next_back().is_some_and(|&k| k + 1 != n) {
            return Err(IdentError::Data(format!("expected trajectories 0..{n}, found {}", rows.len())));
        }
        let mut trajectories = Vec::with_capacity(n);
        let mut total = 0;
        for (id, mut r) in rows {
            r.sort_by_key(|p| p.0);
            if r.iter().enumerate().any(|(k, p)| p.0 != k) {
                return Err(IdentError::Data(format!("trajectory {id} has missing or repeated steps")));
            }
            let len = r.len();
            total += len;
            trajectories.push(TrajData {
                id,
                states: Array2::from_shape_fn((len, 2), |(i, j)| r[i].1[j]),
                fields: Array2::from_shape_fn((len, 2), |(i, j)| r[i].1[2 + j]),
            });
        }
        if total != meta.samples {
            return Err(IdentError::Data(format!("sidecar lists {} samples, CSV has {total}", meta.samples)));
        }
        let mut seen = vec![false; n];
        for &i in meta.train_trajectories.iter().chain(&meta.test_trajectories) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(IdentError::Data(format!("split lists trajectory {i} twice or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(IdentError::Data("split does not cover every trajectory".into()));
        }
        Ok(Dataset { trajectories, meta })
    }
}
