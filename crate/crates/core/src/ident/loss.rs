use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{IdentError, TrainConfig, TrajData};
use crate::diffengine::{Tape, Var};
use crate::dynamics::{MetricField, MetricVars, PhSystem};
use crate::energy::ModelVars;
use crate::stability::map_chunks;

/// Rows per reverse-mode tape when splitting a batch.
const FIELD_CHUNK: usize = 128;
const ROLLOUT_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldWeighting {
    /// `w(x) = 1`
    #[default]
    Uniform,
    /// `w(x) = 1 / (1 + ‖f*(x)‖)`
    InverseNorm,
}

impl FieldWeighting {
    fn weights(self, targets: &Array2<f64>) -> Option<Array1<f64>> {
        match self {
            FieldWeighting::Uniform => None,
            FieldWeighting::InverseNorm => {
                Some(targets.rows().into_iter().map(|r| 1.0 / (1.0 + r.dot(&r).sqrt())).collect())
            }
        }
    }
}

/// Field samples plus rollout windows: `rollout_targets[k]` holds the true
/// states `k + 1` steps after each start.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub targets: Array2<f64>,
    pub starts: Array2<f64>,
    pub rollout_targets: Vec<Array2<f64>>,
}

impl Batch {
    pub fn field_only(states: Array2<f64>, targets: Array2<f64>) -> Self {
        let d = states.ncols();
        Batch { states, targets, starts: Array2::zeros((0, d)), rollout_targets: vec![] }
    }

    /// Every sample of the given trajectories; a rollout window of `k` steps
    /// from `starts[i]` when given and when the trajectory is long enough.
    pub fn from_trajectories(trajs: &[&TrajData], starts: &[Option<usize>], k: usize) -> Self {
        let n: usize = trajs.iter().map(|t| t.len()).sum();
        let mut states = Array2::zeros((n, 2));
        let mut targets = Array2::zeros((n, 2));
        let mut row = 0;
        for t in trajs {
            states.slice_mut(s![row..row + t.len(), ..]).assign(&t.states);
            targets.slice_mut(s![row..row + t.len(), ..]).assign(&t.fields);
            row += t.len();
        }
        let windows: Vec<(&TrajData, usize)> = if k == 0 {
            vec![]
        } else {
            trajs
                .iter()
                .zip(starts)
                .filter_map(|(t, s)| s.filter(|&s| s + k < t.len()).map(|s| (*t, s)))
                .collect()
        };
        let starts = Array2::from_shape_fn((windows.len(), 2), |(i, j)| windows[i].0.states[[windows[i].1, j]]);
        let rollout_targets = (1..=k)
            .map(|kk| Array2::from_shape_fn((windows.len(), 2), |(i, j)| windows[i].0.states[[windows[i].1 + kk, j]]))
            .collect();
        Batch { states, targets, starts, rollout_targets }
    }

    pub fn rollout_steps(&self) -> usize {
        self.rollout_targets.len()
    }
}

/// The loss terms before weighting, and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `mean_i w(x_i) ‖H(x_i) − f*(x_i)‖²`
    pub field: f64,
    /// Mean over starts of `(1/K) Σ_k ‖x̂_k − x*_k‖²`; zero without windows.
    pub rollout: f64,
    /// `‖θ‖²`
    pub reg: f64,
    pub total: f64,
}

/// Trainable blocks of the model followed by those of a learned metric.
pub fn system_params(sys: &PhSystem) -> Vec<Array2<f64>> {
    named_params(sys).into_iter().map(|(_, b)| b).collect()
}

pub fn named_params(sys: &PhSystem) -> Vec<(String, Array2<f64>)> {
    let mut out = sys.model.param_blocks();
    if let MetricField::LearnedPsd(l) = &sys.metric {
        out.extend(l.param_blocks());
    }
    out
}

pub fn set_system_params(sys: &mut PhSystem, blocks: &[Array2<f64>]) -> Result<(), IdentError> {
    let nm = sys.model.param_blocks().len();
    if blocks.len() < nm {
        return Err(IdentError::Config("too few parameter blocks".into()));
    }
    sys.model.set_param_blocks(&blocks[..nm])?;
    match &mut sys.metric {
        MetricField::LearnedPsd(l) => l.set_param_blocks(&blocks[nm..])?,
        _ if blocks.len() != nm => return Err(IdentError::Config("too many parameter blocks".into())),
        _ => {}
    }
    Ok(())
}

fn sq_norm(blocks: &[Array2<f64>]) -> f64 {
    blocks.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum()
}

fn check_cfg(cfg: &TrainConfig, batch: &Batch) -> Result<(), IdentError> {
    cfg.validate_terms()?;
    if batch.states.nrows() == 0 && batch.starts.nrows() == 0 {
        return Err(IdentError::Config("empty batch".into()));
    }
    if batch.states.dim() != batch.targets.dim() {
        return Err(IdentError::Config("batch states and targets differ in shape".into()));
    }
    Ok(())
}

fn first_bad(v: &Array1<f64>) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

/// Squared residual norms per row, with the optional weights applied.
fn field_residuals(sys: &PhSystem, batch: &Batch, w: &Option<Array1<f64>>) -> Result<Array1<f64>, IdentError> {
    let parts = map_chunks::<_, IdentError, _>(&batch.states, |start, x| {
        let h = sys.field_rows(&x)?;
        let f = batch.targets.slice(s![start..start + x.nrows(), ..]);
        let r = &h - &f;
        Ok((&r * &r).sum_axis(Axis(1)))
    })?;
    let mut all = ndarray::concatenate(Axis(0), &parts.iter().map(|a| a.view()).collect::<Vec<_>>())
        .unwrap_or_else(|_| Array1::zeros(0));
    if let Some(w) = w {
        all *= w;
    }
    Ok(all)
}

fn rollout_errors(sys: &PhSystem, batch: &Batch, dt: f64) -> Result<Array1<f64>, IdentError> {
    let k = batch.rollout_steps();
    let mut x = batch.starts.clone();
    let mut acc = Array1::zeros(x.nrows());
    for target in &batch.rollout_targets {
        let f = sys.field_rows(&x)?;
        x.scaled_add(dt, &f);
        let d = &x - target;
        acc += &(&d * &d).sum_axis(Axis(1));
    }
    Ok(acc / k as f64)
}

/// Composite loss evaluated without a tape.
pub fn loss(sys: &PhSystem, batch: &Batch, cfg: &TrainConfig) -> Result<LossParts, IdentError> {
    check_cfg(cfg, batch)?;
    let w = cfg.weighting.weights(&batch.targets);
    let res = field_residuals(sys, batch, &w)?;
    if let Some(i) = first_bad(&res) {
        return Err(IdentError::NonFiniteLoss { term: "field", index: i });
    }
    let field = if res.is_empty() { 0.0 } else { res.sum() / res.len() as f64 };
    let mut rollout = 0.0;
    let windows = batch.rollout_steps() > 0 && batch.starts.nrows() > 0;
    if windows {
        let e = rollout_errors(sys, batch, cfg.dt)?;
        if let Some(i) = first_bad(&e) {
            return Err(IdentError::NonFiniteLoss { term: "rollout", index: i });
        }
        rollout = e.sum() / e.len() as f64;
    }
    let reg = sq_norm(&system_params(sys));
    let mut total = cfg.lambda_field * field;
    if windows {
        total += cfg.lambda_rollout * rollout;
    }
    total += cfg.lambda_reg * reg;
    if !total.is_finite() {
        return Err(IdentError::NonFiniteLoss { term: "regularization", index: 0 });
    }
    Ok(LossParts { field, rollout, reg, total })
}

/// Loss over whole trajectories with one rollout window from each initial state.
pub fn dataset_loss<'a>(
    sys: &PhSystem,
    trajs: impl IntoIterator<Item = &'a TrajData>,
    cfg: &TrainConfig,
) -> Result<LossParts, IdentError> {
    let trajs: Vec<&TrajData> = trajs.into_iter().collect();
    let starts = vec![Some(0); trajs.len()];
    loss(sys, &Batch::from_trajectories(&trajs, &starts, cfg.rollout_steps), cfg)
}

fn record_params(sys: &PhSystem, t: &mut Tape) -> (ModelVars, Option<MetricVars>, Vec<Var>) {
    let mv = sys.model.record_params(t);
    let qv = match &sys.metric {
        MetricField::LearnedPsd(l) => Some(l.record_params(t)),
        _ => None,
    };
    let mut all = mv.all();
    if let Some(q) = &qv {
        all.extend(q.all());
    }
    (mv, qv, all)
}

fn record_field(sys: &PhSystem, t: &mut Tape, mv: &ModelVars, qv: Option<&MetricVars>, x: Var) -> Result<Var, IdentError> {
    let f = sys.model.record_reduced_field(t, mv, x)?;
    Ok(sys.metric.record_apply(t, qv, x, f)?)
}

type Task<'a> = Box<dyn Fn(&mut Tape, &ModelVars, Option<&MetricVars>) -> Result<Var, IdentError> + Send + Sync + 'a>;

/// Exact reverse-mode gradient of [`loss`] with respect to [`system_params`],
/// with the loss value. The batch is split into fixed chunks whose
/// contributions are summed in order, so results do not depend on threads.
pub fn grad_params(sys: &PhSystem, batch: &Batch, cfg: &TrainConfig) -> Result<(f64, Vec<Array2<f64>>), IdentError> {
    check_cfg(cfg, batch)?;
    let n = batch.states.nrows();
    let ns = batch.starts.nrows();
    let k = batch.rollout_steps();
    let w = cfg.weighting.weights(&batch.targets);
    let mut tasks: Vec<Task> = Vec::new();
    if n > 0 {
        let scale = cfg.lambda_field / n as f64;
        for a in (0..n).step_by(FIELD_CHUNK) {
            let b = (a + FIELD_CHUNK).min(n);
            let x = batch.states.slice(s![a..b, ..]).to_owned();
            let f = batch.targets.slice(s![a..b, ..]).to_owned();
            let wc = w.as_ref().map(|w| w.slice(s![a..b]).to_owned().insert_axis(Axis(1)));
            tasks.push(Box::new(move |t, mv, qv| {
                let xv = t.constant(x.clone());
                let h = record_field(sys, t, mv, qv, xv)?;
                let fv = t.constant(f.clone());
                let r = t.sub(h, fv)?;
                let sq = t.mul(r, r)?;
                let mut rs = t.row_sum(sq);
                if let Some(wc) = &wc {
                    let wv = t.constant(wc.clone());
                    rs = t.mul(rs, wv)?;
                }
                let sum = t.sum(rs);
                Ok(t.scale(sum, scale))
            }));
        }
    }
    if k > 0 && ns > 0 {
        let scale = cfg.lambda_rollout / (ns * k) as f64;
        let dt = cfg.dt;
        for a in (0..ns).step_by(ROLLOUT_CHUNK) {
            let b = (a + ROLLOUT_CHUNK).min(ns);
            let x0 = batch.starts.slice(s![a..b, ..]).to_owned();
            let targets: Vec<Array2<f64>> = batch.rollout_targets.iter().map(|r| r.slice(s![a..b, ..]).to_owned()).collect();
            tasks.push(Box::new(move |t, mv, qv| {
                let mut x = t.constant(x0.clone());
                let mut acc: Option<Var> = None;
                for target in &targets {
                    let h = record_field(sys, t, mv, qv, x)?;
                    let step = t.scale(h, dt);
                    x = t.add(x, step)?;
                    let tv = t.constant(target.clone());
                    let d = t.sub(x, tv)?;
                    let sq = t.mul(d, d)?;
                    let s = t.sum(sq);
                    acc = Some(match acc {
                        Some(a) => t.add(a, s)?,
                        None => s,
                    });
                }
                let acc = acc.expect("at least one rollout step");
                Ok(t.scale(acc, scale))
            }));
        }
    }
    let results: Vec<Result<(f64, Vec<Array2<f64>>), IdentError>> = tasks
        .par_iter()
        .map(|task| {
            let mut t = Tape::new();
            let (mv, qv, vars) = record_params(sys, &mut t);
            let out = task(&mut t, &mv, qv.as_ref())?;
            let v = t.scalar(out);
            Ok((v, t.gradients(out, &vars)?))
        })
        .collect();
    let params = system_params(sys);
    let mut grads: Vec<Array2<f64>> = params.iter().map(|p| p * (2.0 * cfg.lambda_reg)).collect();
    let mut value = cfg.lambda_reg * sq_norm(&params);
    let mut data = 0.0;
    for r in results {
        let (v, g) = r?;
        data += v;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    value += data;
    if !value.is_finite() {
        // locate the offending sample through the plain path
        loss(sys, batch, cfg)?;
        return Err(IdentError::NonFiniteLoss { term: "total", index: 0 });
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LearnedPsd;
    use crate::energy::{ConvexPrimitive, HybridEbm, LayerSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys(seed: u64, hidden_bias: bool, metric: &str) -> PhSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = HybridEbm::random(
            vec![
                LayerSpec::new(2, ConvexPrimitive::Quadratic),
                LayerSpec::new(6, ConvexPrimitive::softmax()),
                LayerSpec::new(4, ConvexPrimitive::PowerNorm { q: 3.0 }),
            ],
            hidden_bias,
            &mut rng,
        )
        .unwrap();
        m.visible_bias_mut().assign(&array![0.2, -0.1]);
        let q = match metric {
            "learned" => MetricField::LearnedPsd(LearnedPsd::random(2, 5, 0.1, 2.0, 1.0, &mut rng).unwrap()),
            "sincos" => MetricField::FixedSinCos,
            _ => MetricField::Identity,
        };
        PhSystem::new(m, q).unwrap()
    }

    fn traj(id: usize, x0: [f64; 2], n: usize) -> TrajData {
        let states = Array2::from_shape_fn((n, 2), |(i, j)| x0[j] * (1.0 - 0.05 * i as f64) + 0.01 * i as f64);
        let fields = states.mapv(|v| -v);
        TrajData { id, states, fields }
    }

    fn cfg() -> TrainConfig {
        TrainConfig { rollout_steps: 3, lambda_reg: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn single_residual_field_term() {
        let s = PhSystem::new(
            HybridEbm::zeros(vec![LayerSpec::new(2, ConvexPrimitive::Quadratic)], true).unwrap(),
            MetricField::Identity,
        )
        .unwrap();
        // H(x) = −x = (−1, 0); target (−2, 0) gives residual (1, 0)
        let b = Batch::field_only(array![[1.0, 0.0]], array![[-2.0, 0.0]]);
        let c = TrainConfig { lambda_rollout: 0.0, lambda_reg: 0.0, ..TrainConfig::default() };
        assert_eq!(loss(&s, &b, &c).unwrap().total, 1.0);
    }

    #[test]
    fn perfect_fit_zero_loss_and_gradient() {
        let s = sys(1, true, "learned");
        let x = array![[0.3, -0.4], [1.0, 1.5], [-1.2, 0.1]];
        let f = s.field_rows(&x).unwrap();
        let c = TrainConfig { lambda_rollout: 0.0, lambda_reg: 0.0, ..TrainConfig::default() };
        let b = Batch::field_only(x, f);
        assert_eq!(loss(&s, &b, &c).unwrap().total, 0.0);
        let (v, g) = grad_params(&s, &b, &c).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|b| b.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn reg_only_gradient_is_exact() {
        let s = sys(2, true, "learned");
        let t = traj(0, [0.5, 0.5], 6);
        let b = Batch::from_trajectories(&[&t], &[Some(0)], 3);
        let c = TrainConfig { lambda_field: 0.0, lambda_rollout: 0.0, lambda_reg: 0.25, ..cfg() };
        let (_, g) = grad_params(&s, &b, &c).unwrap();
        for (gi, p) in g.iter().zip(system_params(&s)) {
            assert_eq!(gi, &(&p * 0.5));
        }
    }

    #[test]
    fn tape_loss_matches_plain() {
        for metric in ["identity", "sincos", "learned"] {
            let s = sys(3, true, metric);
            let ts = [traj(0, [1.0, -0.5], 11), traj(1, [-1.5, 0.7], 11), traj(2, [0.2, 1.9], 4)];
            let refs: Vec<&TrajData> = ts.iter().collect();
            let b = Batch::from_trajectories(&refs, &[Some(2), Some(7), Some(0)], 3);
            assert_eq!(b.starts.nrows(), 3);
            let c = TrainConfig { weighting: FieldWeighting::InverseNorm, ..cfg() };
            let plain = loss(&s, &b, &c).unwrap().total;
            let (tape, _) = grad_params(&s, &b, &c).unwrap();
            assert!((plain - tape).abs() < 1e-12 * plain.abs().max(1.0), "{metric}: {plain} vs {tape}");
        }
    }

    #[test]
    fn short_trajectories_skip_rollout() {
        let t = traj(0, [1.0, 1.0], 3);
        let b = Batch::from_trajectories(&[&t], &[Some(0)], 5);
        assert_eq!(b.starts.nrows(), 0);
        assert_eq!(b.states.nrows(), 3);
    }

    #[test]
    fn zero_horizon_drops_rollout_term() {
        let s = sys(4, false, "learned");
        let t = traj(0, [1.0, 1.0], 8);
        let c0 = TrainConfig { rollout_steps: 0, ..cfg() };
        let l0 = loss(&s, &Batch::from_trajectories(&[&t], &[Some(0)], 0), &c0).unwrap();
        assert_eq!(l0.rollout, 0.0);
        assert_eq!(l0.total, c0.lambda_field * l0.field + c0.lambda_reg * l0.reg);
    }

    #[test]
    fn params_round_trip() {
        let mut s = sys(5, true, "learned");
        let p: Vec<_> = system_params(&s).iter().map(|b| b * 2.0).collect();
        set_system_params(&mut s, &p).unwrap();
        assert_eq!(system_params(&s), p);
        assert!(set_system_params(&mut s, &p[..2]).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        for (seed, metric) in [(6, "learned"), (7, "sincos")] {
            let s = sys(seed, true, metric);
            let ts = [traj(0, [1.0, -0.5], 7), traj(1, [-1.5, 0.7], 7)];
            let refs: Vec<&TrajData> = ts.iter().collect();
            let b = Batch::from_trajectories(&refs, &[Some(1), Some(3)], 3);
            let c = cfg();
            let (_, g) = grad_params(&s, &b, &c).unwrap();
            let p0 = system_params(&s);
            for (bi, block) in p0.iter().enumerate() {
                for idx in 0..block.len().min(12) {
                    let (r, cc) = (idx / block.ncols(), idx % block.ncols());
                    let h = 1e-6;
                    let eval = |d: f64| {
                        let mut p = p0.clone();
                        p[bi][[r, cc]] += d;
                        let mut s2 = s.clone();
                        set_system_params(&mut s2, &p).unwrap();
                        loss(&s2, &b, &c).unwrap().total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = g[bi][[r, cc]];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{metric} block {bi} ({r},{cc}): {an} vs {fd}");
                }
            }
        }
    }
}
