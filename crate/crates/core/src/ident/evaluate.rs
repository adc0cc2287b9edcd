use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_losses, Dataset, GroundTruth, IdentError, LossParts, Potential, TrainConfig};
use crate::dynamics::{fmt17, integrate_euler, DynamicsError, PhSystem, Trajectory};
use crate::stability::{map_chunks, Mesh};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Paired trajectories started uniformly in the dataset box.
    pub pairs: usize,
    pub horizon_steps: usize,
    /// Distance to a minimum that counts as convergence.
    pub tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pairs: 100, horizon_steps: 3000, tolerance: 0.3 }
    }
}

/// Local minima of `V` found by gradient descent from a grid of starts
/// covering `[lo, hi]²`, deduplicated and checked for a positive Hessian.
pub fn local_minima(v: &Potential, lo: f64, hi: f64, per_axis: usize) -> Vec<[f64; 2]> {
    let mut found: Vec<[f64; 2]> = Vec::new();
    let step = (hi - lo) / (per_axis.max(2) - 1) as f64;
    for i in 0..per_axis.max(2) {
        for j in 0..per_axis.max(2) {
            let Some(m) = descend(v, [lo + i as f64 * step, lo + j as f64 * step]) else { continue };
            if !is_minimum(v, m) {
                continue;
            }
            if found.iter().all(|f| ((f[0] - m[0]).powi(2) + (f[1] - m[1]).powi(2)).sqrt() > 1e-5) {
                found.push(m);
            }
        }
    }
    found.sort_by(|a, b| a.partial_cmp(b).expect("finite minima"));
    found
}

/// Backtracking gradient descent until `‖∇V‖ < 1e-6`, then Newton steps on
/// the gradient down to `‖∇V‖ < 1e-10` (function values stop resolving
/// progress well before that).
fn descend(v: &Potential, mut x: [f64; 2]) -> Option<[f64; 2]> {
    let mut s = 0.1;
    for _ in 0..20_000 {
        let g = v.gradient(x[0], x[1]);
        let gn2 = g[0] * g[0] + g[1] * g[1];
        if gn2.sqrt() < 1e-6 {
            return newton(v, x);
        }
        let e = v.value(x[0], x[1]);
        loop {
            let y = [x[0] - s * g[0], x[1] - s * g[1]];
            if v.value(y[0], y[1]) <= e - 0.5 * s * gn2 {
                x = y;
                s *= 2.0;
                break;
            }
            s *= 0.5;
            if s < 1e-16 {
                return None;
            }
        }
        if !(x[0].is_finite() && x[1].is_finite()) || x[0].abs() > 1e6 || x[1].abs() > 1e6 {
            return None;
        }
    }
    None
}

fn newton(v: &Potential, mut x: [f64; 2]) -> Option<[f64; 2]> {
    for _ in 0..50 {
        let g = v.gradient(x[0], x[1]);
        if (g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-10 {
            return Some(x);
        }
        let [hxx, hxy, hyy] = hessian(v, x);
        let det = hxx * hyy - hxy * hxy;
        if !(det.abs() > 0.0) {
            return None;
        }
        x = [x[0] - (hyy * g[0] - hxy * g[1]) / det, x[1] - (hxx * g[1] - hxy * g[0]) / det];
    }
    None
}

/// Central differences of the analytic gradient: `[∂xx, ∂xy, ∂yy]`.
fn hessian(v: &Potential, x: [f64; 2]) -> [f64; 3] {
    let h = 1e-5;
    let gx = |dx: f64, dy: f64| v.gradient(x[0] + dx, x[1] + dy);
    let (a, b) = (gx(h, 0.0), gx(-h, 0.0));
    let (c, d) = (gx(0.0, h), gx(0.0, -h));
    let hxy = 0.5 * ((a[1] - b[1]) + (c[0] - d[0])) / (2.0 * h);
    [(a[0] - b[0]) / (2.0 * h), hxy, (c[1] - d[1]) / (2.0 * h)]
}

fn is_minimum(v: &Potential, x: [f64; 2]) -> bool {
    let [hxx, hxy, hyy] = hessian(v, x);
    hxx > 0.0 && hxx * hyy - hxy * hxy > 0.0
}

fn nearest(minima: &[[f64; 2]], x: &[f64]) -> Option<(usize, f64)> {
    minima
        .iter()
        .enumerate()
        .map(|(i, m)| (i, ((m[0] - x[0]).powi(2) + (m[1] - x[1]).powi(2)).sqrt()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"))
}

/// True and learned trajectories from one initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedTrajectory {
    pub truth: Trajectory,
    /// `None` when the learned run diverged.
    pub model: Option<Trajectory>,
}

pub fn paired_trajectories(
    truth: &GroundTruth,
    sys: &PhSystem,
    starts: &[[f64; 2]],
    dt: f64,
    steps: usize,
) -> Result<Vec<PairedTrajectory>, IdentError> {
    starts
        .iter()
        .map(|x0| {
            let t = integrate_euler(|x| truth.field(x).map_err(|e| DynamicsError::NonFinite(e.to_string())), x0, dt, steps)
                .or_else(|e| match e {
                    DynamicsError::Diverged { partial, .. } => Ok(*partial),
                    e => Err(e),
                })?;
            let m = match integrate_euler(|x| sys.field(x), x0, dt, steps) {
                Ok(m) => Some(m),
                Err(DynamicsError::Diverged { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(PairedTrajectory { truth: t, model: m })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractorStats {
    pub pairs: usize,
    pub agreeing: usize,
    pub fraction: f64,
    pub tolerance: f64,
    pub minima: Vec<[f64; 2]>,
}

/// Pairs whose two end states lie within `tol` of the same minimum.
pub fn attractor_agreement(pairs: &[PairedTrajectory], minima: &[[f64; 2]], tol: f64) -> AttractorStats {
    let agreeing = pairs
        .iter()
        .filter(|p| {
            let Some(m) = &p.model else { return false };
            match (nearest(minima, p.truth.last()), nearest(minima, m.last())) {
                (Some((i, di)), Some((j, dj))) => i == j && di <= tol && dj <= tol,
                _ => false,
            }
        })
        .count();
    AttractorStats {
        pairs: pairs.len(),
        agreeing,
        fraction: if pairs.is_empty() { 0.0 } else { agreeing as f64 / pairs.len() as f64 },
        tolerance: tol,
        minima: minima.to_vec(),
    }
}

/// Mean cosine similarity of learned and true fields over the mesh; points
/// where either field vanishes are skipped.
pub fn cosine_similarity(truth: &GroundTruth, sys: &PhSystem, mesh: &Mesh) -> Result<f64, IdentError> {
    let pts = mesh.points();
    let parts = map_chunks::<_, IdentError, _>(&pts, |_, x| {
        let a = truth.field_rows(&x)?;
        let b = sys.field_rows(&x)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            let d = ra.dot(&ra).sqrt() * rb.dot(&rb).sqrt();
            if d > 0.0 {
                sum += ra.dot(&rb) / d;
                n += 1;
            }
        }
        Ok((sum, n))
    })?;
    let (s, n) = parts.iter().fold((0.0, 0), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn energy_grid(sys: &PhSystem, mesh: &Mesh) -> Result<(Array2<f64>, Array1<f64>), IdentError> {
    let pts = mesh.points();
    let parts = map_chunks::<_, IdentError, _>(&pts, |_, x| Ok(sys.model.energy_rows(&x)?))?;
    let e = ndarray::concatenate(Axis(0), &parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("chunks");
    Ok((pts, e))
}

pub fn field_grid<F>(mesh: &Mesh, field_rows: F) -> Result<(Array2<f64>, Array2<f64>), IdentError>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>, IdentError> + Sync,
{
    let pts = mesh.points();
    let parts = map_chunks::<_, IdentError, _>(&pts, |_, x| field_rows(&x))?;
    let f = ndarray::concatenate(Axis(0), &parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("chunks");
    Ok((pts, f))
}

/// Interior grid points strictly below all eight neighbours, for a planar
/// mesh whose first coordinate varies slowest.
pub fn grid_local_minima(values: &Array1<f64>, res: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if res < 3 {
        return out;
    }
    for i in 1..res - 1 {
        for j in 1..res - 1 {
            let c = values[i * res + j];
            let lower = (-1i64..=1).all(|di| {
                (-1i64..=1).all(|dj| {
                    (di == 0 && dj == 0) || c < values[(i as i64 + di) as usize * res + (j as i64 + dj) as usize]
                })
            });
            if lower {
                out.push(i * res + j);
            }
        }
    }
    out
}

pub fn write_grid<W: Write>(w: W, header: &[&str], pts: &Array2<f64>, values: &Array2<f64>) -> Result<(), IdentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for (p, v) in pts.rows().into_iter().zip(values.rows()) {
        out.write_record(p.iter().chain(v.iter()).map(|&x| fmt17(x)))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pairs<W: Write>(w: W, pairs: &[PairedTrajectory]) -> Result<(), IdentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pair", "step", "t", "x_true", "y_true", "x_model", "y_model"])?;
    for (i, p) in pairs.iter().enumerate() {
        let n = p.truth.len().max(p.model.as_ref().map_or(0, Trajectory::len));
        let dt = p.truth.times.get(1).copied().unwrap_or(0.0);
        for k in 0..n {
            let t = p.truth.states.get(k);
            let m = p.model.as_ref().and_then(|m| m.states.get(k));
            let cell = |s: Option<&Vec<f64>>, j: usize| s.map_or(String::new(), |s| fmt17(s[j]));
            out.write_record([
                i.to_string(),
                k.to_string(),
                fmt17(k as f64 * dt),
                cell(t, 0),
                cell(t, 1),
                cell(m, 0),
                cell(m, 1),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train: LossParts,
    pub test: Option<LossParts>,
    pub cosine_similarity: f64,
    pub attractors: AttractorStats,
    /// Discrete local minima of the learned energy on the mesh.
    pub energy_grid_minima: Vec<[f64; 2]>,
}

/// Everything [`evaluate`] computes, including the data behind the exports.
pub struct Evaluation {
    pub report: EvalReport,
    pub pairs: Vec<PairedTrajectory>,
}

/// Seeded initial states for paired trajectories, uniform in `[lo, hi]²`.
pub fn pair_starts(lo: f64, hi: f64, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n).map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)]).collect()
}

pub fn evaluate(
    sys: &PhSystem,
    ds: &Dataset,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mesh: &Mesh,
    seed: u64,
) -> Result<Evaluation, IdentError> {
    let truth = ds.truth()?;
    let (train, test) = split_losses(sys, ds, train_cfg)?;
    let cos = cosine_similarity(&truth, sys, mesh)?;
    let (lo, hi) = (ds.meta.config.lo, ds.meta.config.hi);
    let minima = local_minima(&truth.potential, lo - 0.5, hi + 0.5, 25);
    let starts = pair_starts(lo, hi, eval_cfg.pairs, seed);
    let pairs = paired_trajectories(&truth, sys, &starts, ds.meta.config.dt, eval_cfg.horizon_steps)?;
    let attractors = attractor_agreement(&pairs, &minima, eval_cfg.tolerance);
    let mut energy_grid_minima = Vec::new();
    if mesh.dim() == 2 {
        let (pts, e) = energy_grid(sys, mesh)?;
        for i in grid_local_minima(&e, mesh.resolution) {
            energy_grid_minima.push([pts[[i, 0]], pts[[i, 1]]]);
        }
    }
    Ok(Evaluation { report: EvalReport { train, test, cosine_similarity: cos, attractors, energy_grid_minima }, pairs })
}
