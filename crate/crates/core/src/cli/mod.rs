//! The `ebm-sysid` command line.

mod config;
mod sweep;

pub use config::{CertifyConfig, RunConfig};
pub use sweep::{expand_grid, run_sweep, SweepRow};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{DynamicsError, PhSystem};
use crate::fpmode::install_flushing_pool;
use crate::energy::EnergyError;
use crate::ident::{
    evaluate, field_grid, generate_dataset, init_system, pair_starts, paired_trajectories, train, write_curve, write_grid, write_pairs, Checkpoint, Dataset,
    DatasetMeta, IdentError, TrainOutcome,
};
use crate::stability::{certify, CertificationReport, Mesh, StabilityError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_CONDITION: i32 = 5;
pub const EXIT_METRIC: i32 = 6;

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: m.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn energy_code(e: &EnergyError) -> i32 {
    match e {
        EnergyError::Condition(_) => EXIT_CONDITION,
        EnergyError::Document(_) | EnergyError::Shape(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn dynamics_code(e: &DynamicsError) -> i32 {
    match e {
        DynamicsError::Energy(e) => energy_code(e),
        DynamicsError::Config(_) => EXIT_CONFIG,
        DynamicsError::MetricFloor(_) => EXIT_METRIC,
        _ => EXIT_DATA,
    }
}

fn stability_code(e: &StabilityError) -> i32 {
    match e {
        StabilityError::Energy(e) => energy_code(e),
        StabilityError::Dynamics(e) => dynamics_code(e),
        StabilityError::MetricNotPositive { .. } => EXIT_METRIC,
        StabilityError::Mesh(_) | StabilityError::Argument(_) => EXIT_CONFIG,
        StabilityError::NonFinite { .. } => EXIT_METRIC,
    }
}

impl From<IdentError> for CliError {
    fn from(e: IdentError) -> Self {
        let code = match &e {
            IdentError::Config(_) => EXIT_CONFIG,
            IdentError::Data(_) | IdentError::Csv(_) | IdentError::Io(_) => EXIT_DATA,
            IdentError::NonFiniteLoss { .. } | IdentError::Training { .. } => EXIT_TRAINING,
            IdentError::Energy(e) => energy_code(e),
            IdentError::Dynamics(e) => dynamics_code(e),
            IdentError::Stability(e) => stability_code(e),
            IdentError::Diff(_) => EXIT_TRAINING,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        CliError { code: stability_code(&e), message: e.to_string() }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        CliError { code: dynamics_code(&e), message: e.to_string() }
    }
}

impl From<EnergyError> for CliError {
    fn from(e: EnergyError) -> Self {
        CliError { code: energy_code(&e), message: e.to_string() }
    }
}

type Res<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ebm-sysid", version, about = "Stable system identification with energy-based models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON); built-in multi-well defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MeshFlags {
    /// Lower mesh corner, repeated per axis (e.g. --mesh-lo=-2 --mesh-lo=-2) [default: from config]
    #[arg(long, allow_negative_numbers = true)]
    pub mesh_lo: Vec<f64>,
    /// Upper mesh corner, repeated per axis [default: from config]
    #[arg(long, allow_negative_numbers = true)]
    pub mesh_hi: Vec<f64>,
    /// Points per axis [default: from config]
    #[arg(long)]
    pub mesh_res: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample ground-truth trajectories and write the dataset CSV and sidecar
    GenData(Common),
    /// Train a model and write checkpoint and loss curve
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Generate the dataset first
        #[arg(long, default_value_t = false)]
        generate: bool,
        /// Hidden layers get no bias
        #[arg(long, default_value_t = false)]
        no_hidden_bias: bool,
        /// Write an intermediate checkpoint every N epochs (0 = only at the end)
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
    },
    /// Losses, field similarity and attractor agreement of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate [default: <out>/checkpoint.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        mesh: MeshFlags,
    },
    /// Expansion radius, metric bounds and boundary sampling of a checkpoint
    Certify {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to certify [default: <out>/checkpoint.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        mesh: MeshFlags,
        /// Sphere radius as a multiple of the scaled radius [default: from config]
        #[arg(long)]
        radius_factor: Option<f64>,
        /// Boundary samples [default: from config]
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Energy and field grids plus paired trajectories as CSV
    ExportGrid {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to export [default: <out>/checkpoint.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        mesh: MeshFlags,
    },
    /// Train and evaluate every combination of a grid of config overrides
    Sweep {
        #[command(flatten)]
        common: Common,
        /// JSON object mapping dotted config keys to lists of values
        #[arg(long)]
        grid: PathBuf,
    },
}

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Res<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let name = path.file_name().ok_or_else(|| CliError::config(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let io = |e: std::io::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

fn read_text(path: &Path, code: i32) -> Res<String> {
    fs::read_to_string(path).map_err(|e| CliError { code, message: format!("{}: {e}", path.display()) })
}

pub fn load_config(c: &Common) -> Res<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&read_text(p, EXIT_CONFIG)?)
            .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_mesh(cfg: &RunConfig, f: &MeshFlags) -> Res<Mesh> {
    let mut m = cfg.mesh.clone();
    if !f.mesh_lo.is_empty() {
        m.lo = f.mesh_lo.clone();
    }
    if !f.mesh_hi.is_empty() {
        m.hi = f.mesh_hi.clone();
    }
    if let Some(r) = f.mesh_res {
        m.resolution = r;
    }
    m.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(m)
}

pub struct Paths {
    pub dataset_csv: PathBuf,
    pub dataset_json: PathBuf,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub eval: PathBuf,
    pub certificate: PathBuf,
    pub grids: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Paths {
            dataset_csv: out.join("dataset.csv"),
            dataset_json: out.join("dataset.json"),
            checkpoint: out.join("checkpoint.json"),
            curve: out.join("loss_curve.csv"),
            eval: out.join("eval.json"),
            certificate: out.join("certificate.json"),
            grids: out.join("grids"),
        }
    }
}

pub fn make_dataset(cfg: &RunConfig) -> Res<Dataset> {
    let truth = cfg.system.build()?;
    Ok(generate_dataset(&truth, &cfg.data, cfg.seed)?)
}

pub fn save_dataset(ds: &Dataset, p: &Paths) -> Res<()> {
    atomic_write(&p.dataset_csv, &ds.csv_bytes()?)?;
    atomic_write(&p.dataset_json, serde_json::to_string_pretty(&ds.meta).expect("meta serializes").as_bytes())
}

pub fn load_dataset(p: &Paths) -> Res<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&read_text(&p.dataset_json, EXIT_DATA)?)
        .map_err(|e| CliError::data(format!("{}: {e}", p.dataset_json.display())))?;
    let f = fs::File::open(&p.dataset_csv).map_err(|e| CliError::data(format!("{}: {e}", p.dataset_csv.display())))?;
    Ok(Dataset::read(f, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Res<Checkpoint> {
    Ok(Checkpoint::from_json(&read_text(path, EXIT_DATA)?)?)
}

/// Seeded model and metric initialization; independent of the data stream.
pub fn initial_system(cfg: &RunConfig) -> Res<PhSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - 1);
    Ok(init_system(&cfg.architecture, &cfg.metric, &mut rng)?)
}

fn cmd_gen_data(c: &Common) -> Res<()> {
    let cfg = load_config(c)?;
    let ds = make_dataset(&cfg)?;
    save_dataset(&ds, &Paths::new(&cfg.output_dir))?;
    println!(
        "{} samples, {}/{} trajectory split",
        ds.meta.samples,
        ds.meta.train_trajectories.len(),
        ds.meta.test_trajectories.len()
    );
    if !ds.meta.truncated.is_empty() {
        println!("{} trajectories truncated by the divergence guard", ds.meta.truncated.len());
    }
    Ok(())
}

/// Train per `cfg`, writing checkpoints and the loss curve under the output
/// directory. A failed run leaves its last good checkpoint behind.
pub fn run_training(cfg: &RunConfig, ds: &Dataset, resume: Option<Checkpoint>, every: usize, quiet: bool) -> Res<TrainOutcome> {
    let p = Paths::new(&cfg.output_dir);
    let (sys, state) = match resume {
        Some(ck) => (ck.system()?, ck.training),
        None => (initial_system(cfg)?, None),
    };
    let mut write_err = None;
    let result = train(sys, ds, &cfg.train, cfg.seed, state, |row, ck| {
        if !quiet && (row.epoch % 10 == 0 || row.epoch == cfg.train.epochs) {
            println!("epoch {:>5}  train {:.6}  test {:.6}", row.epoch, row.train_loss, row.test_loss);
        }
        if every > 0 && row.epoch % every == 0 && write_err.is_none() {
            write_err = atomic_write(&p.checkpoint, ck.to_json().as_bytes()).err();
        }
    });
    let out = match result {
        Ok(o) => o,
        Err(IdentError::Training { epoch, reason, last_good }) => {
            atomic_write(&p.checkpoint, last_good.to_json().as_bytes())?;
            if let Some(t) = &last_good.training {
                let mut buf = Vec::new();
                write_curve(&t.curve, &mut buf)?;
                atomic_write(&p.curve, &buf)?;
            }
            return Err(CliError {
                code: EXIT_TRAINING,
                message: format!("training aborted in epoch {epoch}: {reason}; last good checkpoint kept at {}", p.checkpoint.display()),
            });
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = write_err.take() {
        return Err(e);
    }
    atomic_write(&p.checkpoint, out.checkpoint().to_json().as_bytes())?;
    let mut buf = Vec::new();
    write_curve(&out.state.curve, &mut buf)?;
    atomic_write(&p.curve, &buf)?;
    Ok(out)
}

fn cmd_train(c: &Common, resume: &Option<PathBuf>, generate: bool, no_hidden_bias: bool, every: usize) -> Res<()> {
    let mut cfg = load_config(c)?;
    if no_hidden_bias {
        cfg.architecture.hidden_bias = false;
    }
    let p = Paths::new(&cfg.output_dir);
    let ds = if generate {
        let ds = make_dataset(&cfg)?;
        save_dataset(&ds, &p)?;
        ds
    } else {
        load_dataset(&p)?
    };
    let resume = resume.as_deref().map(load_checkpoint).transpose()?;
    let out = run_training(&cfg, &ds, resume, every, false)?;
    let (tr, te) = out.final_losses().map_or((f64::NAN, f64::NAN), |r| (r.train_loss, r.test_loss));
    println!("{:<12} {:>12} {:>12}", "system", "train loss", "test loss");
    println!("{:<12} {:>12.4} {:>12.4}", cfg.system.potential.name(), tr, te);
    println!("checkpoint written to {}", p.checkpoint.display());
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| Paths::new(&cfg.output_dir).checkpoint)
}

fn cmd_eval(c: &Common, ck: &Option<PathBuf>, mesh: &MeshFlags) -> Res<()> {
    let cfg = load_config(c)?;
    let mesh = apply_mesh(&cfg, mesh)?;
    let sys = load_checkpoint(&checkpoint_path(&cfg, ck))?.system()?;
    let p = Paths::new(&cfg.output_dir);
    let ds = load_dataset(&p)?;
    let ev = evaluate(&sys, &ds, &cfg.train, &cfg.eval, &mesh, cfg.seed)?;
    let r = &ev.report;
    atomic_write(&p.eval, serde_json::to_string_pretty(r).expect("report serializes").as_bytes())?;
    println!("train loss {:.6}", r.train.total);
    if let Some(t) = &r.test {
        println!("test loss  {:.6}", t.total);
    }
    println!("mean cosine similarity {:.4}", r.cosine_similarity);
    println!(
        "attractor agreement {}/{} ({:.1}%) over {} minima",
        r.attractors.agreeing,
        r.attractors.pairs,
        100.0 * r.attractors.fraction,
        r.attractors.minima.len()
    );
    println!("learned energy has {} local minima on the mesh", r.energy_grid_minima.len());
    Ok(())
}

pub fn certify_system(cfg: &RunConfig, sys: &PhSystem, mesh: &Mesh) -> Res<CertificationReport> {
    Ok(certify(sys, mesh, cfg.certify.radius_factor, cfg.certify.samples, cfg.seed)?)
}

fn cmd_certify(c: &Common, ck: &Option<PathBuf>, mesh: &MeshFlags, factor: Option<f64>, samples: Option<usize>) -> Res<()> {
    let mut cfg = load_config(c)?;
    if let Some(f) = factor {
        cfg.certify.radius_factor = f;
    }
    if let Some(s) = samples {
        cfg.certify.samples = s;
    }
    let mesh = apply_mesh(&cfg, mesh)?;
    let sys = load_checkpoint(&checkpoint_path(&cfg, ck))?.system()?;
    let rep = certify_system(&cfg, &sys, &mesh)?;
    atomic_write(
        &Paths::new(&cfg.output_dir).certificate,
        serde_json::to_string_pretty(&rep).expect("report serializes").as_bytes(),
    )?;
    println!("{} ({} mesh points)", rep.label, rep.mesh.len());
    println!("{:<6} {:>14}", "layer", "gamma");
    for (i, g) in rep.gamma.iter().enumerate() {
        println!("{:<6} {:>14.6e}", i + 1, g);
    }
    println!("r_ex   = {:.6e}", rep.r_ex);
    println!("q_min  = {:.6e}   q_max = {:.6e}   q_max/q_min = {:.6e}", rep.q_min, rep.q_max, rep.q_max / rep.q_min);
    println!("rho_ex = {:.6e}", rep.rho_ex);
    let b = &rep.boundary_stats;
    println!(
        "boundary R = {:.6e}, {} samples, inward fraction {:.6}, max x.f = {:.3e}: {}",
        b.radius,
        b.samples,
        b.inward_fraction,
        b.max_inner_product,
        if b.passed { "PASS" } else { "FAIL" }
    );
    Ok(())
}

fn cmd_export_grid(c: &Common, ck: &Option<PathBuf>, mesh: &MeshFlags) -> Res<()> {
    let cfg = load_config(c)?;
    let mesh = apply_mesh(&cfg, mesh)?;
    if mesh.dim() != 2 {
        return Err(CliError::config("grid export needs a planar mesh"));
    }
    let sys = load_checkpoint(&checkpoint_path(&cfg, ck))?.system()?;
    let truth = cfg.system.build()?;
    let dir = Paths::new(&cfg.output_dir).grids;
    let write = |name: &str, header: &[&str], pts, vals| -> Res<()> {
        let mut buf = Vec::new();
        write_grid(&mut buf, header, pts, vals)?;
        atomic_write(&dir.join(name), &buf)
    };
    let (pts, e) = crate::ident::energy_grid(&sys, &mesh)?;
    let e = e.insert_axis(ndarray::Axis(1));
    write("energy.csv", &["x", "y", "energy"], &pts, &e)?;
    let (_, fl) = field_grid(&mesh, |x| Ok(sys.field_rows(x)?))?;
    write("field_learned.csv", &["x", "y", "fx", "fy"], &pts, &fl)?;
    let (_, ft) = field_grid(&mesh, |x| truth.field_rows(x))?;
    write("field_true.csv", &["x", "y", "fx", "fy"], &pts, &ft)?;
    let starts = pair_starts(cfg.data.lo, cfg.data.hi, cfg.eval.pairs, cfg.seed);
    let pairs = paired_trajectories(&truth, &sys, &starts, cfg.data.dt, cfg.eval.horizon_steps)?;
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs)?;
    atomic_write(&dir.join("pairs.csv"), &buf)?;
    println!("wrote {} grid rows and {} paired trajectories to {}", mesh.len(), pairs.len(), dir.display());
    Ok(())
}

fn configure_threads() -> Res<()> {
    let n = match std::env::var("EBM_SYSID_THREADS") {
        Ok(v) => v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::config(format!("EBM_SYSID_THREADS must be a positive integer, got `{v}`"))
        })?,
        // rayon's default
        Err(_) => 0,
    };
    // every thread that does arithmetic flushes subnormals, so results do not
    // depend on which thread computed them; a pool may already exist when
    // called twice in one process
    install_flushing_pool(n);
    Ok(())
}

pub fn run(cli: Cli) -> Res<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Train { common, resume, generate, no_hidden_bias, checkpoint_every } => {
            cmd_train(common, resume, *generate, *no_hidden_bias, *checkpoint_every)
        }
        Command::Eval { common, checkpoint, mesh } => cmd_eval(common, checkpoint, mesh),
        Command::Certify { common, checkpoint, mesh, radius_factor, samples } => {
            cmd_certify(common, checkpoint, mesh, *radius_factor, *samples)
        }
        Command::ExportGrid { common, checkpoint, mesh } => cmd_export_grid(common, checkpoint, mesh),
        Command::Sweep { common, grid } => {
            let cfg = load_config(common)?;
            let spec = read_text(grid, EXIT_CONFIG)?;
            let rows = run_sweep(&cfg, &spec)?;
            println!("{} runs, summary at {}", rows.len(), cfg.output_dir.join("sweep_summary.csv").display());
            Ok(())
        }
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
