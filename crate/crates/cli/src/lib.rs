//! Command-line front end: training, evaluation, inference, gradient
//! verification and point sampling.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 runtime abort.

pub mod config;
pub mod render;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sparsefuse_core::data::io::{read_manifest, read_rgb_png, write_float_map, write_rgb_png};
use sparsefuse_core::data::{sample_points, synthesize_scene, Pattern, Sample, SamplingSpec};
use sparsefuse_core::depth::DepthMap;
use sparsefuse_core::geometry::{project_points, read_point_file, write_point_file, CameraIntrinsics, PointCloud};
use sparsefuse_core::gradsuite::{gradient_suite, SuiteOptions};
use sparsefuse_core::metrics::{evaluate, sweep, sweep_csv, MetricReport};
use sparsefuse_core::network::{Model, ModelInput};
use sparsefuse_core::trainer::{eval_seed, train, TrainOutput};
use sparsefuse_core::CoreError;
use sparsefuse_tensor::checkpoint::Checkpoint;
use sparsefuse_tensor::Tensor;

use config::{parse_pattern, DataSource, RunConfig};

/// Sidecar written next to checkpoints; it fully determines the architecture.
pub const SIDECAR: &str = "model.cfg";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::NonFinite { .. } => CliError::Runtime(e.to_string()),
            CoreError::Io(io) if io.kind() != std::io::ErrorKind::NotFound => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<sparsefuse_tensor::TensorError> for CliError {
    fn from(e: sparsefuse_tensor::TensorError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "sparsefuse", version, about = "Sparse-point-guided depth estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a CSV log.
    Train(Common),
    /// Evaluate a checkpoint over point counts on the held-out set.
    Eval(Common),
    /// Predict depth and confidence for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input image (8-bit PNG).
        #[arg(long)]
        rgb: PathBuf,
        /// Optional point file; without it the cloud is empty.
        #[arg(long)]
        points_file: Option<PathBuf>,
        /// Export values along `row0,col0,row1,col1`.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Finite-difference check of every operation and a two-level model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Draw points for one dataset sample and write them with an overlay.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        sample_id: usize,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Point count; when training, a fixed count per sample.
    #[arg(long, alias = "count")]
    pub points: Option<usize>,
    /// random, feature-like or external.
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fusion_nets: Option<usize>,
    #[arg(long)]
    pub no_confidence: bool,
    #[arg(long = "no-3d-branch")]
    pub no_3d_branch: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any configuration key, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Infer {
            common,
            rgb,
            points_file,
            profile,
        } => cmd_infer(&common, &rgb, points_file.as_deref(), profile.as_deref()),
        Command::Gradcheck {
            common,
            corrupt_gradient,
        } => cmd_gradcheck(&common, corrupt_gradient),
        Command::Sample { common, sample_id } => cmd_sample(&common, sample_id),
    }
}

/// Configuration file (or the checkpoint's sidecar), then `--set`, then flags.
pub fn resolve_config(c: &Common) -> Result<RunConfig, CliError> {
    let sidecar = c
        .checkpoint
        .as_ref()
        .map(|p| p.parent().unwrap_or(Path::new(".")).join(SIDECAR))
        .filter(|p| p.is_file());
    let mut cfg = match c.config.as_ref().or(sidecar.as_ref()) {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let cwd = Path::new(".");
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v, cwd)
            .map_err(|e| CliError::Usage(format!("--set {kv}: {e}")))?;
    }
    if let Some(n) = c.fusion_nets {
        cfg.set_fusion_nets(n);
    }
    if let Some(v) = c.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = c.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = c.seed {
        cfg.train.seed = v;
    }
    if let Some(p) = &c.pattern {
        cfg.pattern = parse_pattern(p).map_err(CliError::Usage)?;
        if matches!(cfg.pattern, Pattern::External(_)) {
            cfg.train.points = None;
        }
    }
    if let Some(v) = c.points {
        cfg.points = v;
        if cfg.train.points.is_some() {
            cfg.train.points = Some((v, v));
        }
    }
    if c.no_confidence {
        cfg.model.use_confidence = false;
    }
    if c.no_3d_branch {
        cfg.model.use_3d_branch = false;
    }
    if let Some(p) = &c.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &c.out {
        cfg.out = p.clone();
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn synthetic(first_seed: u64, count: usize, cfg: &RunConfig) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| synthesize_scene(first_seed + i, cfg.model.height, cfg.model.width))
        .collect()
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let samples = read_manifest(path)?
        .iter()
        .map(|e| e.load())
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = samples
        .iter()
        .find(|s| (s.height(), s.width()) != (cfg.model.height, cfg.model.width))
    {
        return Err(CliError::Usage(format!(
            "sample {} is {}x{}, the model expects {}x{}",
            s.id,
            s.height(),
            s.width(),
            cfg.model.height,
            cfg.model.width
        )));
    }
    Ok(samples)
}

fn training_set(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    match &cfg.data {
        DataSource::Synthetic {
            train, scene_seed, ..
        } => Ok(synthetic(*scene_seed, *train, cfg)),
        DataSource::Manifest { train, .. } => load_manifest(train, cfg),
    }
}

fn held_out_set(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    match &cfg.data {
        DataSource::Synthetic {
            held_out,
            scene_seed,
            ..
        } => Ok(synthetic(scene_seed + 1_000_000, *held_out, cfg)),
        DataSource::Manifest { train, held_out } => {
            load_manifest(held_out.as_deref().unwrap_or(train), cfg)
        }
    }
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("model.sfck"))
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>, CliError> {
    let path = checkpoint_path(cfg);
    let ck = Checkpoint::load(&path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    ck.load_into(model.params_mut()).map_err(|e| {
        CliError::Usage(format!(
            "{} does not match the configured architecture: {e}",
            path.display()
        ))
    })?;
    Ok(model)
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_train(c: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(c)?;
    let train_set = training_set(&cfg)?;
    let held_out = held_out_set(&cfg)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(p) = &cfg.checkpoint {
        let ck = Checkpoint::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        ck.load_into(model.params_mut())?;
    }
    create_out(&cfg.out)?;
    write(&cfg.out.join(SIDECAR), &cfg.to_text())?;
    let output = TrainOutput {
        dir: cfg.out.clone(),
        resume: cfg.resume,
    };
    let rows = train(
        &mut model,
        &train_set,
        &held_out,
        &cfg.train,
        Some(&output),
        &mut |r| {
            let rmse = r.rmse.map(|v| format!(" rmse {v:.4}")).unwrap_or_default();
            println!("epoch {:>3} step {:>6} lr {:.3e} loss {:.5}{rmse}", r.epoch, r.step, r.lr, r.loss);
        },
    )?;
    println!(
        "trained {} epochs; checkpoint {}",
        rows.len(),
        output.model_path().display()
    );
    Ok(())
}

fn draw_cloud(
    sample: &Sample,
    pattern: &Pattern,
    count: usize,
    seed: u64,
    noise: f64,
) -> Result<PointCloud, CoreError> {
    match pattern {
        Pattern::External(_) => Ok(sample.cloud.clone()),
        _ => sample_points(
            sample,
            &SamplingSpec {
                pattern: pattern.clone(),
                count,
                seed,
                noise,
            },
        ),
    }
}

fn predict(
    model: &Model<f32>,
    sample: &Sample,
    cloud: &PointCloud,
    depth_scale: f64,
) -> Result<(Vec<f64>, Option<Vec<f64>>), CoreError> {
    let est = sparsefuse_core::trainer::predict_depth(model, sample, cloud, depth_scale)?;
    Ok((est.depth, est.confidence))
}

pub fn cmd_eval(c: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(c)?;
    let samples = held_out_set(&cfg)?;
    if samples.is_empty() {
        return Err(CliError::Usage("the evaluation set is empty".into()));
    }
    let model = load_model(&cfg)?;
    let counts = match c.points {
        Some(p) => vec![p],
        None => cfg.sweep_counts.clone(),
    };
    let pattern = cfg.pattern.clone();
    let noise = cfg.train.point_noise;
    let scale = cfg.train.depth_scale;
    let mut per_image = format!("points,pattern,seed,id,{}\n", MetricReport::csv_header());
    let rows = sweep(&counts, pattern.name(), samples.len(), cfg.train.seed, |i, count, seed| {
        let s = &samples[i];
        let cloud = draw_cloud(s, &pattern, count, eval_seed(seed, i), noise)?;
        let (depth, _) = predict(&model, s, &cloud, scale)?;
        let r = evaluate(&depth, s.gt.values(), s.gt.mask())?;
        let _ = writeln!(per_image, "{count},{},{seed},{},{}", pattern.name(), s.id, r.csv_row());
        Ok((depth, s.gt.values().to_vec(), s.gt.mask().to_vec()))
    })?;
    create_out(&cfg.out)?;
    let csv = sweep_csv(&rows);
    write(&cfg.out.join("eval.csv"), &csv)?;
    write(&cfg.out.join("per_image.csv"), &per_image)?;
    print!("{csv}");
    Ok(())
}

fn parse_profile(spec: &str, h: usize, w: usize) -> Result<((usize, usize), (usize, usize)), CliError> {
    let v: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--profile expects row0,col0,row1,col1, got {spec:?}")))?;
    match v[..] {
        [r0, c0, r1, c1] if r0 < h && r1 < h && c0 < w && c1 < w => Ok(((r0, c0), (r1, c1))),
        [_, _, _, _] => Err(CliError::Usage(format!("--profile {spec} leaves the {h}x{w} image"))),
        _ => Err(CliError::Usage(format!("--profile expects four values, got {spec:?}"))),
    }
}

pub fn cmd_infer(
    c: &Common,
    rgb_path: &Path,
    points: Option<&Path>,
    profile: Option<&str>,
) -> Result<(), CliError> {
    let cfg = resolve_config(c)?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let (rgb, ih, iw) = read_rgb_png(rgb_path)?;
    if (ih, iw) != (h, w) {
        return Err(CliError::Usage(format!(
            "{} is {ih}x{iw}, the model expects {h}x{w}",
            rgb_path.display()
        )));
    }
    let cloud = match points {
        Some(p) => read_point_file(p)?,
        None => PointCloud::empty(),
    };
    let segment = profile.map(|s| parse_profile(s, h, w)).transpose()?;
    let intrinsics = match cfg.intrinsics {
        Some([fx, fy, cx, cy]) => CameraIntrinsics::new(fx, fy, cx, cy, w, h)?,
        None => CameraIntrinsics::centered(w, h, sparsefuse_core::data::SYNTH_FOV_DEG),
    };
    let model = load_model(&cfg)?;
    let rgb_t = Tensor::new(&[3, h, w], rgb)?;
    let input = ModelInput::from_cloud(rgb_t, &cloud, &intrinsics, cfg.train.depth_scale, &cfg.model)?;
    let est = model.predict(&input)?;
    let depth: Vec<f64> = est.depth.iter().map(|v| v * cfg.train.depth_scale).collect();

    create_out(&cfg.out)?;
    let map = DepthMap::from_values(h, w, depth.clone())?;
    write_float_map(cfg.out.join("depth.pfm"), &map)?;
    let (lo, hi) = render::finite_range(&depth);
    write_rgb_png(cfg.out.join("depth.png"), &render::colorize(&depth, lo, hi), h, w)?;
    if let Some(conf) = &est.confidence {
        let map = DepthMap::new(h, w, conf.clone(), vec![true; h * w])?;
        write_float_map(cfg.out.join("confidence.pfm"), &map)?;
        write_rgb_png(cfg.out.join("confidence.png"), &render::colorize(conf, 0.0, 1.0), h, w)?;
    }
    if let Some((a, b)) = segment {
        let px = render::line_pixels(a, b);
        let csv = render::profile_csv(&px, w, &depth, est.confidence.as_deref());
        write(&cfg.out.join("profile.csv"), &csv)?;
    }
    println!(
        "depth range {lo:.3}..{hi:.3} from {} points; outputs in {}",
        cloud.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(c: &Common, corrupt: bool) -> Result<(), CliError> {
    let cfg = resolve_config(c)?;
    let reports = gradient_suite(&SuiteOptions {
        seed: cfg.train.seed,
        tol: cfg.gradcheck_tol,
        corrupt,
    })?;
    for r in &reports {
        println!("{r}");
    }
    let mut failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    println!("{} of {} checks passed", reports.len() - failed.len(), reports.len());
    if failed.is_empty() {
        return Ok(());
    }
    failed.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    let worst: Vec<String> = failed
        .iter()
        .take(5)
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_err))
        .collect();
    Err(CliError::Verification(format!(
        "{} checks failed; worst: {}",
        failed.len(),
        worst.join(", ")
    )))
}

pub fn cmd_sample(c: &Common, id: usize) -> Result<(), CliError> {
    let cfg = resolve_config(c)?;
    if matches!(cfg.pattern, Pattern::External(_)) {
        return Err(CliError::Usage("sample draws points; use random or feature-like".into()));
    }
    let sample = match &cfg.data {
        DataSource::Synthetic { scene_seed, .. } => {
            synthesize_scene(scene_seed + id as u64, cfg.model.height, cfg.model.width)
        }
        DataSource::Manifest { train, .. } => {
            let entries = read_manifest(train)?;
            let e = entries.get(id).ok_or_else(|| {
                CliError::Usage(format!("sample {id} out of range ({} entries)", entries.len()))
            })?;
            e.load()?
        }
    };
    let spec = SamplingSpec {
        pattern: cfg.pattern.clone(),
        count: cfg.points,
        seed: cfg.train.seed,
        noise: cfg.train.point_noise,
    };
    let cloud = sample_points(&sample, &spec)?;
    create_out(&cfg.out)?;
    let path = cfg.out.join(format!("{}.xyz", sample.id));
    write_point_file(&path, &cloud)?;
    let px = project_points(&cloud, &sample.intrinsics).map.indices().to_vec();
    let overlay = render::point_overlay(&sample.rgb, sample.width(), &px);
    write_rgb_png(
        cfg.out.join(format!("{}-overlay.png", sample.id)),
        &overlay,
        sample.height(),
        sample.width(),
    )?;
    println!("{} points ({}) written to {}", cloud.len(), cfg.pattern.name(), path.display());
    Ok(())
}
