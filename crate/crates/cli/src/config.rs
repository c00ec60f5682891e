//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sparsefuse_core::data::{AugmentOptions, Pattern};
use sparsefuse_core::network::FusionConfig;
use sparsefuse_core::trainer::TrainConfig;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural scenes `scene_seed + i`; held-out scenes start one million
    /// seeds later.
    Synthetic {
        train: usize,
        held_out: usize,
        scene_seed: u64,
    },
    Manifest {
        train: PathBuf,
        held_out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: FusionConfig,
    pub train: TrainConfig,
    /// Sampling pattern for training, evaluation and `sample`.
    pub pattern: Pattern,
    /// Point count for evaluation, inference and `sample`.
    pub points: usize,
    pub sweep_counts: Vec<usize>,
    pub data: DataSource,
    /// Camera for inference inputs: `fx fy cx cy`.
    pub intrinsics: Option<[f64; 4]>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub gradcheck_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: FusionConfig::desk(),
            train: TrainConfig::desk(),
            pattern: Pattern::Random,
            points: 200,
            sweep_counts: vec![2, 32, 200, 500],
            data: DataSource::Synthetic {
                train: 64,
                held_out: 16,
                scene_seed: 1000,
            },
            intrinsics: None,
            out: PathBuf::from("run"),
            checkpoint: None,
            resume: false,
            gradcheck_tol: 2e-3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{source_name}:{line}: {msg}")]
pub struct ConfigError {
    pub source_name: String,
    pub line: usize,
    pub msg: String,
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn parse_one<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Resolves `v` against the directory of the configuration file.
fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Applies one key. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "fusion_nets" => self.set_fusion_nets(parse_one(v)?),
            "channels" => m.channels = parse_list(v)?,
            "stem_channels" => m.stem_channels = parse_one(v)?,
            "neighbors" => m.neighbors = parse_one(v)?,
            "kernel_elems" => m.kernel_elems = parse_one(v)?,
            "use_confidence" => m.use_confidence = parse_bool(v)?,
            "use_3d_branch" => m.use_3d_branch = parse_bool(v)?,
            "height" => m.height = parse_one(v)?,
            "width" => m.width = parse_one(v)?,
            "epochs" => t.epochs = parse_one(v)?,
            "batch" => t.batch_size = parse_one(v)?,
            "lr0" => t.lr0 = parse_one(v)?,
            "beta1" => t.beta1 = parse_one(v)?,
            "beta2" => t.beta2 = parse_one(v)?,
            "eps_opt" => t.eps_opt = parse_one(v)?,
            "decay_factor" => t.decay_factor = parse_one(v)?,
            "decay_start" => t.decay_start = parse_one(v)?,
            "decay_every" => t.decay_every = parse_one(v)?,
            "seed" => t.seed = parse_one(v)?,
            "checkpoint_every" => t.checkpoint_every = parse_one(v)?,
            "clip_norm" => t.clip_norm = parse_one(v)?,
            "depth_scale" => t.depth_scale = parse_one(v)?,
            "train_points" => {
                let r: Vec<usize> = parse_list(v)?;
                t.points = match r[..] {
                    [n] => Some((n, n)),
                    [lo, hi] => Some((lo, hi)),
                    _ => return Err("expected one count or min,max".into()),
                }
            }
            "point_noise" => t.point_noise = parse_one(v)?,
            "augment" => t.augment = parse_bool(v)?.then(AugmentOptions::default),
            "eval_points" => t.eval_points = parse_one(v)?,
            "gamma" => t.loss.gamma = parse_list(v)?,
            "mu" => t.loss.mu = parse_one(v)?,
            "theta" => t.loss.theta = parse_one(v)?,
            "alpha" => t.loss.alpha = parse_one(v)?,
            "pattern" => {
                self.pattern = parse_pattern(v)?;
                if matches!(self.pattern, Pattern::External(_)) {
                    t.points = None;
                }
            }
            "points" => self.points = parse_one(v)?,
            "sweep_counts" => self.sweep_counts = parse_list(v)?,
            "data" => {
                self.data = if v == "synthetic" {
                    match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Manifest { .. } => RunConfig::default().data,
                    }
                } else {
                    DataSource::Manifest {
                        train: resolve(base, v),
                        held_out: None,
                    }
                }
            }
            "held_out" => match &mut self.data {
                DataSource::Manifest { held_out, .. } => *held_out = Some(resolve(base, v)),
                DataSource::Synthetic { .. } => {
                    return Err("held_out needs a manifest data source".into())
                }
            },
            "train_scenes" | "held_out_scenes" | "scene_seed" => match &mut self.data {
                DataSource::Synthetic {
                    train,
                    held_out,
                    scene_seed,
                } => match key {
                    "train_scenes" => *train = parse_one(v)?,
                    "held_out_scenes" => *held_out = parse_one(v)?,
                    _ => *scene_seed = parse_one(v)?,
                },
                DataSource::Manifest { .. } => {
                    return Err(format!("{key} needs synthetic data"))
                }
            },
            "intrinsics" => {
                let k: Vec<f64> = v
                    .split_whitespace()
                    .map(parse_one)
                    .collect::<Result<_, _>>()?;
                self.intrinsics = Some(
                    k.try_into()
                        .map_err(|_| "expected fx fy cx cy".to_string())?,
                );
            }
            "out" => self.out = resolve(base, v),
            "checkpoint" => self.checkpoint = Some(resolve(base, v)),
            "resume" => self.resume = parse_bool(v)?,
            "gradcheck_tol" => self.gradcheck_tol = parse_one(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Changes the number of Fusion-Nets, keeping the finest channel widths
    /// and repeating the coarsest one when growing.
    pub fn set_fusion_nets(&mut self, n: usize) {
        let ch = &mut self.model.channels;
        if n < ch.len() {
            ch.drain(..ch.len() - n);
        }
        while ch.len() < n {
            let first = ch.first().copied().unwrap_or(16);
            ch.insert(0, first);
        }
        self.model.num_fusion_nets = n;
        self.train.loss = self.train.loss_for(n);
    }

    pub fn parse(text: &str, base: &Path, source_name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        let mut lines: Vec<(usize, &str)> = text.lines().enumerate().collect();
        // The data source decides which data keys are valid, so it goes first.
        lines.sort_by_key(|(_, l)| l.split('=').next().map(str::trim) != Some("data"));
        for (i, raw) in lines {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            seen.push(k.to_string());
            cfg.set(k, v, base).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source_name: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Checks every field that can be checked without touching the disk.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.train.loss.gamma.len() != self.model.num_fusion_nets {
            return Err(format!(
                "gamma has {} weights for {} Fusion-Nets",
                self.train.loss.gamma.len(),
                self.model.num_fusion_nets
            ));
        }
        if !(self.gradcheck_tol > 0.0) {
            return Err("gradcheck_tol must be positive".into());
        }
        let external = matches!(self.pattern, Pattern::External(_));
        if external && self.train.points.is_some() {
            return Err("pattern external uses the dataset's point files; drop train_points".into());
        }
        if external && matches!(self.data, DataSource::Synthetic { .. }) {
            return Err("pattern external needs a manifest with point files".into());
        }
        if let DataSource::Synthetic { train, .. } = self.data {
            if train == 0 {
                return Err("train_scenes must be positive".into());
            }
        }
        Ok(())
    }

    /// Every key, so the text alone reproduces this configuration.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("fusion_nets", m.num_fusion_nets.to_string());
        kv("channels", join(&m.channels));
        kv("stem_channels", m.stem_channels.to_string());
        kv("neighbors", m.neighbors.to_string());
        kv("kernel_elems", m.kernel_elems.to_string());
        kv("use_confidence", m.use_confidence.to_string());
        kv("use_3d_branch", m.use_3d_branch.to_string());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch_size.to_string());
        kv("lr0", format!("{:e}", t.lr0));
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps_opt", format!("{:e}", t.eps_opt));
        kv("decay_factor", t.decay_factor.to_string());
        kv("decay_start", t.decay_start.to_string());
        kv("decay_every", t.decay_every.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("depth_scale", t.depth_scale.to_string());
        if let Some((lo, hi)) = t.points {
            kv("train_points", format!("{lo},{hi}"));
        }
        kv("point_noise", t.point_noise.to_string());
        kv("augment", t.augment.is_some().to_string());
        kv("eval_points", t.eval_points.to_string());
        kv("gamma", join(&t.loss.gamma));
        kv("mu", t.loss.mu.to_string());
        kv("theta", t.loss.theta.to_string());
        kv("alpha", t.loss.alpha.to_string());
        kv("pattern", pattern_text(&self.pattern));
        kv("points", self.points.to_string());
        kv("sweep_counts", join(&self.sweep_counts));
        match &self.data {
            DataSource::Synthetic {
                train,
                held_out,
                scene_seed,
            } => {
                kv("data", "synthetic".into());
                kv("train_scenes", train.to_string());
                kv("held_out_scenes", held_out.to_string());
                kv("scene_seed", scene_seed.to_string());
            }
            DataSource::Manifest { train, held_out } => {
                kv("data", train.display().to_string());
                if let Some(h) = held_out {
                    kv("held_out", h.display().to_string());
                }
            }
        }
        if let Some(k) = self.intrinsics {
            kv("intrinsics", k.map(|v| v.to_string()).join(" "));
        }
        kv("out", self.out.display().to_string());
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        kv("resume", self.resume.to_string());
        kv("gradcheck_tol", self.gradcheck_tol.to_string());
        s
    }
}

/// `random`, `feature-like` or `external` (the dataset's own point files).
pub fn parse_pattern(v: &str) -> Result<Pattern, String> {
    match v {
        "random" => Ok(Pattern::Random),
        "feature-like" => Ok(Pattern::FeatureLike),
        "external" => Ok(Pattern::External(PathBuf::new())),
        _ => Err(format!("unknown pattern {v:?}; expected random, feature-like or external")),
    }
}

fn pattern_text(p: &Pattern) -> String {
    p.name().to_string()
}
