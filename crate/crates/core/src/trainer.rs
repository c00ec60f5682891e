//! Optimization loop: Adam with a stepped learning-rate decay, seeded
//! per-epoch shuffling and augmentation, checkpoints, resume and a CSV log.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefuse_tensor::checkpoint::Checkpoint;
use sparsefuse_tensor::{Graph, ParamStore, Scalar, Tensor};

use crate::data::{augment, sample_points, AugmentOptions, Pattern, Sample, SamplingSpec};
use crate::depth::DepthMap;
use crate::error::{CoreError, Result};
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{evaluate, fmt6, MetricReport};
use crate::network::{Model, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub lr0: f64,
    pub decay_factor: f64,
    /// First epoch at which the decay applies.
    pub decay_start: usize,
    pub decay_every: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Depths are divided by this before entering the network.
    pub depth_scale: f64,
    /// Inclusive range of points drawn per training sample; `None` keeps the
    /// sample's own cloud.
    pub points: Option<(usize, usize)>,
    pub pattern: Pattern,
    /// Multiplicative depth noise on drawn points.
    pub point_noise: f64,
    pub augment: Option<AugmentOptions>,
    pub loss: LossWeights,
    /// Points per held-out sample when logging RMSE.
    pub eval_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            lr0: 1.2e-4,
            decay_factor: 0.94,
            decay_start: 10,
            decay_every: 5,
            seed: 0,
            checkpoint_every: 5,
            clip_norm: 10.0,
            depth_scale: 10.0,
            points: Some((0, 500)),
            pattern: Pattern::Random,
            point_noise: 0.0,
            augment: Some(AugmentOptions::default()),
            loss: LossWeights::default(),
            eval_points: 200,
        }
    }
}

impl TrainConfig {
    /// Batch 4, 30 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps_opt", self.eps_opt),
            ("lr0", self.lr0),
            ("decay_factor", self.decay_factor),
            ("clip_norm", self.clip_norm),
            ("depth_scale", self.depth_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::config(format!("{name} = {v} must be positive")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 || self.decay_factor > 1.0 {
            return Err(CoreError::config("beta1, beta2 must be < 1 and decay_factor <= 1"));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.checkpoint_every == 0 {
            return Err(CoreError::config("batch_size, decay_every and checkpoint_every must be positive"));
        }
        if let Some((lo, hi)) = self.points {
            if lo > hi {
                return Err(CoreError::config(format!("point range {lo}..{hi} is empty")));
            }
        }
        if !(self.point_noise >= 0.0 && self.point_noise.is_finite()) {
            return Err(CoreError::config("point_noise must be non-negative"));
        }
        self.loss.validate()
    }

    /// Loss weights with `gamma` fitted to `scales` (truncated, or extended by
    /// halving the last weight).
    pub fn loss_for(&self, scales: usize) -> LossWeights {
        let mut w = self.loss.clone();
        while w.gamma.len() < scales {
            let last = w.gamma.last().copied().unwrap_or(1.0);
            w.gamma.push(last / 2.0);
        }
        w.gamma.truncate(scales);
        w
    }
}

/// `lr0` before `decay_start`, then one `decay_factor` step per started
/// `decay_every` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start {
        return cfg.lr0;
    }
    let steps = 1 + (epoch - cfg.decay_start) / cfg.decay_every;
    cfg.lr0 * cfg.decay_factor.powi(steps as i32)
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(CoreError::invalid(format!(
            "adam: {} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(CoreError::NonFinite {
            what: "gradient",
            step: state.t as usize,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps_opt);
            p[j] = T::of(p[j].as_f64() - update);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::of(v.as_f64() * s);
            }
        }
    }
    norm
}

/// Network input and normalized target pyramid for one sample.
pub fn prepare_input(
    sample: &Sample,
    cloud: &crate::geometry::PointCloud,
    model_cfg: &crate::network::FusionConfig,
    depth_scale: f64,
) -> Result<(ModelInput, Vec<DepthMap>)> {
    let input = ModelInput::from_cloud(sample.rgb_tensor(), cloud, &sample.intrinsics, depth_scale, model_cfg)?;
    let pyramid = sample.gt.scale(1.0 / depth_scale).pyramid(model_cfg.num_fusion_nets)?;
    Ok((input, pyramid))
}

/// Augments a training sample and draws its points, all from `seed`.
pub fn training_view(
    sample: &Sample,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(Sample, crate::geometry::PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug_seed: u64 = rng.random();
    let view = match &cfg.augment {
        Some(opts) => augment(sample, aug_seed, opts)?,
        None => sample.clone(),
    };
    let cloud = match cfg.points {
        Some((lo, hi)) => {
            let count = rng.random_range(lo..=hi).min(view.gt.valid_count());
            let spec = SamplingSpec {
                pattern: cfg.pattern.clone(),
                count,
                seed: rng.random(),
                noise: cfg.point_noise,
            };
            sample_points(&view, &spec)?
        }
        None => view.cloud.clone(),
    };
    Ok((view, cloud))
}

/// Dense prediction in the sample's depth units.
pub fn predict_depth(
    model: &Model<f32>,
    sample: &Sample,
    cloud: &crate::geometry::PointCloud,
    depth_scale: f64,
) -> Result<crate::network::DepthEstimate> {
    let (input, _) = prepare_input(sample, cloud, model.config(), depth_scale)?;
    let mut est = model.predict(&input)?;
    for v in est.depth.iter_mut() {
        *v *= depth_scale;
    }
    for (_, _, vals) in est.per_scale.iter_mut() {
        for v in vals.iter_mut() {
            *v *= depth_scale;
        }
    }
    Ok(est)
}

/// Seed of the points drawn for evaluation sample `index`.
pub fn eval_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Pixel-pooled metrics over `samples`, in the samples' depth units.
pub fn evaluate_set(
    model: &Model<f32>,
    samples: &[Sample],
    pattern: &Pattern,
    count: usize,
    noise: f64,
    seed: u64,
    depth_scale: f64,
) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let cloud = match pattern {
            Pattern::External(_) if count == 0 => crate::geometry::PointCloud::empty(),
            Pattern::External(_) => s.cloud.clone(),
            _ => {
                let spec = SamplingSpec {
                    pattern: pattern.clone(),
                    count: count.min(s.gt.valid_count()),
                    seed: eval_seed(seed, i),
                    noise,
                };
                sample_points(s, &spec)?
            }
        };
        let est = predict_depth(model, s, &cloud, depth_scale)?;
        reports.push(evaluate(&est.depth, s.gt.values(), s.gt.mask())?);
    }
    MetricReport::pooled(&reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Held-out RMSE in depth units, when a held-out set is given.
    pub rmse: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,step,lr,loss,rmse";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.step,
            fmt6(self.lr),
            fmt6(self.loss),
            self.rmse.map(fmt6).unwrap_or_default()
        )
    }
}

/// Where checkpoints and the log go.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Continue from `state.sfck` in `dir` when present.
    pub resume: bool,
}

impl TrainOutput {
    pub fn model_path(&self) -> PathBuf {
        self.dir.join("model.sfck")
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.sfck")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn scalar_entry(v: f64) -> Tensor<f32> {
    Tensor::new(&[1], vec![v as f32]).expect("one element")
}

/// Model weights, optimizer moments and progress in one archive.
fn state_checkpoint(params: &ParamStore<f32>, adam: &AdamState<f32>, epoch: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_params(params);
    for (k, (_, name, _)) in params.iter().enumerate() {
        ck.push(format!("adam.m.{name}"), adam.m[k].clone())?;
        ck.push(format!("adam.v.{name}"), adam.v[k].clone())?;
    }
    ck.push("train.epoch", scalar_entry(epoch as f64))?;
    // Split to stay exact in f32.
    ck.push("train.t_hi", scalar_entry((adam.t >> 20) as f64))?;
    ck.push("train.t_lo", scalar_entry((adam.t & 0xFFFFF) as f64))?;
    Ok(ck)
}

fn restore_state(ck: &Checkpoint, params: &mut ParamStore<f32>) -> Result<(AdamState<f32>, usize)> {
    ck.load_into(params)?;
    let mut adam = AdamState::new(params);
    let missing = |n: &str| CoreError::invalid(format!("training state lacks {n}"));
    for (k, (_, name, _)) in params.iter().enumerate() {
        for (slot, prefix) in [(&mut adam.m[k], "adam.m"), (&mut adam.v[k], "adam.v")] {
            let key = format!("{prefix}.{name}");
            let t = ck.get(&key).ok_or_else(|| missing(&key))?;
            if t.shape() != slot.shape() {
                return Err(CoreError::invalid(format!("{key} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
    }
    let scalar = |n: &str| ck.get(n).map(|t| t.data()[0] as u64).ok_or_else(|| missing(n));
    adam.t = (scalar("train.t_hi")? << 20) | scalar("train.t_lo")?;
    Ok((adam, scalar("train.epoch")? as usize))
}

/// Loss and gradients of one sample.
fn sample_gradients(
    model: &Model<f32>,
    input: &ModelInput,
    pyramid: &[DepthMap],
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let out = model.forward(&mut g, &p, input)?;
    let loss = total_loss(&mut g, &out.per_scale, pyramid, weights)?;
    let value = g.value(loss).item().as_f64();
    let mut grads = g.backward(loss)?;
    Ok((value, model.params().collect_grads(&p, &mut grads)))
}

/// One optimizer step on the batch-averaged gradient. Returns the mean loss.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &[(ModelInput, Vec<DepthMap>)],
    lr: f64,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Empty("batch"));
    }
    let mut acc: Option<Vec<Tensor<f32>>> = None;
    let mut loss_sum = 0.0;
    for (input, pyramid) in batch {
        let (loss, grads) = sample_gradients(model, input, pyramid, weights)?;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite {
                what: "loss",
                step: adam.t as usize,
            });
        }
        loss_sum += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&grads) {
                    for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                        *u += *v;
                    }
                }
            }
        }
    }
    let mut grads = acc.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f32;
    for t in grads.iter_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    adam_step(model.params_mut(), &grads, adam, lr, cfg)?;
    Ok(loss_sum / batch.len() as f64)
}

/// Trains `model` in place. Returns one log row per epoch run.
///
/// With `output`, the log is appended to `train_log.csv` and checkpoints are
/// written every `checkpoint_every` epochs; a non-finite loss or gradient
/// aborts with the previous checkpoint left in place.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    held_out: &[Sample],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    model.config().validate()?;
    if train_set.is_empty() {
        return Err(CoreError::Empty("training set"));
    }
    for s in train_set.iter().chain(held_out) {
        s.validate()?;
    }
    let weights = cfg.loss_for(model.config().num_fusion_nets);
    let mut adam = AdamState::new(model.params());
    let mut start = 0;
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir)?;
        if out.resume && out.state_path().exists() {
            let ck = Checkpoint::load(out.state_path())?;
            let (state, epoch) = restore_state(&ck, model.params_mut())?;
            adam = state;
            start = epoch;
        } else {
            std::fs::write(out.log_path(), format!("{}\n", LogRow::HEADER))?;
        }
    }
    let mut rows = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (batch, batch_seeds) in order.chunks(cfg.batch_size).zip(seeds.chunks(cfg.batch_size)) {
            let mut prepared = Vec::with_capacity(batch.len());
            for (&i, &seed) in batch.iter().zip(batch_seeds) {
                let (view, cloud) = training_view(&train_set[i], seed, cfg)?;
                prepared.push(prepare_input(&view, &cloud, model.config(), cfg.depth_scale)?);
            }
            loss_sum += train_step(model, &mut adam, &prepared, lr, cfg, &weights)? * batch.len() as f64;
            seen += batch.len();
        }
        let rmse = if held_out.is_empty() {
            None
        } else {
            let r = evaluate_set(model, held_out, &cfg.pattern, cfg.eval_points, cfg.point_noise, cfg.seed, cfg.depth_scale)?;
            Some(r.rmse)
        };
        let row = LogRow {
            epoch,
            step: adam.t,
            lr,
            loss: loss_sum / seen as f64,
            rmse,
        };
        if let Some(out) = output {
            let mut f = std::fs::OpenOptions::new().append(true).create(true).open(out.log_path())?;
            writeln!(f, "{}", row.csv())?;
            if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
                let state = state_checkpoint(model.params(), &adam, epoch + 1)?;
                write_atomic(&out.state_path(), &state.to_bytes())?;
                write_atomic(&out.model_path(), &Checkpoint::from_params(model.params()).to_bytes())?;
            }
        }
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// The log as CSV text, header included.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{}\n", LogRow::HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}
