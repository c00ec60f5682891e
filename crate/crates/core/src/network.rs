//! The multi-scale fusion network.
//!
//! Data flow for `n` Fusion-Nets on an `H x W` image (level 0 is full
//! resolution, level `n-1` the coarsest):
//!
//! ```text
//! rgb + sparse depth -> stem -> down_0 -> down_1 (s2) -> ... -> down_{n-1}
//!                                  |          |                    |
//!                               skip_0     skip_1               x_{n-1}
//! x_{n-1} -> FusionNet_{n-1} -> up -> + skip_{n-2} -> FusionNet_{n-2} -> ... -> FusionNet_0
//! ```
//!
//! Every Fusion-Net emits a depth map at its own resolution; the finest one
//! is the prediction, and all of them feed the multi-scale loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsefuse_tensor::{BoundParams, Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::fkaconv::{FkaBlock, NeighborhoodSet};
use crate::geometry::{
    normalize_unit_sphere, project_points, rescale_indices, CameraIntrinsics, PointCloud,
    SparseDepthMap,
};
use crate::layers::{Conv2dLayer, Init};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub num_fusion_nets: usize,
    /// Channel width of each Fusion-Net, ordered coarse to fine.
    pub channels: Vec<usize>,
    /// Width of each of the two stem branches; the stem emits twice this.
    pub stem_channels: usize,
    /// Neighbors per point in the 3D branch.
    pub neighbors: usize,
    /// Kernel elements of the alignment convolution.
    pub kernel_elems: usize,
    pub use_confidence: bool,
    pub use_3d_branch: bool,
    pub height: usize,
    pub width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_fusion_nets: 5,
            channels: vec![32, 64, 128, 128, 128],
            stem_channels: 256,
            neighbors: 9,
            kernel_elems: 9,
            use_confidence: true,
            use_3d_branch: true,
            height: 64,
            width: 64,
        }
    }
}

impl FusionConfig {
    /// Small uniform-width variant used for desk-scale training.
    pub fn desk() -> Self {
        Self {
            channels: vec![16; 5],
            stem_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_fusion_nets;
        if !(2..=6).contains(&n) {
            return Err(CoreError::config(format!(
                "fusion_nets = {n}, expected 2..=6"
            )));
        }
        if self.channels.len() != n {
            return Err(CoreError::config(format!(
                "{} channel widths for {n} Fusion-Nets",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.stem_channels == 0 {
            return Err(CoreError::config("channel widths must be positive"));
        }
        if self.neighbors == 0 || self.kernel_elems == 0 {
            return Err(CoreError::config(
                "neighbors and kernel_elems must be positive",
            ));
        }
        // The coarsest Fusion-Net still halves its input in the encoder.
        let m = 1usize << n;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(CoreError::config(format!(
                "image size {}x{} must be a positive multiple of {m} for {n} Fusion-Nets",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Channel width at `level` (0 = finest).
    pub fn width_at(&self, level: usize) -> usize {
        self.channels[self.num_fusion_nets - 1 - level]
    }

    pub fn size_at(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }
}

/// Convolutional stages of one Fusion-Net.
#[derive(Clone, Debug)]
struct FusionNet {
    enc_a: Conv2dLayer,
    enc_b1: Conv2dLayer,
    enc_b2: Conv2dLayer,
    enc_fuse: Conv2dLayer,
    fka: Option<FkaBlock>,
    conf: Option<[Conv2dLayer; 3]>,
    dec: [Conv2dLayer; 2],
    dec_head: Conv2dLayer,
    ref1: Conv2dLayer,
    ref2: Conv2dLayer,
    ref_head: Conv2dLayer,
}

impl FusionNet {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv_init = |store: &mut ParamStore<T>, part: &str, ci, co, init, rng: &mut ChaCha8Rng| {
            Conv2dLayer::register_with(store, &format!("{name}.{part}"), ci, co, 3, init, rng)
        };
        let conv = |store: &mut ParamStore<T>, part: &str, ci, co, rng: &mut ChaCha8Rng| {
            conv_init(store, part, ci, co, Init::He, rng)
        };
        let enc_a = conv(store, "enc.a", c, c, rng)?;
        let enc_b1 = conv(store, "enc.b1", c, c, rng)?;
        let enc_b2 = conv(store, "enc.b2", c, c, rng)?;
        let fka = if cfg.use_3d_branch {
            Some(FkaBlock::register(
                store,
                &format!("{name}.enc.3d"),
                c,
                cfg.kernel_elems,
                rng,
            )?)
        } else {
            None
        };
        let enc_fuse = conv_init(store, "enc.fuse", c, c, Init::Zero, rng)?;
        let conf = if cfg.use_confidence {
            Some([
                conv(store, "conf.c1", c, c, rng)?,
                conv(store, "conf.c2", c, c, rng)?,
                conv_init(store, "conf.c3", c, 1, Init::Linear, rng)?,
            ])
        } else {
            None
        };
        Ok(Self {
            enc_a,
            enc_b1,
            enc_b2,
            enc_fuse,
            fka,
            conf,
            dec: [
                conv(store, "dec.c1", c, c, rng)?,
                conv(store, "dec.c2", c, c, rng)?,
            ],
            dec_head: conv_init(store, "dec.head", c, 1, Init::Linear, rng)?,
            ref1: conv(store, "ref.c1", c, c, rng)?,
            ref2: conv_init(store, "ref.c2", c, c, Init::Zero, rng)?,
            ref_head: conv_init(store, "ref.head", c, 1, Init::Linear, rng)?,
        })
    }
}

/// Points visible at one level of the pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPoints {
    pub indices: Vec<(usize, usize)>,
    /// Neighborhoods in unit-sphere coordinates; `None` when no point survives.
    pub hoods: Option<NeighborhoodSet>,
}

/// Network input with per-level point bookkeeping precomputed.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `3 x H x W`, values in `[0, 1]`.
    pub rgb: Tensor<f64>,
    /// Full-resolution sparse depth in normalized depth units.
    pub sparse: SparseDepthMap,
    pub levels: Vec<LevelPoints>,
}

impl ModelInput {
    /// `sparse` must already be in normalized depth units and `unit_cloud`
    /// must be indexable by its `point_index` entries.
    pub fn new(
        rgb: Tensor<f64>,
        sparse: SparseDepthMap,
        unit_cloud: &PointCloud,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if rgb.shape() != [3, cfg.height, cfg.width] {
            return Err(CoreError::invalid(format!(
                "rgb shape {:?} does not match configured {}x{}",
                rgb.shape(),
                cfg.height,
                cfg.width
            )));
        }
        if sparse.height() != cfg.height || sparse.width() != cfg.width {
            return Err(CoreError::invalid(format!(
                "sparse map {}x{} does not match configured {}x{}",
                sparse.height(),
                sparse.width(),
                cfg.height,
                cfg.width
            )));
        }
        let mut levels = Vec::with_capacity(cfg.num_fusion_nets);
        for level in 0..cfg.num_fusion_nets {
            let m = rescale_indices(&sparse, 1 << level)?;
            let hoods = if m.is_empty() {
                None
            } else {
                let sub = unit_cloud.subset(m.point_index());
                Some(NeighborhoodSet::build(&sub, cfg.neighbors)?)
            };
            levels.push(LevelPoints {
                indices: m.indices().to_vec(),
                hoods,
            });
        }
        Ok(Self {
            rgb,
            sparse,
            levels,
        })
    }

    /// Projects a camera-frame cloud, divides depths by `depth_scale`, and
    /// normalizes point coordinates to the unit sphere.
    pub fn from_cloud(
        rgb: Tensor<f64>,
        cloud: &PointCloud,
        intrinsics: &CameraIntrinsics,
        depth_scale: f64,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        if !(depth_scale > 0.0) {
            return Err(CoreError::invalid(format!(
                "depth scale {depth_scale} must be positive"
            )));
        }
        let proj = project_points(cloud, intrinsics);
        let sparse = proj.map.scale_depth(1.0 / depth_scale);
        let unit = if cloud.is_empty() {
            PointCloud::empty()
        } else {
            normalize_unit_sphere(cloud)?.0
        };
        Self::new(rgb, sparse, &unit, cfg)
    }

    pub fn point_count(&self) -> usize {
        self.sparse.len()
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 x H x W` final depth.
    pub depth: Var,
    /// `1 x H x W` confidence of the finest Fusion-Net, when enabled.
    pub confidence: Option<Var>,
    /// Depth per Fusion-Net, finest first.
    pub per_scale: Vec<Var>,
}

/// A dense prediction materialized out of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthEstimate {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub confidence: Option<Vec<f64>>,
    /// `(height, width, values)` per Fusion-Net, finest first.
    pub per_scale: Vec<(usize, usize, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: FusionConfig,
    params: ParamStore<T>,
    stem_sparse: [Conv2dLayer; 2],
    stem_rgbd: [Conv2dLayer; 2],
    down: Vec<Vec<Conv2dLayer>>,
    nets: Vec<FusionNet>,
    /// `ups[l]` carries features from level `l + 1` to level `l`.
    ups: Vec<Conv2dLayer>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of `(config, seed)`.
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = config.stem_channels;
        let stem_sparse = [
            Conv2dLayer::register(&mut store, "stem.sparse1", 1, s, 3, &mut rng)?,
            Conv2dLayer::register(&mut store, "stem.sparse2", s, s, 3, &mut rng)?,
        ];
        let stem_rgbd = [
            Conv2dLayer::register(&mut store, "stem.rgbd1", 4, s, 3, &mut rng)?,
            Conv2dLayer::register(&mut store, "stem.rgbd2", s, s, 3, &mut rng)?,
        ];
        let n = config.num_fusion_nets;
        let mut down = Vec::with_capacity(n);
        down.push(vec![Conv2dLayer::register(
            &mut store,
            "down0",
            2 * s,
            config.width_at(0),
            3,
            &mut rng,
        )?]);
        for l in 1..n {
            let (ci, co) = (config.width_at(l - 1), config.width_at(l));
            down.push(vec![
                Conv2dLayer::register(&mut store, &format!("down{l}.a"), ci, co, 3, &mut rng)?,
                Conv2dLayer::register(&mut store, &format!("down{l}.b"), co, co, 3, &mut rng)?,
            ]);
        }
        let mut nets = Vec::with_capacity(n);
        let mut ups = Vec::with_capacity(n - 1);
        for l in (0..n).rev() {
            nets.push(FusionNet::register(
                &mut store,
                &format!("fusion{l}"),
                config.width_at(l),
                &config,
                &mut rng,
            )?);
            if l > 0 {
                ups.push(Conv2dLayer::register_with(
                    &mut store,
                    &format!("up{l}"),
                    config.width_at(l),
                    config.width_at(l - 1),
                    3,
                    Init::Linear,
                    &mut rng,
                )?);
            }
        }
        nets.reverse();
        ups.reverse();
        Ok(Self {
            config,
            params: store,
            stem_sparse,
            stem_rgbd,
            down,
            nets,
            ups,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem_sparse: self.stem_sparse.clone(),
            stem_rgbd: self.stem_rgbd.clone(),
            down: self.down.clone(),
            nets: self.nets.clone(),
            ups: self.ups.clone(),
        }
    }

    /// Two convolutions on the sparse depth and two on the RGBD stack,
    /// concatenated along channels.
    pub fn stem(&self, g: &mut Graph<T>, p: &BoundParams, rgb: Var, sparse: Var) -> Result<Var> {
        let (rs, ss) = (g.shape(rgb).to_vec(), g.shape(sparse).to_vec());
        if rs.len() != 3 || rs[0] != 3 || ss != [1, rs[1], rs[2]] {
            return Err(CoreError::invalid(format!(
                "stem: rgb {rs:?} and sparse {ss:?} disagree"
            )));
        }
        let a = self.stem_sparse[0].forward_relu(g, p, sparse, 1)?;
        let a = self.stem_sparse[1].forward_relu(g, p, a, 1)?;
        let rgbd = g.concat0(rgb, sparse)?;
        let b = self.stem_rgbd[0].forward_relu(g, p, rgbd, 1)?;
        let b = self.stem_rgbd[1].forward_relu(g, p, b, 1)?;
        Ok(g.concat0(a, b)?)
    }

    /// Two-branch 2D encoder plus the point branch, fused and added back to
    /// the input.
    pub fn fusion_encoder(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        level: usize,
        x: Var,
        points: &LevelPoints,
    ) -> Result<Var> {
        let net = &self.nets[level];
        let s = g.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(CoreError::invalid(format!(
                "fusion encoder needs even spatial extents, got {s:?}"
            )));
        }
        let a = net.enc_a.forward_relu(g, p, x, 1)?;
        let b = net.enc_b1.forward_relu(g, p, x, 2)?;
        let b = net.enc_b2.forward_relu(g, p, b, 1)?;
        let b = g.upsample2(b)?;
        let mut fused = g.add(a, b)?;
        if let (Some(block), Some(hoods)) = (&net.fka, &points.hoods) {
            let feats = g.gather_points(x, &points.indices)?;
            let out = block.forward(g, p, feats, hoods)?;
            let grid = g.scatter_points(out, &points.indices, s[1], s[2])?;
            fused = g.add(fused, grid)?;
        }
        let y = net.enc_fuse.forward(g, p, fused, 1)?;
        Ok(g.add(y, x)?)
    }

    /// Three convolutions and a sigmoid; `None` when the predictor is disabled.
    pub fn confidence_predictor(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        level: usize,
        encoded: Var,
    ) -> Result<Option<Var>> {
        let Some(conf) = &self.nets[level].conf else {
            return Ok(None);
        };
        let h = conf[0].forward_relu(g, p, encoded, 1)?;
        let h = conf[1].forward_relu(g, p, h, 1)?;
        let logits = conf[2].forward(g, p, h, 1)?;
        Ok(Some(g.sigmoid(logits)))
    }

    /// Decoder, confidence rectification `x * c + x` of both the decoder
    /// features and the initial depth, then refinement.
    ///
    /// Returns `(features, depth)` at this level.
    pub fn decode_refine(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        level: usize,
        encoded: Var,
        confidence: Option<Var>,
    ) -> Result<(Var, Var)> {
        let net = &self.nets[level];
        let mut f = encoded;
        for conv in &net.dec {
            f = conv.forward_relu(g, p, f, 1)?;
        }
        let d0 = net.dec_head.forward(g, p, f, 1)?;
        let (f, d0) = match confidence {
            Some(c) => {
                let fc = g.mul_bcast0(f, c)?;
                let dc = g.mul(d0, c)?;
                (g.add(fc, f)?, g.add(dc, d0)?)
            }
            None => (f, d0),
        };
        let r = net.ref1.forward_relu(g, p, f, 1)?;
        let r = net.ref2.forward(g, p, r, 1)?;
        let r = g.add(r, f)?;
        let delta = net.ref_head.forward(g, p, r, 1)?;
        let raw = g.add(d0, delta)?;
        Ok((r, g.softplus(raw)))
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        input: &ModelInput,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        cfg.validate()?;
        if input.levels.len() != cfg.num_fusion_nets {
            return Err(CoreError::invalid(format!(
                "input prepared for {} levels, model has {}",
                input.levels.len(),
                cfg.num_fusion_nets
            )));
        }
        let (h, w) = (cfg.height, cfg.width);
        if input.rgb.shape() != [3, h, w] || input.sparse.height() != h || input.sparse.width() != w
        {
            return Err(CoreError::invalid(
                "input size does not match the model configuration",
            ));
        }
        let rgb = g.constant(input.rgb.cast());
        let sparse = g.constant(Tensor::from_fn(&[1, h, w], |i| {
            T::of(input.sparse.depth()[i])
        }));
        let stem = self.stem(g, p, rgb, sparse)?;

        let n = cfg.num_fusion_nets;
        let mut skips = Vec::with_capacity(n);
        let mut x = self.down[0][0].forward_relu(g, p, stem, 1)?;
        skips.push(x);
        for l in 1..n {
            x = self.down[l][0].forward_relu(g, p, x, 2)?;
            x = self.down[l][1].forward_relu(g, p, x, 1)?;
            skips.push(x);
        }

        let mut per_scale = vec![None; n];
        let mut confidence = None;
        let mut x = skips[n - 1];
        for l in (0..n).rev() {
            let encoded = self.fusion_encoder(g, p, l, x, &input.levels[l])?;
            let conf = self.confidence_predictor(g, p, l, encoded)?;
            let (feats, depth) = self.decode_refine(g, p, l, encoded, conf)?;
            per_scale[l] = Some(depth);
            if l == 0 {
                confidence = conf;
            } else {
                let up = self.ups[l - 1].forward(g, p, feats, 1)?;
                let up = g.upsample2(up)?;
                x = g.add(skips[l - 1], up)?;
            }
        }
        let per_scale: Vec<Var> = per_scale
            .into_iter()
            .map(|v| v.expect("every level ran"))
            .collect();
        Ok(ForwardOutput {
            depth: per_scale[0],
            confidence,
            per_scale,
        })
    }

    /// Inference with frozen parameters.
    pub fn predict(&self, input: &ModelInput) -> Result<DepthEstimate> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, input)?;
        let vals = |v: Var| {
            g.value(v)
                .data()
                .iter()
                .map(|x| x.as_f64())
                .collect::<Vec<f64>>()
        };
        Ok(DepthEstimate {
            height: self.config.height,
            width: self.config.width,
            depth: vals(out.depth),
            confidence: out.confidence.map(vals),
            per_scale: out
                .per_scale
                .iter()
                .map(|&v| {
                    let s = g.value(v).shape();
                    (s[1], s[2], vals(v))
                })
                .collect(),
        })
    }
}

/// Total number of scalar parameters.
pub fn count_parameters<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.count()
}
