//! Finite-difference verification of every differentiable operation, the
//! loss terms, the point convolution and a two-level model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefuse_tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use sparsefuse_tensor::suite::{op_suite, rand_tensor, weighted_sum};
use sparsefuse_tensor::{BoundParams, Graph, ParamStore, Tensor, TensorError, Var};

use crate::data::{sample_points, synthesize_scene, Pattern, SamplingSpec};
use crate::depth::DepthMap;
use crate::error::{CoreError, Result};
use crate::fkaconv::{FkaBlock, FkaParams, NeighborhoodSet};
use crate::geometry::PointCloud;
use crate::loss::{l_grad, l_log, l_norm, total_loss, LossWeights};
use crate::network::{FusionConfig, Model, ModelInput};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Negative control: perturb every analytic gradient.
    pub corrupt: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tol: 2e-3,
            corrupt: false,
        }
    }
}

fn tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::invalid("core", other.to_string()),
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
    let values = (0..h * w)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(1.0..3.0) })
        .collect();
    DepthMap::from_values(h, w, values).expect("finite values")
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
            ]
        })
        .collect();
    PointCloud::new(pts).expect("finite points")
}

/// Gives every zero tensor and bias small random values so that no
/// pre-activation rests on a ReLU kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, t)| n.ends_with(".bias") || t.max_abs() == 0.0)
        .map(|(id, _, t)| (id, t.shape().to_vec()))
        .collect();
    for (id, shape) in ids {
        let t = rand_tensor(rng, &shape).map(|v| 0.2 * v);
        store.set(id, t).expect("same shape");
    }
}

/// Checks `f` with respect to the parameters in `store` and `data`.
fn check_with_params(
    name: &str,
    store: &ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph<f64>, &BoundParams, &[Var]) -> Result<Var>,
) -> sparsefuse_tensor::Result<GradCheckReport> {
    let np = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.extend(data);
    grad_check(
        name,
        |g, v| {
            let p = BoundParams::from_vars(v[..np].to_vec());
            f(g, &p, &v[np..]).map_err(tensor_err)
        },
        &inputs,
        opts,
    )
}

/// Every report of the suite. Shapes stay within 3 x 16 x 16 and clouds
/// within 8 points.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<GradCheckReport>> {
    let base = GradCheckOptions {
        tol: opts.tol,
        corrupt: opts.corrupt,
        ..GradCheckOptions::default()
    };
    // Composites mix many kernels; a smaller step keeps truncation error
    // below the tolerance.
    let fine = GradCheckOptions {
        eps: 1e-6,
        ..base.clone()
    };
    let mut reports = op_suite(opts.seed, &base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);

    let h = 2 * rng.random_range(2..=8usize);
    let w = 2 * rng.random_range(2..=8usize);
    let gt = random_map(&mut rng, h, w);
    let pred = Tensor::from_fn(&[1, h, w], |_| rng.random_range(1.0..3.0));
    type Term = fn(&mut Graph<f64>, Var, &DepthMap) -> Result<Var>;
    let terms: [(&str, Term); 3] = [
        ("l_log", |g, p, t| l_log(g, p, t, 0.5)),
        ("l_grad", l_grad),
        ("l_norm", l_norm),
    ];
    for (name, term) in terms {
        reports.push(grad_check(
            name,
            |g, v| term(g, v[0], &gt).map_err(tensor_err),
            std::slice::from_ref(&pred),
            &fine,
        )?);
    }
    let pyr = gt.pyramid(2)?;
    let preds: Vec<Tensor<f64>> = pyr
        .iter()
        .map(|m| Tensor::from_fn(&[1, m.height(), m.width()], |_| rng.random_range(1.0..3.0)))
        .collect();
    let weights = LossWeights::for_scales(2);
    reports.push(grad_check(
        "total_loss",
        |g, v| total_loss(g, v, &pyr, &weights).map_err(tensor_err),
        &preds,
        &fine,
    )?);

    let n = rng.random_range(2..=8usize);
    let c = rng.random_range(1..=3usize);
    let k = n.min(4);
    let hoods = NeighborhoodSet::build(&random_cloud(&mut rng, n), k)?;
    let mut store = ParamStore::<f64>::new();
    let layer = FkaParams::register(&mut store, "fka", c, c, 3, &mut rng)?;
    jitter(&mut store, &mut rng);
    let feats = rand_tensor(&mut rng, &[c, n]);
    reports.push(check_with_params("fkaconv", &store, vec![feats.clone()], &fine, |g, p, v| {
        let rel = hoods.rel_coords_var(g);
        let y = layer.forward(g, p, v[0], &hoods, rel)?;
        Ok(weighted_sum(g, y, 1)?)
    })?);
    let mut store = ParamStore::<f64>::new();
    let block = FkaBlock::register(&mut store, "block", c, 3, &mut rng)?;
    jitter(&mut store, &mut rng);
    reports.push(check_with_params("fkaconv block", &store, vec![feats], &fine, |g, p, v| {
        let y = block.forward(g, p, v[0], &hoods)?;
        Ok(weighted_sum(g, y, 2)?)
    })?);

    let cfg = FusionConfig {
        num_fusion_nets: 2,
        channels: vec![3, 2],
        stem_channels: 2,
        neighbors: 4,
        kernel_elems: 3,
        height: 16,
        width: 16,
        ..FusionConfig::default()
    };
    let mut model = Model::<f64>::new(cfg.clone(), opts.seed)?;
    jitter(model.params_mut(), &mut rng);
    let mut scene = synthesize_scene(opts.seed, cfg.height, cfg.width);
    scene.cloud = sample_points(&scene, &SamplingSpec::new(Pattern::Random, 8, opts.seed))?;
    let input = ModelInput::from_cloud(scene.rgb_tensor(), &scene.cloud, &scene.intrinsics, 10.0, &cfg)?;
    let pyramid = scene.gt.scale(0.1).pyramid(2)?;
    let model_opts = GradCheckOptions {
        max_coords: Some(24),
        ..fine.clone()
    };
    reports.push(check_with_params("model (2 levels)", model.params(), Vec::new(), &model_opts, |g, p, _| {
        let out = model.forward(g, p, &input)?;
        let a = weighted_sum(g, out.depth, 1)?;
        let conf = out.confidence.expect("confidence enabled");
        let b = weighted_sum(g, conf, 2)?;
        let loss = total_loss(g, &out.per_scale, &pyramid, &weights)?;
        let s = g.add(a, b)?;
        Ok(g.add(s, loss)?)
    })?);
    Ok(reports)
}
