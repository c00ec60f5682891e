use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefuse_core::fkaconv::{
    apply_alignment, build_neighborhoods, FkaBlock, FkaParams, NeighborhoodSet,
};
use sparsefuse_core::geometry::{knn, PointCloud};
use sparsefuse_tensor::gradcheck::{grad_check, GradCheckOptions};
use sparsefuse_tensor::suite::{rand_tensor, weighted_sum};
use sparsefuse_tensor::{BoundParams, Graph, ParamStore, Tensor};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.0..3.0),
                ]
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn neighborhoods_match_knn_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pc = random_cloud(&mut rng, 20);
    let hoods = build_neighborhoods(&pc, 5).unwrap();
    let rows = knn(&pc, 5).unwrap();
    for (i, h) in hoods.iter().enumerate() {
        assert_eq!(h.center, i);
        assert_eq!(h.neighbors, rows[i]);
        let c = pc.get(i);
        let dist = |p: [f64; 3]| {
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
        };
        let r = h
            .neighbors
            .iter()
            .map(|&j| dist(pc.get(j)))
            .fold(0.0, f64::max);
        for (j, rel) in h.neighbors.iter().zip(&h.rel_coords) {
            let p = pc.get(*j);
            for a in 0..3 {
                assert!((rel[a] - (p[a] - c[a]) / r).abs() < 1e-12);
            }
        }
        assert_eq!(h.rel_coords[0], [0.0; 3]);
    }
}

#[test]
fn single_kernel_element_with_uniform_alignment_averages_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, k, c) = (7, 3, 4);
    let pc = random_cloud(&mut rng, n);
    let hoods = NeighborhoodSet::build(&pc, k).unwrap();
    let feats = rand_tensor(&mut rng, &[c, n]);
    let mut kernel = Tensor::zeros(&[1, c, c]);
    for i in 0..c {
        kernel.data_mut()[i * c + i] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let f = g.constant(feats.clone());
    let m = g.constant(Tensor::full(&[n * k, 1], 1.0 / k as f64));
    let kv = g.constant(kernel);
    let out = apply_alignment(&mut g, f, &hoods, m, kv).unwrap();
    let out = g.value(out);
    for i in 0..n {
        for ch in 0..c {
            let mean: f64 = hoods.neighbors[i * k..(i + 1) * k]
                .iter()
                .map(|&j| feats.data()[ch * n + j])
                .sum::<f64>()
                / k as f64;
            assert!((out.data()[ch * n + i] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_point_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c_in, c_out, kk) = (3, 2, 4);
    let mut store = ParamStore::<f64>::new();
    let layer = FkaParams::register(&mut store, "l", c_in, c_out, kk, &mut rng).unwrap();
    for id in [layer.align_hidden.bias, layer.align_out.bias] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    let pc = PointCloud::new(vec![[0.3, -0.2, 2.0]]).unwrap();
    let hoods = NeighborhoodSet::build(&pc, 1).unwrap();
    let feats = rand_tensor(&mut rng, &[c_in, 1]);

    // With a zero offset the perceptron sees only its biases.
    let b1 = store.get(layer.align_hidden.bias).data().to_vec();
    let w2 = store.get(layer.align_out.weight).data().to_vec();
    let b2 = store.get(layer.align_out.bias).data().to_vec();
    let hidden: Vec<f64> = b1.iter().map(|v| v.max(0.0)).collect();
    let logits: Vec<f64> = (0..kk)
        .map(|e| {
            b2[e]
                + hidden
                    .iter()
                    .enumerate()
                    .map(|(j, h)| h * w2[j * kk + e])
                    .sum::<f64>()
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let m: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    let kernel = store.get(layer.kernel).data().to_vec();
    let expect: Vec<f64> = (0..c_out)
        .map(|co| {
            (0..kk)
                .map(|e| {
                    m[e] * (0..c_in)
                        .map(|ci| feats.data()[ci] * kernel[(e * c_in + ci) * c_out + co])
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f = g.constant(feats);
    let rel = hoods.rel_coords_var(&mut g);
    let out = layer.forward(&mut g, &p, f, &hoods, rel).unwrap();
    for (a, b) in g.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

/// Grid points with a hard one-hot alignment reproduce a 3x3 convolution.
#[test]
fn grid_alignment_reproduces_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w, c_in, c_out) = (8usize, 8usize, 3usize, 4usize);
    for _ in 0..5 {
        let image = Tensor::<f32>::from_fn(&[c_in, h, w], |_| rng.random_range(-1.0..1.0));
        let weight = Tensor::<f32>::from_fn(&[c_out, c_in, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (diff, _) = grid_vs_conv(&image, &weight);
        assert!(diff < 1e-5, "max abs diff {diff}");
    }
}

fn grid_vs_conv(image: &Tensor<f32>, weight: &Tensor<f32>) -> (f64, usize) {
    let (c_in, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let c_out = weight.shape()[0];
    let n = h * w;
    let k = 9;
    let pc = PointCloud::new(
        (0..n)
            .map(|i| [(i % w) as f64, (i / w) as f64, 1.0])
            .collect(),
    )
    .unwrap();
    let hoods = NeighborhoodSet::build(&pc, k).unwrap();
    let mut align = vec![0.0f32; n * k * 9];
    let mut hits = 0;
    for i in 0..n {
        for j in 0..k {
            let nb = hoods.neighbors[i * k + j];
            let dy = (nb / w) as isize - (i / w) as isize;
            let dx = (nb % w) as isize - (i % w) as isize;
            if dy.abs() <= 1 && dx.abs() <= 1 {
                align[(i * k + j) * 9 + ((dy + 1) * 3 + dx + 1) as usize] = 1.0;
                hits += 1;
            }
        }
    }
    let mut kernel = vec![0.0f32; 9 * c_in * c_out];
    for e in 0..9 {
        for ci in 0..c_in {
            for co in 0..c_out {
                kernel[(e * c_in + ci) * c_out + co] =
                    weight.data()[((co * c_in + ci) * 3 + e / 3) * 3 + e % 3];
            }
        }
    }
    let mut g = Graph::<f32>::new();
    let feats = g.constant(image.clone().reshape(&[c_in, n]).unwrap());
    let m = g.constant(Tensor::new(&[n * k, 9], align).unwrap());
    let kv = g.constant(Tensor::new(&[9, c_in, c_out], kernel).unwrap());
    let pts = apply_alignment(&mut g, feats, &hoods, m, kv).unwrap();
    let x = g.constant(image.clone());
    let wv = g.constant(weight.clone());
    let b = g.constant(Tensor::zeros(&[c_out]));
    let conv = g.conv2d(x, wv, b, 1).unwrap();
    let diff = g
        .value(pts)
        .data()
        .iter()
        .zip(g.value(conv).data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    (diff, hits)
}

#[test]
fn grid_alignment_covers_every_in_bounds_offset() {
    let image = Tensor::<f32>::ones(&[1, 8, 8]);
    let weight = Tensor::<f32>::ones(&[1, 1, 3, 3]);
    let (_, hits) = grid_vs_conv(&image, &weight);
    // 6x6 interior cells see 9 taps, 24 edge cells 6, 4 corners 4.
    assert_eq!(hits, 36 * 9 + 24 * 6 + 4 * 4);
}

fn run_block(
    store: &ParamStore<f64>,
    block: &FkaBlock,
    pc: &PointCloud,
    feats: &Tensor<f64>,
    k: usize,
) -> Tensor<f64> {
    let hoods = NeighborhoodSet::build(pc, k).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.constant(feats.clone());
    let out = block.forward(&mut g, &p, f, &hoods).unwrap();
    g.value(out).clone()
}

#[test]
fn block_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, c) = (16, 4);
    let mut store = ParamStore::<f64>::new();
    let block = FkaBlock::register(&mut store, "b", c, 9, &mut rng).unwrap();
    let pc = random_cloud(&mut rng, n);
    let feats = rand_tensor(&mut rng, &[c, n]);
    let out = run_block(&store, &block, &pc, &feats, 9);

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pc2 = pc.subset(&perm);
    let feats2 = Tensor::from_fn(&[c, n], |f| feats.data()[(f / n) * n + perm[f % n]]);
    let out2 = run_block(&store, &block, &pc2, &feats2, 9);
    for ch in 0..c {
        for (i, &src) in perm.iter().enumerate() {
            assert!((out2.data()[ch * n + i] - out.data()[ch * n + src]).abs() < 1e-10);
        }
    }
}

#[test]
fn block_with_zero_weights_is_zero_and_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let block = FkaBlock::register(&mut store, "b", 3, 9, &mut rng).unwrap();
    let pc = random_cloud(&mut rng, 6);
    let feats = rand_tensor(&mut rng, &[3, 6]);
    assert_eq!(run_block(&store, &block, &pc, &feats, 9).shape(), &[3, 6]);
    for id in [block.first.kernel, block.second.kernel] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let out = run_block(&store, &block, &pc, &feats, 9);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_feature_count_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let block = FkaBlock::register(&mut store, "b", 3, 9, &mut rng).unwrap();
    let hoods = NeighborhoodSet::build(&random_cloud(&mut rng, 6), 3).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f = g.constant(rand_tensor(&mut rng, &[3, 5]));
    assert!(block.forward(&mut g, &p, f, &hoods).is_err());
}

/// Parameters first, then data inputs; the closure rebinds the parameters
/// from the checked variables.
fn check_layer(
    name: &str,
    store: &ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    f: impl Fn(
        &mut Graph<f64>,
        &BoundParams,
        &[sparsefuse_tensor::Var],
    ) -> sparsefuse_tensor::Result<sparsefuse_tensor::Var>,
) {
    let np = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.extend(data);
    let report = grad_check(
        name,
        |g, v| {
            let p = BoundParams::from_vars(v[..np].to_vec());
            f(g, &p, &v[np..])
        },
        &inputs,
        &GradCheckOptions {
            eps: 1e-6,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn align_forward_and_block_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, c) = (12, 3);
    let pc = random_cloud(&mut rng, n);
    let hoods = NeighborhoodSet::build(&pc, 9).unwrap();
    let mut store = ParamStore::<f64>::new();
    let layer = FkaParams::register(&mut store, "l", c, c, 9, &mut rng).unwrap();
    for id in [layer.align_hidden.bias, layer.align_out.bias] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    let rel = Tensor::new(&[n * 9, 3], hoods.rel_coords.clone()).unwrap();
    check_layer("align", &store, vec![rel], |g, p, v| {
        let m = layer.align(g, p, v[0]).map_err(to_tensor_err)?;
        weighted_sum(g, m, 1)
    });
    let feats = rand_tensor(&mut rng, &[c, n]);
    check_layer("fkaconv", &store, vec![feats.clone()], |g, p, v| {
        let rel = hoods.rel_coords_var(g);
        let y = layer
            .forward(g, p, v[0], &hoods, rel)
            .map_err(to_tensor_err)?;
        weighted_sum(g, y, 2)
    });

    let mut store = ParamStore::<f64>::new();
    let block = FkaBlock::register(&mut store, "b", c, 9, &mut rng).unwrap();
    // Zero biases put the center neighbor exactly on the ReLU kink.
    for l in [&block.first, &block.second] {
        for id in [l.align_hidden.bias, l.align_out.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, rand_tensor(&mut rng, &shape)).unwrap();
        }
    }
    check_layer("fkaconv block", &store, vec![feats], |g, p, v| {
        let y = block.forward(g, p, v[0], &hoods).map_err(to_tensor_err)?;
        weighted_sum(g, y, 3)
    });
}

fn to_tensor_err(e: sparsefuse_core::CoreError) -> sparsefuse_tensor::TensorError {
    match e {
        sparsefuse_core::CoreError::Tensor(t) => t,
        other => sparsefuse_tensor::TensorError::invalid("core", other.to_string()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alignment_rows_sum_to_one(seed in any::<u64>(), n in 1usize..12, k in 1usize..10, kk in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = random_cloud(&mut rng, n);
        let hoods = NeighborhoodSet::build(&pc, k).unwrap();
        let mut store = ParamStore::<f32>::new();
        let layer = FkaParams::register(&mut store, "l", 2, 2, kk, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let rel = hoods.rel_coords_var(&mut g);
        let m = layer.align(&mut g, &p, rel).unwrap();
        let m = g.value(m);
        prop_assert_eq!(m.shape(), &[n * k, kk]);
        for row in m.data().chunks(kk) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
