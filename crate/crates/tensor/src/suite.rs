//! Finite-difference checks of every differentiable graph operation on
//! randomized shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least `0.05` away from zero, so kinked ops stay differentiable
/// under the finite-difference step.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(x * w)` with fixed pseudo-random weights `w`, so the objective
/// weighs every output element differently.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// One report per operation. Shapes are drawn from `seed` with channels ≤ 3
/// and spatial extents ≤ 16.
pub fn op_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let c = rng.random_range(1..=3usize);
    let h = 2 * rng.random_range(1..=8usize);
    let w = 2 * rng.random_range(1..=8usize);
    let shape = [c, h, w];
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        out.push(grad_check(name, f, &inputs, opts));
    };

    let (a, b) = (rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape));
    run("add", vec![a.clone(), b.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 1)
    });
    run("sub", vec![a.clone(), b.clone()], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 2)
    });
    run("mul", vec![a.clone(), b], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 3)
    });
    let pos = Tensor::from_fn(&shape, |_| rng.random_range(0.5..2.0));
    run("div", vec![a.clone(), pos.clone()], &|g, v| {
        let y = g.div(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    run("sigmoid", vec![a.clone()], &|g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, 5)
    });
    let kinked = rand_away_from_zero(&mut rng, &shape);
    run("relu", vec![kinked.clone()], &|g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 6)
    });
    run("abs", vec![kinked], &|g, v| {
        let y = g.abs(v[0]);
        weighted_sum(g, y, 7)
    });
    run("softplus", vec![a.clone()], &|g, v| {
        let y = g.softplus(v[0]);
        weighted_sum(g, y, 8)
    });
    run("log", vec![pos.clone()], &|g, v| {
        let y = g.log(v[0])?;
        weighted_sum(g, y, 9)
    });
    run("sqrt", vec![pos], &|g, v| {
        let y = g.sqrt(v[0])?;
        weighted_sum(g, y, 10)
    });
    run("square+scale+shift", vec![a.clone()], &|g, v| {
        let y = g.square(v[0]);
        let y = g.scale(y, -1.5);
        let y = g.add_scalar(y, 0.25);
        weighted_sum(g, y, 11)
    });
    run("sum", vec![a.clone()], &|g, v| {
        let s = g.sigmoid(v[0]);
        Ok(g.sum(s))
    });
    run("mean", vec![a.clone()], &|g, v| {
        let s = g.sigmoid(v[0]);
        g.mean(s)
    });
    let c_out = rng.random_range(1..=3usize);
    let conv_in = vec![
        a.clone(),
        rand_tensor(&mut rng, &[c_out, c, 3, 3]),
        rand_tensor(&mut rng, &[c_out]),
    ];
    run("conv2d stride 1", conv_in.clone(), &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1)?;
        weighted_sum(g, y, 12)
    });
    run("conv2d stride 2", conv_in, &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2)?;
        weighted_sum(g, y, 13)
    });
    run("upsample_bilinear", vec![rand_tensor(&mut rng, &[c, h / 2, w / 2])], &|g, v| {
        let y = g.upsample2(v[0])?;
        weighted_sum(g, y, 14)
    });
    let n = rng.random_range(1..=8usize).min(h * w);
    let mut cells: Vec<usize> = (0..h * w).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let idx: Vec<(usize, usize)> = cells[..n].iter().map(|&f| (f / w, f % w)).collect();
    run("gather_points", vec![a.clone()], &|g, v| {
        let y = g.gather_points(v[0], &idx)?;
        weighted_sum(g, y, 15)
    });
    run("scatter_points", vec![rand_tensor(&mut rng, &[c, n])], &|g, v| {
        let y = g.scatter_points(v[0], &idx, h, w)?;
        weighted_sum(g, y, 16)
    });
    let (bb, m, k, p) = (
        rng.random_range(1..=4usize),
        rng.random_range(1..=5usize),
        rng.random_range(1..=5usize),
        rng.random_range(1..=5usize),
    );
    run(
        "batched_matmul",
        vec![rand_tensor(&mut rng, &[bb, m, k]), rand_tensor(&mut rng, &[bb, k, p])],
        &|g, v| {
            let y = g.bmm(v[0], v[1])?;
            weighted_sum(g, y, 17)
        },
    );
    run("matmul", vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, p])], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 18)
    });
    run("transpose", vec![rand_tensor(&mut rng, &[bb, m, k])], &|g, v| {
        let y = g.transpose_last2(v[0])?;
        weighted_sum(g, y, 19)
    });
    let rows: Vec<usize> = (0..2 * m).map(|_| rng.random_range(0..m)).collect();
    run("gather_rows", vec![rand_tensor(&mut rng, &[m, k])], &|g, v| {
        let y = g.gather_rows(v[0], &rows)?;
        weighted_sum(g, y, 20)
    });
    run("softmax", vec![rand_tensor(&mut rng, &[m, k])], &|g, v| {
        let y = g.softmax_last(v[0])?;
        weighted_sum(g, y, 21)
    });
    run(
        "add_row_bias",
        vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k])],
        &|g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            weighted_sum(g, y, 22)
        },
    );
    run("concat", vec![a.clone(), rand_tensor(&mut rng, &[1, h, w])], &|g, v| {
        let y = g.concat0(v[0], v[1])?;
        weighted_sum(g, y, 23)
    });
    run("mul_broadcast", vec![a.clone(), rand_tensor(&mut rng, &[1, h, w])], &|g, v| {
        let y = g.mul_bcast0(v[0], v[1])?;
        weighted_sum(g, y, 24)
    });
    run("narrow", vec![a.clone()], &|g, v| {
        let y = g.narrow(v[0], 1, 1, h - 1)?;
        let y = g.narrow(y, 2, 0, w - 1)?;
        weighted_sum(g, y, 25)
    });
    run("reshape", vec![a], &|g, v| {
        let y = g.reshape(v[0], &[c * h, w])?;
        let y = g.sigmoid(y);
        weighted_sum(g, y, 26)
    });
    out.into_iter().collect()
}
