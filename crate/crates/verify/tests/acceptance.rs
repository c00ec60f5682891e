//! End-to-end acceptance checks. Prints one PASS or FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefuse_core::data::io::{
    decode_float_map, encode_float_map, read_depth_png, read_manifest, read_rgb_png, write_dataset,
    write_depth_png,
};
use sparsefuse_core::data::{sample_points, synthesize_scene, Pattern, Sample, SamplingSpec};
use sparsefuse_core::depth::DepthMap;
use sparsefuse_core::fkaconv::{apply_alignment, NeighborhoodSet};
use sparsefuse_core::geometry::{format_points, parse_points, PointCloud};
use sparsefuse_core::gradsuite::{gradient_suite, SuiteOptions};
use sparsefuse_core::loss::{total_loss, LossWeights};
use sparsefuse_core::metrics::{evaluate, sweep, sweep_csv, MetricReport};
use sparsefuse_core::network::{count_parameters, FusionConfig, Model};
use sparsefuse_core::trainer::{evaluate_set, predict_depth, train, TrainConfig, TrainOutput};
use sparsefuse_tensor::checkpoint::Checkpoint;
use sparsefuse_tensor::{Graph, Tensor};

type Outcome = Result<(bool, String), String>;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", gradients),
        (2, "grid degeneracy", grid_degeneracy),
        (3, "metric oracle", metric_oracle),
        (4, "loss arithmetic", loss_arithmetic),
        (5, "overfit convergence", overfit),
        (6, "sparsity monotonicity", sparsity),
        (7, "ablation direction", ablation),
        (8, "parameter calibration", parameters),
        (9, "determinism and formats", determinism),
    ];
    let mut failed = 0;
    let mut shared = None;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = if id == 6 || id == 7 {
            // Both read the same family of trained models.
            let runs = shared.get_or_insert_with(seed_runs);
            match runs {
                Ok(r) if id == 6 => sparsity_from(r),
                Ok(r) => ablation_from(r),
                Err(e) => Err(e.clone()),
            }
        } else {
            run()
        };
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {verdict} {name} ({secs:.1}s): {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut total = 0;
    let mut worst: Option<(f64, String)> = None;
    let mut failures = Vec::new();
    for seed in 0..3 {
        let reports = gradient_suite(&SuiteOptions { seed, tol: 2e-3, corrupt: false }).map_err(err)?;
        for r in reports {
            total += 1;
            if !r.passed {
                failures.push(format!("{} (seed {seed})", r.name));
            }
            if worst.as_ref().is_none_or(|(e, _)| r.max_rel_err > *e) {
                worst = Some((r.max_rel_err, r.name.clone()));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let (e, name) = worst.unwrap_or_default();
    let pass = failures.is_empty() && secs < 120.0;
    Ok((
        pass,
        format!(
            "{total} checks over 3 seeds, {} failed, worst rel err {e:.2e} ({name}), {secs:.1}s of 120s",
            failures.len()
        ),
    ))
}

/// Hard one-hot alignment on an image grid against a dense 3x3 convolution.
fn grid_degeneracy() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w, k) = (8usize, 8usize, 9usize);
    let n = h * w;
    let pc = PointCloud::new((0..n).map(|i| [(i % w) as f64, (i / w) as f64, 1.0]).collect()).map_err(err)?;
    let hoods = NeighborhoodSet::build(&pc, k).map_err(err)?;
    let mut align = vec![0.0f32; n * k * 9];
    for i in 0..n {
        for j in 0..k {
            let nb = hoods.neighbors[i * k + j];
            let dy = (nb / w) as isize - (i / w) as isize;
            let dx = (nb % w) as isize - (i % w) as isize;
            if dy.abs() <= 1 && dx.abs() <= 1 {
                align[(i * k + j) * 9 + ((dy + 1) * 3 + dx + 1) as usize] = 1.0;
            }
        }
    }
    let mut worst = 0.0f64;
    let trials = 10;
    for _ in 0..trials {
        let c_in = rng.random_range(1..=4usize);
        let c_out = rng.random_range(1..=4usize);
        let image = Tensor::<f32>::from_fn(&[c_in, h, w], |_| rng.random_range(-1.0..1.0));
        let weight = Tensor::<f32>::from_fn(&[c_out, c_in, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut kernel = vec![0.0f32; 9 * c_in * c_out];
        for e in 0..9 {
            for ci in 0..c_in {
                for co in 0..c_out {
                    kernel[(e * c_in + ci) * c_out + co] = weight.data()[((co * c_in + ci) * 3 + e / 3) * 3 + e % 3];
                }
            }
        }
        let mut g = Graph::<f32>::new();
        let feats = g.constant(image.clone().reshape(&[c_in, n]).map_err(err)?);
        let m = g.constant(Tensor::new(&[n * k, 9], align.clone()).map_err(err)?);
        let kv = g.constant(Tensor::new(&[9, c_in, c_out], kernel).map_err(err)?);
        let pts = apply_alignment(&mut g, feats, &hoods, m, kv).map_err(err)?;
        let x = g.constant(image);
        let wv = g.constant(weight);
        let b = g.constant(Tensor::zeros(&[c_out]));
        let conv = g.conv2d(x, wv, b, 1).map_err(err)?;
        for (a, b) in g.value(pts).data().iter().zip(g.value(conv).data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-5 && secs < 10.0,
        format!("{trials} random 8x8 inputs, max abs diff {worst:.2e} (bound 1e-5), {secs:.2}s of 10s"),
    ))
}

/// Every metric written out from its definition, one loop each.
fn metric_definitions(p: &[f64], g: &[f64], m: &[bool]) -> [f64; 8] {
    let mut n = 0.0;
    for &v in m {
        if v {
            n += 1.0;
        }
    }
    let mut rel = 0.0;
    for i in 0..g.len() {
        if m[i] {
            rel += (p[i] - g[i]).abs() / g[i];
        }
    }
    let mut sq = 0.0;
    for i in 0..g.len() {
        if m[i] {
            sq += (p[i] - g[i]) * (p[i] - g[i]);
        }
    }
    let mut abs = 0.0;
    for i in 0..g.len() {
        if m[i] {
            abs += (p[i] - g[i]).abs();
        }
    }
    let mut isq = 0.0;
    for i in 0..g.len() {
        if m[i] {
            let d = 1.0 / p[i] - 1.0 / g[i];
            isq += d * d;
        }
    }
    let mut iabs = 0.0;
    for i in 0..g.len() {
        if m[i] {
            iabs += (1.0 / p[i] - 1.0 / g[i]).abs();
        }
    }
    let mut deltas = [0.0; 3];
    for (j, d) in deltas.iter_mut().enumerate() {
        let thr = 1.25f64.powi(j as i32 + 1);
        let mut hit = 0.0;
        for i in 0..g.len() {
            if m[i] {
                let ratio = if p[i] / g[i] > g[i] / p[i] { p[i] / g[i] } else { g[i] / p[i] };
                if ratio < thr {
                    hit += 1.0;
                }
            }
        }
        *d = hit / n;
    }
    [rel / n, (sq / n).sqrt(), abs / n, (isq / n).sqrt(), iabs / n, deltas[0], deltas[1], deltas[2]]
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(1..500usize);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let p: Vec<f64> = g.iter().map(|v| v * rng.random_range(0.4..2.5)).collect();
        let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        m[0] = true;
        let r = evaluate(&p, &g, &m).map_err(err)?;
        let got = [r.rel, r.rmse, r.mae, r.irmse, r.imae, r.delta1, r.delta2, r.delta3];
        for (a, b) in got.iter().zip(metric_definitions(&p, &g, &m)) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
        monotone &= r.delta1 <= r.delta2 && r.delta2 <= r.delta3;
    }
    Ok((
        worst <= 1e-9 && monotone,
        format!("100 random pairs, max rel diff {worst:.2e} (bound 1e-9), delta monotone: {monotone}"),
    ))
}

/// Five identical scales make every per-scale composite equal.
fn loss_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = LossWeights::default();
    let (h, w) = (6, 7);
    let gt = DepthMap::from_values(h, w, (0..h * w).map(|_| rng.random_range(1.0..3.0)).collect()).map_err(err)?;
    let pred = Tensor::<f64>::from_fn(&[1, h, w], |_| rng.random_range(1.0..3.0));
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.clone());
    let single = total_loss(&mut g, &[p], std::slice::from_ref(&gt), &LossWeights { gamma: vec![1.0], ..weights.clone() })
        .map_err(err)?;
    let l = g.value(single).item();
    let preds: Vec<_> = (0..5).map(|_| g.constant(pred.clone())).collect();
    let targets = vec![gt; 5];
    let total = total_loss(&mut g, &preds, &targets, &weights).map_err(err)?;
    let t = g.value(total).item();
    let rel = (t - 2.625 * l).abs() / (2.625 * l);
    Ok((
        rel <= 1e-6 && l > 0.0,
        format!("L = {l:.6}, total = {t:.6}, 2.625 L = {:.6}, rel diff {rel:.2e} (bound 1e-6)", 2.625 * l),
    ))
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let mc = FusionConfig { height: 64, width: 64, ..FusionConfig::desk() };
    let scenes: Vec<Sample> = (0..8u64)
        .map(|i| {
            let mut s = synthesize_scene(500 + i, 64, 64);
            s.cloud = sample_points(&s, &SamplingSpec::new(Pattern::Random, 32, 900 + i))?;
            Ok(s)
        })
        .collect::<sparsefuse_core::Result<_>>()
        .map_err(err)?;
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 1,
        lr0: 5e-4,
        decay_start: 30,
        points: None,
        augment: None,
        seed: 5,
        ..TrainConfig::desk()
    };
    let mut model = Model::<f32>::new(mc, 5).map_err(err)?;
    train(&mut model, &scenes, &[], &tc, None, &mut |_| {}).map_err(err)?;
    let report = evaluate_set(&model, &scenes, &Pattern::External(Default::default()), 32, 0.0, 0, tc.depth_scale)
        .map_err(err)?;
    let rmse = report.rmse / tc.depth_scale;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        rmse < 0.03 && secs < 900.0,
        format!("training-set rmse {rmse:.4} (bound 0.03) after 30 epochs, {secs:.0}s of 900s"),
    ))
}

const COUNTS: [usize; 4] = [0, 2, 32, 200];
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Held-out RMSE per variant, seed and point count.
struct SeedRuns {
    full: Vec<[f64; 4]>,
    no_confidence: Vec<[f64; 4]>,
    no_3d: Vec<[f64; 4]>,
}

fn seed_runs() -> Result<SeedRuns, String> {
    let size = 32;
    let train_set: Vec<Sample> = (0..64).map(|s| synthesize_scene(1000 + s, size, size)).collect();
    let held_out: Vec<Sample> = (0..16).map(|s| synthesize_scene(9000 + s, size, size)).collect();
    let base = FusionConfig { height: size, width: size, ..FusionConfig::desk() };
    let run = |mc: &FusionConfig, seed: u64| -> Result<[f64; 4], String> {
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr0: 1e-3,
            decay_start: 30,
            points: Some((0, 200)),
            point_noise: 0.1,
            augment: None,
            seed,
            ..TrainConfig::desk()
        };
        let mut model = Model::<f32>::new(mc.clone(), seed).map_err(err)?;
        train(&mut model, &train_set, &[], &tc, None, &mut |_| {}).map_err(err)?;
        let mut out = [0.0; 4];
        for (o, &count) in out.iter_mut().zip(&COUNTS) {
            *o = evaluate_set(&model, &held_out, &Pattern::Random, count, 0.1, 77, tc.depth_scale)
                .map_err(err)?
                .rmse;
        }
        Ok(out)
    };
    let mut runs = SeedRuns { full: Vec::new(), no_confidence: Vec::new(), no_3d: Vec::new() };
    for seed in SEEDS {
        runs.full.push(run(&base, seed)?);
        runs.no_confidence.push(run(&FusionConfig { use_confidence: false, ..base.clone() }, seed)?);
        runs.no_3d.push(run(&FusionConfig { use_3d_branch: false, ..base.clone() }, seed)?);
    }
    Ok(runs)
}

fn medians(rows: &[[f64; 4]]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for (j, v) in m.iter_mut().enumerate() {
        *v = median(rows.iter().map(|r| r[j]).collect());
    }
    m
}

fn sparsity() -> Outcome {
    sparsity_from(&seed_runs()?)
}

fn sparsity_from(runs: &SeedRuns) -> Outcome {
    let m = medians(&runs.full);
    let monotone = m.windows(2).all(|w| w[1] <= w[0]);
    let ratio = m[3] / m[0];
    Ok((
        monotone && ratio < 0.5,
        format!(
            "median held-out rmse at 0/2/32/200 points: {:.4} {:.4} {:.4} {:.4}, non-increasing: {monotone}, 200 vs 0: {:.1}% (bound 50%)",
            m[0],
            m[1],
            m[2],
            m[3],
            100.0 * ratio
        ),
    ))
}

fn ablation() -> Outcome {
    ablation_from(&seed_runs()?)
}

fn ablation_from(runs: &SeedRuns) -> Outcome {
    let full = medians(&runs.full)[3];
    let no_cp = medians(&runs.no_confidence)[3];
    let no_3d = medians(&runs.no_3d)[3];
    Ok((
        full <= no_cp && no_3d > full,
        format!("median rmse at 200 points: full {full:.4}, without confidence {no_cp:.4}, without 3D branch {no_3d:.4}"),
    ))
}

/// Per-layer arithmetic from the configuration alone.
fn parameter_arithmetic(cfg: &FusionConfig) -> usize {
    let conv = |ci: usize, co: usize| 9 * ci * co + co;
    let dense = |a: usize, b: usize| a * b + b;
    let fka = |c: usize| cfg.kernel_elems * c * c + dense(3, 16) + dense(16, cfg.kernel_elems);
    let widths: Vec<usize> = cfg.channels.iter().rev().copied().collect();
    let s = cfg.stem_channels;
    let mut total = conv(1, s) + conv(s, s) + conv(4, s) + conv(s, s) + conv(2 * s, widths[0]);
    for l in 1..widths.len() {
        total += conv(widths[l - 1], widths[l]) + conv(widths[l], widths[l]) + conv(widths[l], widths[l - 1]);
    }
    for &c in &widths {
        let head = 2 * conv(c, c) + conv(c, 1);
        total += 4 * conv(c, c) + 2 * head;
        if cfg.use_confidence {
            total += head;
        }
        if cfg.use_3d_branch {
            total += 2 * fka(c);
        }
    }
    total
}

fn parameters() -> Outcome {
    let cfg = FusionConfig::default();
    let model = Model::<f32>::new(cfg.clone(), 0).map_err(err)?;
    let counted = count_parameters(model.params());
    let expected = parameter_arithmetic(&cfg);
    let within = (counted as f64 - 8.7e6).abs() <= 0.2 * 8.7e6;
    let mut variants_ok = true;
    for v in [
        FusionConfig { use_confidence: false, ..cfg.clone() },
        FusionConfig { use_3d_branch: false, ..cfg.clone() },
        FusionConfig::desk(),
    ] {
        variants_ok &= count_parameters(Model::<f32>::new(v.clone(), 0).map_err(err)?.params()) == parameter_arithmetic(&v);
    }
    Ok((
        within && counted == expected && variants_ok,
        format!(
            "default config has {counted} parameters ({:.2}M, bound 8.7M +/- 20%), arithmetic gives {expected}, ablation variants agree: {variants_ok}",
            counted as f64 / 1e6
        ),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let size = 16;
    let mc = FusionConfig {
        num_fusion_nets: 2,
        channels: vec![6, 6],
        stem_channels: 4,
        neighbors: 4,
        kernel_elems: 4,
        height: size,
        width: size,
        ..FusionConfig::default()
    };
    let train_set: Vec<Sample> = (0..6).map(|s| synthesize_scene(40 + s, size, size)).collect();
    let held_out: Vec<Sample> = (0..2).map(|s| synthesize_scene(60 + s, size, size)).collect();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr0: 1e-3,
        points: Some((0, 30)),
        eval_points: 20,
        checkpoint_every: 1,
        seed: 9,
        ..TrainConfig::desk()
    };
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let out = TrainOutput { dir: dir.path().join(format!("run{run}")), resume: false };
        let mut model = Model::<f32>::new(mc.clone(), 9).map_err(err)?;
        train(&mut model, &train_set, &held_out, &tc, Some(&out), &mut |_| {}).map_err(err)?;
        let rows = sweep(&[0, 2, 20], "random", held_out.len(), 3, |i, count, seed| {
            let s = &held_out[i];
            let cloud = sample_points(s, &SamplingSpec::new(Pattern::Random, count, seed))?;
            let est = predict_depth(&model, s, &cloud, tc.depth_scale)?;
            Ok((est.depth, s.gt.values().to_vec(), s.gt.mask().to_vec()))
        })
        .map_err(err)?;
        let read = |p: std::path::PathBuf| std::fs::read(p).map_err(err);
        artifacts.push([
            read(out.model_path())?,
            read(out.state_path())?,
            read(out.log_path())?,
            sweep_csv(&rows).into_bytes(),
        ]);
    }
    let identical: Vec<bool> = (0..4).map(|i| artifacts[0][i] == artifacts[1][i]).collect();

    let mut formats = Vec::new();
    let ck = Checkpoint::from_bytes(&artifacts[0][0]).map_err(err)?;
    formats.push(("checkpoint", ck.to_bytes() == artifacts[0][0]));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = (5, 7);
    let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
    let vals: Vec<f64> = mask.iter().map(|&m| if m { rng.random_range(0.5f32..20.0) as f64 } else { 0.0 }).collect();
    let map = DepthMap::new(h, w, vals.clone(), mask.clone()).map_err(err)?;
    let back = decode_float_map(&encode_float_map(&map), "mem").map_err(err)?;
    formats.push(("float map", back == map));

    let png_path = dir.path().join("d.png");
    let q: Vec<f64> = mask.iter().map(|&m| if m { rng.random_range(1..65535u32) as f64 * 1e-3 } else { 0.0 }).collect();
    let qmap = DepthMap::new(h, w, q, mask).map_err(err)?;
    write_depth_png(&png_path, &qmap, 1e-3).map_err(err)?;
    let qback = read_depth_png(&png_path).map_err(err)?;
    let png_ok = qback.mask() == qmap.mask()
        && qback.values().iter().zip(qmap.values()).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs());
    formats.push(("depth png", png_ok));

    let pc = PointCloud::new((0..20).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.1..10.0)]).collect())
        .map_err(err)?;
    formats.push(("point file", parse_points(&format_points(&pc), "mem").map_err(err)? == pc));

    let report = evaluate(&[1.0, 2.5, 3.3], &[1.1, 2.0, 3.0], &[true; 3]).map_err(err)?;
    let text = report.to_key_values();
    formats.push(("metrics", MetricReport::from_key_values(&text, "mem").map_err(err)?.to_key_values() == text));

    let mut scenes = held_out.clone();
    for s in &mut scenes {
        for v in &mut s.rgb {
            *v = (*v * 255.0).round() / 255.0;
        }
        let vals = s.gt.values().iter().map(|&v| v as f32 as f64).collect();
        s.gt = DepthMap::new(s.gt.height(), s.gt.width(), vals, s.gt.mask().to_vec()).map_err(err)?;
        s.cloud = PointCloud::new(s.cloud.points().iter().map(|p| p.map(|c| c as f32 as f64)).collect()).map_err(err)?;
    }
    let manifest = write_dataset(&dir.path().join("set"), &scenes).map_err(err)?;
    let loaded = read_manifest(&manifest)
        .map_err(err)?
        .iter()
        .map(|e| e.load())
        .collect::<sparsefuse_core::Result<Vec<_>>>()
        .map_err(err)?;
    let dataset_ok = loaded.iter().zip(&scenes).all(|(a, b)| {
        a.gt == b.gt
            && a.cloud == b.cloud
            && a.intrinsics == b.intrinsics
            && a.rgb.iter().zip(&b.rgb).all(|(x, y)| (x - y).abs() < 1e-12)
    });
    formats.push(("dataset", dataset_ok && loaded.len() == scenes.len()));
    let (rgb, rh, rw) = read_rgb_png(dir.path().join("set").join(format!("{}.png", scenes[0].id))).map_err(err)?;
    formats.push(("rgb png", (rh, rw) == (size, size) && rgb.len() == scenes[0].rgb.len()));

    let names = ["checkpoint", "state", "log", "eval csv"];
    let same: Vec<String> = names.iter().zip(&identical).map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFER" })).collect();
    let fmt: Vec<String> = formats.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "LOSSY" })).collect();
    Ok((
        identical.iter().all(|&b| b) && formats.iter().all(|(_, ok)| *ok),
        format!("{}; round trips: {}", same.join(", "), fmt.join(", ")),
    ))
}
