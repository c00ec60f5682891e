use proptest::prelude::*;
use sparsefuse_core::data::{sample_points, synthesize_scene, Pattern, Sample, SamplingSpec};
use sparsefuse_core::network::{FusionConfig, Model};
use sparsefuse_core::trainer::*;
use sparsefuse_core::CoreError;
use sparsefuse_tensor::{ParamStore, Tensor};

fn tiny(size: usize) -> FusionConfig {
    FusionConfig {
        num_fusion_nets: 2,
        channels: vec![8, 8],
        stem_channels: 4,
        neighbors: 4,
        kernel_elems: 3,
        height: size,
        width: size,
        ..FusionConfig::default()
    }
}

fn scenes(seeds: std::ops::Range<u64>, size: usize, points: usize) -> Vec<Sample> {
    seeds
        .map(|s| {
            let mut x = synthesize_scene(s, size, size);
            x.cloud = sample_points(&x, &SamplingSpec::new(Pattern::Random, points, s)).unwrap();
            x
        })
        .collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr0: 1e-3,
        checkpoint_every: 1,
        points: Some((0, 20)),
        eval_points: 10,
        ..TrainConfig::desk()
    }
}

fn scalar_store(v: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.register("x", Tensor::new(&[v.len()], v.to_vec()).unwrap()).unwrap();
    s
}

fn values(s: &ParamStore<f32>) -> Vec<f32> {
    s.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
}

#[test]
fn learning_rate_examples() {
    let cfg = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    assert!(close(lr_at(0, &cfg), 1.2e-4));
    assert!(close(lr_at(9, &cfg), 1.2e-4));
    assert!(close(lr_at(10, &cfg), 1.2e-4 * 0.94));
    assert!(close(lr_at(14, &cfg), 1.2e-4 * 0.94));
    assert!(close(lr_at(15, &cfg), 1.2e-4 * 0.94 * 0.94));
    assert!(close(lr_at(20, &cfg), 1.2e-4 * 0.94 * 0.94 * 0.94));
}

proptest! {
    #[test]
    fn learning_rate_non_increasing(epoch in 0usize..500, start in 0usize..20, every in 1usize..8) {
        let cfg = TrainConfig { decay_start: start, decay_every: every, ..TrainConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        prop_assert!(lr_at(epoch, &cfg) > 0.0);
    }
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let cfg = TrainConfig::default();
    let mut p = scalar_store(&[0.5, -2.0]);
    let mut st = AdamState::new(&p);
    let zero = vec![Tensor::zeros(&[2])];
    adam_step(&mut p, &zero, &mut st, 0.1, &cfg).unwrap();
    assert_eq!(values(&p), vec![0.5, -2.0]);
    assert!(st.m[0].data().iter().chain(st.v[0].data()).all(|&v| v == 0.0));

    adam_step(&mut p, &[Tensor::new(&[2], vec![1.0, -3.0]).unwrap()], &mut st, 0.1, &cfg).unwrap();
    let (m, v) = (st.m[0].clone(), st.v[0].clone());
    let before = values(&p);
    adam_step(&mut p, &zero, &mut st, 0.1, &cfg).unwrap();
    for j in 0..2 {
        assert!((st.m[0].data()[j] - 0.9 * m.data()[j]).abs() < 1e-7);
        assert!((st.v[0].data()[j] - 0.999 * v.data()[j]).abs() < 1e-7);
    }
    // Momentum still carries the parameters after a zero gradient.
    assert_ne!(values(&p), before);
}

#[test]
fn adam_single_step_closed_form() {
    let cfg = TrainConfig::default();
    for g in [1.0f32, -1.0, 0.37, 250.0] {
        let mut p = scalar_store(&[3.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::new(&[1], vec![g]).unwrap()], &mut st, 0.1, &cfg).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction.
        let expect = 3.0 - 0.1 * g as f64 / (g.abs() as f64 + 1e-8);
        assert!((values(&p)[0] as f64 - expect).abs() < 1e-6, "g = {g}");
        assert_eq!(st.t, 1);
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let cfg = TrainConfig::default();
    let a = [1.0f32, 4.0, 0.25];
    let mut p = scalar_store(&[2.0, -1.5, 3.0]);
    let mut st = AdamState::new(&p);
    let f = |x: &[f32]| x.iter().zip(a).map(|(x, a)| (a * x * x) as f64).sum::<f64>();
    let mut prev = f(&values(&p));
    for step in 0..10 {
        let x = values(&p);
        let g: Vec<f32> = x.iter().zip(a).map(|(x, a)| 2.0 * a * x).collect();
        adam_step(&mut p, &[Tensor::new(&[3], g).unwrap()], &mut st, 0.1, &cfg).unwrap();
        let now = f(&values(&p));
        if step > 0 {
            assert!(now < prev, "step {step}: {now} >= {prev}");
        }
        prev = now;
    }
    assert!(prev < f(&[2.0, -1.5, 3.0]) * 0.5);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let cfg = TrainConfig::default();
    let mut p = scalar_store(&[1.0, 2.0]);
    let mut st = AdamState::new(&p);
    let bad = [Tensor::new(&[2], vec![0.5, f32::NAN]).unwrap()];
    let err = adam_step(&mut p, &bad, &mut st, 0.1, &cfg).unwrap_err();
    assert!(matches!(err, CoreError::NonFinite { what: "gradient", .. }));
    assert_eq!(values(&p), vec![1.0, 2.0]);
    assert_eq!(st.t, 0);
    assert!(adam_step(&mut p, &[], &mut st, 0.1, &cfg).is_err());
}

#[test]
fn clipping_scales_to_the_bound() {
    let mut g = vec![
        Tensor::new(&[2], vec![3.0f64, 0.0]).unwrap(),
        Tensor::new(&[1], vec![4.0]).unwrap(),
    ];
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].data(), &[3.0, 0.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[1].data()[0] - 0.8).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
    let bad = [
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { decay_every: 0, ..TrainConfig::default() },
        TrainConfig { points: Some((5, 2)), ..TrainConfig::default() },
        TrainConfig { point_noise: -0.1, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(CoreError::Config(_))), "{c:?}");
    }
    let w = TrainConfig::default().loss_for(2);
    assert_eq!(w.gamma, vec![1.0, 0.75]);
    assert_eq!(TrainConfig::default().loss_for(6).gamma.len(), 6);
}

#[test]
fn single_sample_loss_drops_below_a_tenth() {
    let cfg = tiny(32);
    let data = scenes(3..4, 32, 16);
    let mut model = Model::<f32>::new(cfg.clone(), 7).unwrap();
    let tc = TrainConfig { batch_size: 1, lr0: 1e-3, ..TrainConfig::desk() };
    let weights = tc.loss_for(2);
    let batch = vec![prepare_input(&data[0], &data[0].cloud, &cfg, 10.0).unwrap()];
    let mut st = AdamState::new(model.params());
    let first = train_step(&mut model, &mut st, &batch, tc.lr0, &tc, &weights).unwrap();
    let mut reached = None;
    for step in 1..500 {
        let loss = train_step(&mut model, &mut st, &batch, tc.lr0, &tc, &weights).unwrap();
        if loss < 0.1 * first {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "loss never fell below {}", 0.1 * first);
}

#[test]
fn single_image_overfit_rmse() {
    let cfg = tiny(32);
    let data = scenes(5..6, 32, 32);
    let mut model = Model::<f32>::new(cfg.clone(), 3).unwrap();
    let tc = TrainConfig { batch_size: 1, lr0: 1e-3, ..TrainConfig::desk() };
    let weights = tc.loss_for(2);
    let batch = vec![prepare_input(&data[0], &data[0].cloud, &cfg, 10.0).unwrap()];
    let mut st = AdamState::new(model.params());
    let ext = Pattern::External("cloud".into());
    let mut rmse = f64::INFINITY;
    for step in 1..=2000 {
        train_step(&mut model, &mut st, &batch, tc.lr0, &tc, &weights).unwrap();
        if step % 100 == 0 {
            rmse = evaluate_set(&model, &data, &ext, 32, 0.0, 0, 10.0).unwrap().rmse / 10.0;
            if rmse < 0.02 {
                break;
            }
        }
    }
    assert!(rmse < 0.02, "normalized rmse {rmse}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let cfg = tiny(16);
    let data = scenes(0..4, 16, 12);
    let held = scenes(50..52, 16, 12);
    let dir = tempfile::tempdir().unwrap();
    let out_a = TrainOutput { dir: dir.path().join("a"), resume: false };
    let out_b = TrainOutput { dir: dir.path().join("b"), resume: true };

    let mut a = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let rows_a = train(&mut a, &data, &held, &quick(4), Some(&out_a), &mut |_| {}).unwrap();

    let mut b = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let first = train(&mut b, &data, &held, &quick(2), Some(&out_b), &mut |_| {}).unwrap();
    // A fresh model picks up from the saved state.
    let mut b = Model::<f32>::new(cfg, 99).unwrap();
    let rest = train(&mut b, &data, &held, &quick(4), Some(&out_b), &mut |_| {}).unwrap();

    assert_eq!(rows_a.len(), 4);
    assert_eq!(rest.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 3]);
    let joined: Vec<LogRow> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, rows_a);
    let read = |o: &TrainOutput, f: fn(&TrainOutput) -> std::path::PathBuf| std::fs::read(f(o)).unwrap();
    assert_eq!(read(&out_a, TrainOutput::model_path), read(&out_b, TrainOutput::model_path));
    assert_eq!(read(&out_a, TrainOutput::state_path), read(&out_b, TrainOutput::state_path));
    assert_eq!(read(&out_a, TrainOutput::log_path), read(&out_b, TrainOutput::log_path));
    assert!(rows_a.iter().all(|r| r.rmse.is_some_and(|v| v.is_finite())));
}

#[test]
fn runs_are_reproducible_and_logged() {
    let cfg = tiny(16);
    let data = scenes(10..13, 16, 12);
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = TrainOutput { dir: dir.path().join(format!("r{run}")), resume: false };
        let mut m = Model::<f32>::new(cfg.clone(), 4).unwrap();
        let mut seen = Vec::new();
        let rows = train(&mut m, &data, &[], &quick(2), Some(&out), &mut |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        let log = std::fs::read_to_string(out.log_path()).unwrap();
        assert_eq!(log, log_csv(&rows));
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch,step,lr,loss,rmse");
        assert_eq!(lines.len(), 3);
        // No held-out set: the rmse field stays empty.
        assert!(lines[1].ends_with(','));
        assert_eq!(rows[1].step, 4);
        bytes.push((std::fs::read(out.model_path()).unwrap(), log));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn non_finite_loss_keeps_the_last_checkpoint() {
    let cfg = tiny(16);
    let data = scenes(20..22, 16, 8);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf(), resume: false };
    let mut m = Model::<f32>::new(cfg, 2).unwrap();
    train(&mut m, &data, &[], &quick(1), Some(&out), &mut |_| {}).unwrap();
    let saved = (std::fs::read(out.model_path()).unwrap(), std::fs::read(out.state_path()).unwrap());

    let id = m.params().id("fusion0.dec.head.bias").unwrap();
    m.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let err = train(&mut m, &data, &[], &quick(3), Some(&out), &mut |_| {}).unwrap_err();
    assert!(matches!(err, CoreError::NonFinite { .. }), "{err}");
    assert_eq!(std::fs::read(out.model_path()).unwrap(), saved.0);
    assert_eq!(std::fs::read(out.state_path()).unwrap(), saved.1);
}

#[test]
fn ablation_matrix_trains() {
    let data = scenes(30..32, 16, 10);
    for conf in [true, false] {
        for branch in [true, false] {
            let cfg = FusionConfig { use_confidence: conf, use_3d_branch: branch, ..tiny(16) };
            let mut m = Model::<f32>::new(cfg, 5).unwrap();
            let rows = train(&mut m, &data, &data, &quick(2), None, &mut |_| {}).unwrap();
            assert_eq!(rows.len(), 2);
            assert!(rows.iter().all(|r| r.loss.is_finite() && r.rmse.unwrap().is_finite()));
        }
    }
}

#[test]
fn training_touches_only_parameters() {
    let cfg = tiny(16);
    let data = scenes(40..42, 16, 10);
    let copy = data.clone();
    let mut m = Model::<f32>::new(cfg.clone(), 6).unwrap();
    let before: Vec<(String, Vec<usize>, Vec<f32>)> = m
        .params()
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    train(&mut m, &data, &[], &quick(1), None, &mut |_| {}).unwrap();
    assert_eq!(data, copy);
    assert_eq!(m.config(), &cfg);
    let after: Vec<_> = m.params().iter().collect();
    assert_eq!(after.len(), before.len());
    let mut changed = 0;
    for ((_, n, t), (bn, bs, bd)) in after.iter().zip(&before) {
        assert_eq!((*n, t.shape()), (bn.as_str(), bs.as_slice()));
        changed += usize::from(t.data() != bd.as_slice());
    }
    assert!(changed > before.len() / 2, "{changed} of {} changed", before.len());
}

#[test]
fn empty_training_set_is_rejected() {
    let mut m = Model::<f32>::new(tiny(16), 0).unwrap();
    assert!(matches!(
        train(&mut m, &[], &[], &quick(1), None, &mut |_| {}),
        Err(CoreError::Empty(_))
    ));
}
