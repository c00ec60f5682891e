use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefuse_core::metrics::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn examples() {
    let r = evaluate(&[1.0, 5.0], &[2.0, 4.0], &[true, true]).unwrap();
    assert!(close(r.rel, 0.375, 1e-15));
    assert!(close(r.rmse, 1.0, 1e-15));
    assert!(close(r.mae, 1.0, 1e-15));
    assert_eq!(r.pixel_count, 2);

    let gt = [1.0, 2.5, 7.0];
    let same = evaluate(&gt, &gt, &[true; 3]).unwrap();
    assert_eq!(
        [same.rel, same.rmse, same.mae, same.irmse, same.imae],
        [0.0; 5]
    );
    assert_eq!([same.delta1, same.delta2, same.delta3], [1.0; 3]);

    let scaled: Vec<f64> = gt.iter().map(|g| g * 1.2).collect();
    let r = evaluate(&scaled, &gt, &[true; 3]).unwrap();
    assert_eq!([r.delta1, r.delta2, r.delta3], [1.0; 3]);

    assert!(evaluate(&gt, &gt, &[false; 3]).is_err());
    assert!(evaluate(&gt, &gt[..2], &[true; 3]).is_err());
}

#[test]
fn masked_pixels_are_ignored() {
    let r = evaluate(&[1.0, 100.0], &[1.0, 2.0], &[true, false]).unwrap();
    assert_eq!(r.rmse, 0.0);
    assert_eq!(r.pixel_count, 1);
}

#[test]
fn prediction_floor_keeps_inverse_metrics_finite() {
    let r = evaluate(&[0.0, 1.0], &[1.0, 1.0], &[true, true]).unwrap();
    assert!(r.irmse.is_finite() && r.imae.is_finite());
    assert!(close(r.imae, (1.0 / PRED_FLOOR - 1.0) / 2.0, 1e-12));
}

#[test]
fn serialization_round_trips_to_six_digits() {
    let r = evaluate(&[1.1, 2.3, 2.9], &[1.0, 2.0, 3.3], &[true; 3]).unwrap();
    let text = r.to_key_values();
    assert_eq!(text.lines().count(), 9);
    assert!(text.contains("rmse = "));
    let back = MetricReport::from_key_values(&text, "mem").unwrap();
    for (a, b) in [
        (r.rel, back.rel),
        (r.rmse, back.rmse),
        (r.delta1, back.delta1),
        (r.irmse, back.irmse),
    ] {
        assert!(close(a, b, 5e-6));
    }
    assert_eq!(back.pixel_count, 3);
    assert_eq!(fmt6(0.123456789), "1.23457e-1");
    assert!(MetricReport::from_key_values("bogus = 1\n", "mem").is_err());
}

#[test]
fn sweep_emits_one_row_per_count_and_matches_direct_evaluation() {
    let gt = vec![2.0, 3.0, 4.0, 5.0];
    let predict = |_: usize, count: usize, _: u64| -> sparsefuse_core::Result<_> {
        let p: Vec<f64> = gt.iter().map(|g| g + 1.0 / (count as f64 + 1.0)).collect();
        Ok((p, gt.clone(), vec![true; 4]))
    };
    let rows = sweep(&[2, 32, 200, 500], "random", 3, 10, predict).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![10, 11, 12, 13]
    );
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("points,pattern,seed,rel,rmse"));

    let zero = sweep(&[0], "random", 1, 0, predict).unwrap();
    let (p, g, m) = predict(0, 0, 0).unwrap();
    assert_eq!(zero[0].report, evaluate(&p, &g, &m).unwrap());
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.5..2.0)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    mask[0] = true;
    (pred, gt, mask)
}

/// Definition-by-definition oracle: every metric in its own loop.
fn oracle(p: &[f64], g: &[f64], m: &[bool]) -> [f64; 8] {
    let idx: Vec<usize> = (0..g.len()).filter(|&i| m[i]).collect();
    let n = idx.len() as f64;
    let rel = idx.iter().map(|&i| (p[i] - g[i]).abs() / g[i]).sum::<f64>() / n;
    let rmse = (idx.iter().map(|&i| (p[i] - g[i]).powi(2)).sum::<f64>() / n).sqrt();
    let mae = idx.iter().map(|&i| (p[i] - g[i]).abs()).sum::<f64>() / n;
    let irmse = (idx
        .iter()
        .map(|&i| (1.0 / p[i] - 1.0 / g[i]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let imae = idx
        .iter()
        .map(|&i| (1.0 / p[i] - 1.0 / g[i]).abs())
        .sum::<f64>()
        / n;
    let delta = |t: f64| {
        idx.iter()
            .filter(|&&i| f64::max(p[i] / g[i], g[i] / p[i]) < t)
            .count() as f64
            / n
    };
    [
        rel,
        rmse,
        mae,
        irmse,
        imae,
        delta(1.25),
        delta(1.5625),
        delta(1.953125),
    ]
}

#[test]
fn evaluate_matches_definition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.random_range(1..400);
        let (p, g, m) = random_pair(&mut rng, n);
        let r = evaluate(&p, &g, &m).unwrap();
        let o = oracle(&p, &g, &m);
        let got = [
            r.rel, r.rmse, r.mae, r.irmse, r.imae, r.delta1, r.delta2, r.delta3,
        ];
        for (a, b) in got.iter().zip(&o) {
            assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
        assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetry_and_scaling(seed in any::<u64>(), n in 1usize..100, s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g, m) = random_pair(&mut rng, n);
        let a = evaluate(&p, &g, &m).unwrap();
        let b = evaluate(&g, &p, &m).unwrap();
        prop_assert!(close(a.rmse, b.rmse, 1e-12));
        prop_assert!(close(a.mae, b.mae, 1e-12));
        prop_assert_eq!([a.delta1, a.delta2, a.delta3], [b.delta1, b.delta2, b.delta3]);
        prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);

        let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * s).collect();
        let c = evaluate(&ps, &gs, &m).unwrap();
        prop_assert!(close(c.rel, a.rel, 1e-12));
        prop_assert_eq!([c.delta1, c.delta2, c.delta3], [a.delta1, a.delta2, a.delta3]);
        prop_assert!(close(c.rmse, s * a.rmse, 1e-12));
        prop_assert!(close(c.mae, s * a.mae, 1e-12));
    }
}

#[test]
fn rel_is_not_symmetric() {
    let a = evaluate(&[1.0], &[2.0], &[true]).unwrap();
    let b = evaluate(&[2.0], &[1.0], &[true]).unwrap();
    assert!(a.rel != b.rel);
}
