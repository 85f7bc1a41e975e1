use moc_core::rng::CounterRng;
use moc_core::{apply_drop, DropConfig, MocError};

fn config(p_max: f64, lambda: f64) -> DropConfig {
    DropConfig {
        p_max,
        lambda,
        seed: 0,
        enabled: true,
    }
}

/// `E[floor(U * k)]` for `U ~ U(0, p_max)` by midpoint quadrature.
fn expected_dropped(p_max: f64, k: usize) -> f64 {
    let n = 1_000_000;
    (0..n)
        .map(|i| ((i as f64 + 0.5) / n as f64 * p_max * k as f64).floor())
        .sum::<f64>()
        / n as f64
}

#[test]
fn dropped_count_matches_expectation() {
    let routed = [2, 5, 7, 9];
    let want = expected_dropped(0.5, 4);
    assert!((want - 0.5).abs() < 1e-6);
    let cfg = config(0.5, 0.0);
    let trials = 10_000;
    let mut total = 0usize;
    for t in 0..trials {
        let mut rng = CounterRng::keyed(3, 9, t, 0);
        let out = apply_drop(&routed, 4, &cfg, &mut rng, &[]).unwrap();
        assert_eq!(out.kept.len() + out.removed.len(), 4);
        total += out.removed.len();
    }
    let mean = total as f64 / trials as f64;
    assert!((mean - want).abs() < 0.05, "mean dropped {mean}");
}

#[test]
fn inserted_count_is_poisson_mean() {
    let routed = [0, 1];
    let candidates: Vec<usize> = (0..60).collect();
    let cfg = config(0.0, 1.5);
    let trials = 10_000;
    let mut total = 0usize;
    for t in 0..trials {
        let mut rng = CounterRng::keyed(4, 9, t, 0);
        let out = apply_drop(&routed, 2, &cfg, &mut rng, &candidates).unwrap();
        assert!(out.removed.is_empty());
        assert!(out.inserted.iter().all(|c| !routed.contains(c)));
        total += out.inserted.len();
    }
    let mean = total as f64 / trials as f64;
    assert!((mean - 1.5).abs() < 0.06, "mean inserted {mean}");
}

#[test]
fn insertion_clips_to_pool() {
    let cfg = config(0.0, 50.0);
    let mut rng = CounterRng::new(1);
    let out = apply_drop(&[1], 1, &cfg, &mut rng, &[0, 1, 2]).unwrap();
    assert!(out.m > 2);
    assert_eq!(out.inserted, vec![0, 2]);
}

#[test]
fn disabled_drop_is_an_error() {
    let mut cfg = config(0.5, 1.0);
    cfg.enabled = false;
    let mut rng = CounterRng::new(1);
    assert_eq!(apply_drop(&[1], 1, &cfg, &mut rng, &[]), Err(MocError::DropDisabled));
}

#[test]
fn same_key_same_outcome() {
    let cfg = config(0.9, 3.0);
    let routed = [1, 3, 4, 8, 9];
    let candidates: Vec<usize> = (0..12).collect();
    let a = apply_drop(&routed, 5, &cfg, &mut CounterRng::keyed(7, 1, 2, 3), &candidates).unwrap();
    let b = apply_drop(&routed, 5, &cfg, &mut CounterRng::keyed(7, 1, 2, 3), &candidates).unwrap();
    assert_eq!(a, b);
}
