mod common;

use anchorsplat::config::RunConfig;
use anchorsplat::error::Error;
use anchorsplat::image::Image;
use anchorsplat::synthetic::{toy_scene, ToySceneConfig};
use anchorsplat::trainer::{
    adam_update, compute_loss, decode_checkpoint, encode_checkpoint, train, AdamConfig, LossConfig,
    TrainState, CHECKPOINT_VERSION,
};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn quick_config(iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = iterations;
    cfg.train.seed = 3;
    cfg
}

#[test]
fn zero_iterations_leave_state_untouched() {
    let scene = toy_scene(&ToySceneConfig::default()).unwrap();
    let mut state = TrainState::new(&scene, &quick_config(0)).unwrap();
    let before = state.clone();
    let mut rows = 0;
    train(&scene, &mut state, |_| rows += 1).unwrap();
    assert_eq!(rows, 0);
    assert_eq!(state, before);
}

#[test]
fn refinement_disabled_keeps_anchor_count() {
    let scene = toy_scene(&ToySceneConfig::default()).unwrap();
    let mut cfg = quick_config(400);
    cfg.refine.grow = false;
    cfg.refine.prune = false;
    cfg.refine.start = 100;
    let mut state = TrainState::new(&scene, &cfg).unwrap();
    let n = state.grid.len();
    train(&scene, &mut state, |row| assert_eq!(row.anchors, n)).unwrap();
}

#[test]
fn refinement_keeps_moments_aligned() {
    let scene = toy_scene(&ToySceneConfig::default()).unwrap();
    let mut cfg = quick_config(600);
    cfg.refine.start = 100;
    cfg.refine.every = 50;
    cfg.refine.end_fraction = 1.0;
    cfg.refine.keep_prob = 1.0;
    cfg.refine.tau_g_multiplier = 8.0;
    let mut state = TrainState::new(&scene, &cfg).unwrap();
    let mut counts = vec![state.grid.len()];
    train(&scene, &mut state, |row| counts.push(row.anchors)).unwrap();
    state.check_consistency().unwrap();
    assert!(
        counts.windows(2).any(|w| w[0] != w[1]),
        "refinement never changed the scaffold"
    );
}

#[test]
fn training_psnr_trends_upward() {
    let scene = toy_scene(&ToySceneConfig::default()).unwrap();
    let mut state = TrainState::new(&scene, &quick_config(2000)).unwrap();
    let mut psnr = Vec::new();
    train(&scene, &mut state, |row| psnr.push(row.psnr)).unwrap();
    let means: Vec<f64> = psnr
        .chunks(200)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    // least-squares slope of the windowed means
    let n = means.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = means.iter().sum::<f64>() / n;
    let slope: f64 = means
        .iter()
        .enumerate()
        .map(|(i, y)| (i as f64 - xm) * (y - ym))
        .sum::<f64>()
        / means
            .iter()
            .enumerate()
            .map(|(i, _)| (i as f64 - xm).powi(2))
            .sum::<f64>();
    assert!(slope > 0.0, "{means:?}");
    assert!(means.last().unwrap() > means.first().unwrap());
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let scene = toy_scene(&ToySceneConfig::default()).unwrap();
    let state = TrainState::new(&scene, &quick_config(10)).unwrap();
    let bytes = encode_checkpoint(&state);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), state);
    let mut other = bytes.clone();
    other[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match decode_checkpoint(&other) {
        Err(Error::Version { found, expected }) => {
            assert_eq!(found, CHECKPOINT_VERSION + 1);
            assert_eq!(expected, CHECKPOINT_VERSION);
        }
        r => panic!("expected a version error, got {r:?}"),
    }
    assert!(matches!(
        decode_checkpoint(b"nope"),
        Err(Error::Integrity(_))
    ));
}

/// Textbook Adam written independently of the crate.
fn adam_oracle(x0: [f64; 2], steps: usize, lr: f64) -> Vec<[f64; 2]> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-15);
    let mut x = x0;
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = [2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)];
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
        out.push(x);
    }
    out
}

#[test]
fn adam_matches_oracle_on_quadratic_bowl() {
    let lr = 0.1;
    let oracle = adam_oracle([0.0, 0.0], 100, lr);
    let mut x = [0.0, 0.0];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for (t, want) in oracle.iter().enumerate() {
        let g = [2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)];
        adam_update(
            &mut x,
            &g,
            &mut m,
            &mut v,
            lr,
            t as u64 + 1,
            &AdamConfig::default(),
        );
        assert!((x[0] - want[0]).abs() <= 1e-10 && (x[1] - want[1]).abs() <= 1e-10);
    }
    let mut x = [0.0, 0.0];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for t in 1..=2000u64 {
        let lr = 0.1 * 0.01f64.powf(t as f64 / 2000.0);
        let g = [2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)];
        adam_update(&mut x, &g, &mut m, &mut v, lr, t, &AdamConfig::default());
    }
    assert!(
        (x[0] - 3.0).abs() < 1e-3 && (x[1] + 1.0).abs() < 1e-3,
        "{x:?}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_non_negative_with_exact_volume_gradient(
        seed in 0u64..1000,
        scales in prop::collection::vec(prop::array::uniform3(1e-3..2.0f64), 0..20),
    ) {
        let mut r = rng(seed);
        let a = Image::from_data(12, 12, (0..432).map(|_| r.gen()).collect()).unwrap();
        let b = Image::from_data(12, 12, (0..432).map(|_| r.gen()).collect()).unwrap();
        let cfg = LossConfig::default();
        let out = compute_loss(&a, &b, &scales, &cfg).unwrap();
        prop_assert!(out.total >= 0.0);
        for (s, d) in scales.iter().zip(&out.d_scales) {
            prop_assert_eq!(d[0], cfg.lambda_vol * s[1] * s[2]);
            let h = 1e-6;
            let vol = |x: f64| cfg.lambda_vol * x * s[1] * s[2];
            let num = (vol(s[0] + h) - vol(s[0] - h)) / (2.0 * h);
            prop_assert!((num - d[0]).abs() <= 1e-9 * d[0].abs().max(1e-6));
        }
    }
}
