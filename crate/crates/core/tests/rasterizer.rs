mod common;

use anchorsplat::image::Image;
use anchorsplat::rasterizer::{
    build_covariance, project, rasterize, rasterize_backward, render_naive, RasterConfig, Splat2D,
};
use anchorsplat::scene_io::Camera;
use common::{random_splats, rng};
use nalgebra::{SymmetricEigen, Vector3};
use proptest::prelude::*;

#[test]
fn default_thresholds_stay_close_to_exact_reference() {
    let exact = RasterConfig::default().exact();
    let cfg = RasterConfig::default();
    let mut r = rng(1);
    let splats = random_splats(&mut r, 100, 64.0, 64.0);
    let tiled = rasterize(&splats, 64, 64, &cfg).image;
    let reference = render_naive(&splats, 64, 64, &exact);
    let worst = tiled
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // a few skipped sub-1/255 contributions can stack up on one pixel
    assert!(worst <= 3e-2, "{worst}");
}

#[test]
fn identical_inputs_render_identically_across_thread_counts() {
    let mut r = rng(2);
    let splats = random_splats(&mut r, 150, 70.0, 50.0);
    let mut weights = Image::new(70, 50);
    weights
        .data
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = ((i * 37) % 11) as f64 - 5.0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let out = rasterize(&splats, 70, 50, &RasterConfig::default());
            let grads = rasterize_backward(&splats, &out, &weights).unwrap();
            (out.image.data, grads)
        })
    };
    let (img1, g1) = run(1);
    let (img4, g4) = run(4);
    assert!(img1
        .iter()
        .zip(&img4)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(g1, g4);
}

#[test]
fn final_transmittance_and_image_are_bounded() {
    let mut r = rng(3);
    let splats = random_splats(&mut r, 80, 32.0, 32.0);
    let cfg = RasterConfig {
        background: [1.0; 3],
        ..RasterConfig::default()
    };
    let out = rasterize(&splats, 32, 32, &cfg);
    assert!(out
        .final_transmittance
        .iter()
        .all(|t| (0.0..=1.0).contains(t)));
    assert!(out
        .image
        .data
        .iter()
        .all(|v| v.is_finite() && (0.0..=1.0 + 1e-12).contains(v)));
}

fn splat_strategy() -> impl Strategy<Value = Vec<Splat2D>> {
    let one = (
        -5.0..37.0f64,
        -5.0..29.0f64,
        0.5..6.0f64,
        0.5..6.0f64,
        -0.9..0.9f64,
        0u8..20,
        0.01..0.99f64,
        prop::array::uniform3(0.0..1.0f64),
    );
    prop::collection::vec(one, 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (x, y, sx, sy, rho, d, o, c))| Splat2D {
                mean2d: [x, y],
                cov2d: [sx * sx + 0.3, rho * sx * sy, sy * sy + 0.3],
                depth: 1.0 + d as f64 * 0.5,
                opacity: o,
                color: c,
                source_index: i,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiled_matches_reference_without_thresholds(splats in splat_strategy(), tile in 1usize..20) {
        let cfg = RasterConfig { tile_size: tile, ..RasterConfig::default().exact() };
        let tiled = rasterize(&splats, 32, 24, &cfg).image;
        let naive = render_naive(&splats, 32, 24, &cfg);
        for (a, b) in tiled.data.iter().zip(&naive.data) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn tiled_matches_reference_with_thresholds(splats in splat_strategy()) {
        let cfg = RasterConfig::default();
        let tiled = rasterize(&splats, 32, 24, &cfg).image;
        let naive = render_naive(&splats, 32, 24, &cfg);
        for (a, b) in tiled.data.iter().zip(&naive.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tile_lists_are_depth_sorted(splats in splat_strategy()) {
        let out = rasterize(&splats, 32, 24, &RasterConfig { tile_size: 8, ..RasterConfig::default() });
        for list in &out.layout.lists {
            for w in list.windows(2) {
                let (a, b) = (&splats[w[0] as usize], &splats[w[1] as usize]);
                prop_assert!(a.depth < b.depth || (a.depth == b.depth && a.source_index < b.source_index));
            }
        }
    }

    #[test]
    fn projected_covariance_stays_positive_definite(
        q in prop::array::uniform4(-1.0..1.0f64),
        s in prop::array::uniform3(1e-3..1.0f64),
        p in prop::array::uniform3(-1.0..1.0f64),
    ) {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(n > 1e-3);
        let q = q.map(|v| v / n);
        let cam = Camera::look_at(64, 48, 60.0, Vector3::new(0.2, 0.1, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let cov = build_covariance(q, s);
        prop_assert!((cov - cov.transpose()).abs().max() <= 1e-12);
        prop_assert!(SymmetricEigen::new(cov).eigenvalues.min() >= -1e-12);
        let cfg = RasterConfig::default();
        let (splat, _) = project(&Vector3::from(p), &cov, 0.5, [1.0; 3], 0, &cam, &cfg).unwrap();
        let [a, b, c] = splat.cov2d;
        let m = nalgebra::Matrix2::new(a, b, b, c);
        prop_assert!(SymmetricEigen::new(m).eigenvalues.min() >= cfg.lowpass - 1e-12);
        prop_assert!(splat.depth > cfg.near);
    }
}
