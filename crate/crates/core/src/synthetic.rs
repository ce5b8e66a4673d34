//! A small synthetic scene for tests and demos: a handful of colored 3D
//! Gaussians rendered by the reference rasterizer from a ring of cameras.

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rasterizer::{build_covariance, project, render_naive, RasterConfig};
use crate::scene_io::{split_train_test, Camera, PointCloud, Scene, SplitRule};

/// One ground-truth Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGaussian {
    pub mean: Vector3<f64>,
    pub quaternion: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySceneConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub radius: f64,
    /// Camera height above the ring's plane.
    pub elevation: f64,
    pub points: usize,
    /// Standard deviation of the point jitter around each center.
    pub jitter: f64,
    pub test_every: usize,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            views: 12,
            width: 64,
            height: 64,
            focal: 70.0,
            radius: 4.0,
            elevation: 1.5,
            points: 40,
            jitter: 0.08,
            test_every: 8,
            seed: 7,
        }
    }
}

/// The five fixed Gaussians of the toy scene.
pub fn toy_gaussians() -> Vec<ToyGaussian> {
    let q = |axis: [f64; 3], angle: f64| {
        let u = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::from(axis)),
            angle,
        );
        [u.w, u.i, u.j, u.k]
    };
    vec![
        ToyGaussian {
            mean: Vector3::new(0.0, 0.0, 0.0),
            quaternion: [1.0, 0.0, 0.0, 0.0],
            scale: [0.35, 0.25, 0.3],
            opacity: 0.9,
            color: [0.9, 0.2, 0.15],
        },
        ToyGaussian {
            mean: Vector3::new(0.7, 0.3, 0.1),
            quaternion: q([0.0, 0.0, 1.0], 0.6),
            scale: [0.3, 0.12, 0.15],
            opacity: 0.85,
            color: [0.15, 0.75, 0.25],
        },
        ToyGaussian {
            mean: Vector3::new(-0.6, 0.4, -0.2),
            quaternion: q([1.0, 1.0, 0.0], 0.8),
            scale: [0.2, 0.3, 0.15],
            opacity: 0.9,
            color: [0.2, 0.3, 0.9],
        },
        ToyGaussian {
            mean: Vector3::new(0.1, -0.6, 0.5),
            quaternion: q([0.0, 1.0, 0.0], 1.1),
            scale: [0.25, 0.2, 0.1],
            opacity: 0.8,
            color: [0.95, 0.85, 0.2],
        },
        ToyGaussian {
            mean: Vector3::new(0.2, 0.5, -0.7),
            quaternion: q([1.0, 0.0, 1.0], -0.5),
            scale: [0.15, 0.15, 0.3],
            opacity: 0.95,
            color: [0.8, 0.3, 0.85],
        },
    ]
}

/// Ring of cameras at `radius` looking at the origin.
pub fn ring_cameras(cfg: &ToySceneConfig) -> Result<Vec<Camera>> {
    (0..cfg.views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.views as f64;
            let eye = Vector3::new(cfg.radius * a.cos(), cfg.elevation, cfg.radius * a.sin());
            Camera::look_at(
                cfg.width,
                cfg.height,
                cfg.focal,
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
            )
        })
        .collect()
}

/// Renders `gaussians` through `camera` with the untiled reference renderer.
pub fn render_reference(
    gaussians: &[ToyGaussian],
    camera: &Camera,
    cfg: &RasterConfig,
) -> crate::image::Image {
    let splats: Vec<_> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let cov = build_covariance(g.quaternion, g.scale);
            project(&g.mean, &cov, g.opacity, g.color, i, camera, cfg).map(|(s, _)| s)
        })
        .collect();
    render_naive(&splats, camera.width, camera.height, cfg)
}

/// Jittered samples around the Gaussian centers, cycling through them.
pub fn jittered_points(
    gaussians: &[ToyGaussian],
    count: usize,
    jitter: f64,
    seed: u64,
) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let g = &gaussians[i % gaussians.len()];
            g.mean + Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * jitter
        })
        .collect()
}

/// A seeded random subset holding `fraction` of the points (at least two).
pub fn subsample_points(points: &[Vector3<f64>], fraction: f64, seed: u64) -> Vec<Vector3<f64>> {
    let n = ((points.len() as f64 * fraction).round() as usize)
        .clamp(2.min(points.len()), points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, points.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Builds the toy scene with its train/test split applied.
pub fn toy_scene(cfg: &ToySceneConfig) -> Result<Scene> {
    let gaussians = toy_gaussians();
    let cameras = ring_cameras(cfg)?;
    let raster = RasterConfig::default();
    let images = cameras
        .iter()
        .map(|c| render_reference(&gaussians, c, &raster))
        .collect();
    let points = PointCloud::new(jittered_points(
        &gaussians, cfg.points, cfg.jitter, cfg.seed,
    ));
    let scene = Scene::new(cameras, images, points)?;
    split_train_test(scene, &SplitRule::EveryNth(cfg.test_every))
}
