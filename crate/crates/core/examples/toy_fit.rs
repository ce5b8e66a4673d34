//! Fits the synthetic toy scene and reports held-out quality.
//!
//! `cargo run --release --example toy_fit -- [iterations] [point_fraction] [grow|nogrow]`

use anchorsplat::config::RunConfig;
use anchorsplat::scene_io::PointCloud;
use anchorsplat::synthetic::{subsample_points, toy_scene, ToySceneConfig};
use anchorsplat::trainer::{evaluate, train, TrainState};

fn main() -> anchorsplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let fraction: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let refine = args.get(3).is_none_or(|s| s != "nogrow");
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut scene = toy_scene(&ToySceneConfig::default())?;
    if fraction < 1.0 {
        scene.points = PointCloud::new(subsample_points(
            &scene.points.positions,
            fraction,
            1 + seed,
        ));
    }
    let mut cfg = RunConfig::default();
    cfg.train.iterations = iters;
    cfg.train.seed = seed;
    cfg.refine.grow = refine;
    cfg.refine.prune = refine;
    let mut state = TrainState::new(&scene, &cfg)?;
    println!(
        "voxel size {:.4}, anchors {}",
        state.grid.voxel_size,
        state.grid.len()
    );
    let start = std::time::Instant::now();
    let mut window = Vec::new();
    train(&scene, &mut state, |row| {
        window.push(row.psnr);
        if row.iter % 250 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            println!(
                "iter {:5}  loss {:.4}  psnr(avg) {:.2}  anchors {:4}  gaussians {:5}  {:.1} ms",
                row.iter, row.loss, mean, row.anchors, row.gaussians, row.ms_per_iter
            );
        }
    })?;
    let report = evaluate(&scene, &state, &scene.test_indices(), None)?;
    println!(
        "held-out psnr {:.3} ssim {:.4} after {:.1}s, anchors {}",
        report.mean_psnr,
        report.mean_ssim,
        start.elapsed().as_secs_f64(),
        state.grid.len()
    );
    Ok(())
}
