//! Optimization loop: loss, Adam updates for anchors and decoders, scheduled
//! anchor refinement and checkpointing.

mod adam;
mod checkpoint;
mod loss;

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{adam_update, AdamConfig, Moments};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use loss::{compute_loss, LossConfig, LossOutput};

use crate::config::{RunConfig, VoxelSize};
use crate::decoders::DecoderSet;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, EvalReport, ViewMetrics};
use crate::pipeline::{render_view, render_view_backward, ModelGrads, ViewRender};
use crate::scaffold::{
    auto_voxel_size, grow_anchors, lattice_points, prune_anchors, voxelize, Aabb, AnchorGrid,
    RefinementAccumulator, FEATURE_DIM,
};
use crate::scene_io::{Camera, PointCloud, Scene};

/// Learnable scalars per anchor: feature, `k` offsets, two log-scales.
pub fn anchor_param_count(k: usize) -> usize {
    FEATURE_DIM + 3 * k + 6
}

/// Everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Effective configuration with the voxel size resolved.
    pub config: RunConfig,
    pub grid: AnchorGrid,
    pub decoders: DecoderSet,
    /// `anchor_param_count(k)` moments per anchor, in anchor order.
    pub anchor_moments: Moments,
    pub decoder_moments: [Moments; 5],
    /// Completed iterations.
    pub iteration: u64,
    pub accumulator: RefinementAccumulator,
    pub rng: ChaCha8Rng,
    /// Training views left in the current epoch, consumed from the back.
    pub view_queue: Vec<usize>,
    /// Parameter groups whose update was skipped for a non-finite gradient.
    pub skipped_updates: u64,
    /// Whether the scene's images were composited over white.
    pub white_scene: bool,
}

impl TrainState {
    /// Builds the initial scaffold and decoders for `scene`.
    pub fn new(scene: &Scene, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        let k = config.model.k;
        let points = if scene.points.is_empty() {
            let m = &config.model;
            let bounds = Aabb::new(
                Vector3::from(m.init_bounds_min),
                Vector3::from(m.init_bounds_max),
            );
            PointCloud::new(lattice_points(m.init_points, &bounds)?)
        } else {
            scene.points.clone()
        };
        let voxel_size = match config.model.voxel_size {
            VoxelSize::Fixed(v) => v,
            VoxelSize::Auto => auto_voxel_size(&points)?,
        };
        config.model.voxel_size = VoxelSize::Fixed(voxel_size);
        let grid = voxelize(&points, voxel_size, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let decoders = DecoderSet::init(k, &mut rng);
        let accumulator = RefinementAccumulator::new(grid.len(), &config.refinement(voxel_size));
        Ok(Self {
            anchor_moments: Moments::zeros(grid.len() * anchor_param_count(k)),
            decoder_moments: decoders.param_counts().map(Moments::zeros),
            grid,
            decoders,
            iteration: 0,
            accumulator,
            rng,
            view_queue: Vec::new(),
            skipped_updates: 0,
            white_scene: scene.white_background,
            config,
        })
    }

    pub fn render(&self, camera: &Camera) -> Result<ViewRender> {
        render_view(
            &self.grid,
            &self.decoders,
            camera,
            &self.config.render_settings(self.white_scene),
        )
    }

    /// Checks that every parameter tensor has exactly one matching moment pair.
    pub fn check_consistency(&self) -> Result<()> {
        let stride = anchor_param_count(self.decoders.k);
        let am = &self.anchor_moments;
        let mut ok = am.m.len() == self.grid.len() * stride && am.v.len() == am.m.len();
        for (net, mom) in self.decoders.nets.iter().zip(&self.decoder_moments) {
            ok &= mom.m.len() == net.params.len() && mom.v.len() == net.params.len();
        }
        ok &= self.grid.anchors.iter().all(|a| a.k() == self.decoders.k);
        if ok {
            Ok(())
        } else {
            Err(Error::Internal(
                "optimizer moments do not match the parameters".into(),
            ))
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub vol_term: f64,
    pub psnr: f64,
    pub anchors: usize,
    pub gaussians: usize,
    pub ms_per_iter: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "iter,loss,l1,ssim_term,vol_term,psnr,anchors,gaussians,ms_per_iter";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{},{},{},{:.3}",
            self.iter,
            self.loss,
            self.l1,
            self.ssim_term,
            self.vol_term,
            crate::metrics::format_db(self.psnr),
            self.anchors,
            self.gaussians,
            self.ms_per_iter
        )
    }
}

fn apply_adam(state: &mut TrainState, grads: &ModelGrads, step: u64) {
    let cfg = &state.config;
    let adam = AdamConfig {
        beta1: cfg.lr.beta1,
        beta2: cfg.lr.beta2,
        eps: cfg.lr.eps,
    };
    let total = cfg.train.iterations.max(1) as f64;
    let progress = ((step - 1) as f64 / total).min(1.0);
    let lr_offsets = cfg.lr.offsets * cfg.lr.offsets_final_factor.powf(progress);
    let (lr_feat, lr_scale, lr_mlp) = (cfg.lr.features, cfg.lr.scales, cfg.lr.mlp);

    let finite = |g: &[f64]| g.iter().all(|v| v.is_finite());
    let ok = [
        finite(&grads.feature),
        finite(&grads.offsets),
        finite(&grads.log_offset_scale),
        finite(&grads.log_base_scale),
    ];
    let k = state.decoders.k;
    let stride = anchor_param_count(k);
    let Moments { m, v } = &mut state.anchor_moments;
    state
        .grid
        .anchors
        .par_iter_mut()
        .zip(m.par_chunks_mut(stride))
        .zip(v.par_chunks_mut(stride))
        .enumerate()
        .for_each(|(a, ((anchor, m), v))| {
            let (mf, m) = m.split_at_mut(FEATURE_DIM);
            let (mo, m) = m.split_at_mut(3 * k);
            let (mls, mlb) = m.split_at_mut(3);
            let (vf, v) = v.split_at_mut(FEATURE_DIM);
            let (vo, v) = v.split_at_mut(3 * k);
            let (vls, vlb) = v.split_at_mut(3);
            if ok[0] {
                let g = &grads.feature[a * FEATURE_DIM..(a + 1) * FEATURE_DIM];
                adam_update(&mut anchor.feature, g, mf, vf, lr_feat, step, &adam);
            }
            if ok[1] {
                let g = &grads.offsets[a * 3 * k..(a + 1) * 3 * k];
                adam_update(
                    anchor.offsets.as_flattened_mut(),
                    g,
                    mo,
                    vo,
                    lr_offsets,
                    step,
                    &adam,
                );
            }
            if ok[2] {
                let g = &grads.log_offset_scale[a * 3..a * 3 + 3];
                adam_update(
                    &mut anchor.log_offset_scale,
                    g,
                    mls,
                    vls,
                    lr_scale,
                    step,
                    &adam,
                );
            }
            if ok[3] {
                let g = &grads.log_base_scale[a * 3..a * 3 + 3];
                adam_update(
                    &mut anchor.log_base_scale,
                    g,
                    mlb,
                    vlb,
                    lr_scale,
                    step,
                    &adam,
                );
            }
        });
    state.skipped_updates += ok.iter().filter(|o| !**o).count() as u64;

    for ((net, mom), g) in state
        .decoders
        .nets
        .iter_mut()
        .zip(state.decoder_moments.iter_mut())
        .zip(&grads.decoders.0)
    {
        if finite(g) {
            adam_update(
                &mut net.params,
                g,
                &mut mom.m,
                &mut mom.v,
                lr_mlp,
                step,
                &adam,
            );
        } else {
            state.skipped_updates += 1;
        }
    }
}

/// Grows then prunes the scaffold and keeps the anchor moments aligned.
fn refine(state: &mut TrainState) -> Result<()> {
    let cfg = state.config.refinement(state.grid.voxel_size);
    let stride = anchor_param_count(state.decoders.k);
    if state.config.refine.grow {
        let added = grow_anchors(&mut state.grid, &state.accumulator, &cfg, &mut state.rng);
        let n = state.anchor_moments.m.len() + added * stride;
        state.anchor_moments.m.resize(n, 0.0);
        state.anchor_moments.v.resize(n, 0.0);
    }
    if state.config.refine.prune {
        let kept = prune_anchors(&mut state.grid, &state.accumulator, &cfg);
        let pick = |src: &[f64]| -> Vec<f64> {
            kept.iter()
                .flat_map(|&i| src[i * stride..(i + 1) * stride].iter().copied())
                .collect()
        };
        state.anchor_moments = Moments {
            m: pick(&state.anchor_moments.m),
            v: pick(&state.anchor_moments.v),
        };
    }
    state.accumulator.reset(state.grid.len());
    if state.grid.is_empty() {
        return Err(Error::Validation(format!(
            "every anchor was pruned at iteration {}; lower refine.prune_opacity or disable pruning",
            state.iteration
        )));
    }
    state.check_consistency()
}

/// Runs one optimization step on training view `view`.
pub fn train_step(scene: &Scene, state: &mut TrainState, view: usize) -> Result<LogRow> {
    let start = Instant::now();
    let camera = &scene.cameras[view];
    let target = &scene.images[view];
    let render = state.render(camera)?;
    let scales: Vec<[f64; 3]> = render.gaussians.iter().map(|g| g.scale).collect();
    let loss_cfg = LossConfig {
        lambda_ssim: state.config.loss.lambda_ssim,
        lambda_vol: state.config.loss.lambda_vol,
        ssim: state.config.ssim(),
    };
    let loss = compute_loss(render.image(), target, &scales, &loss_cfg)?;
    let grads = render_view_backward(
        &state.grid,
        &state.decoders,
        camera,
        &render,
        &loss.d_image,
        Some(&loss.d_scales),
    )?;

    let step = state.iteration + 1;
    apply_adam(state, &grads.model, step);
    state.iteration = step;

    let rc = &state.config.refine;
    if rc.grow || rc.prune {
        let end = state.config.refine_end();
        if step > rc.start.saturating_sub(rc.every) && step <= end {
            state
                .accumulator
                .accumulate(&grads.observations, &render.visible);
        }
        if step.is_multiple_of(rc.every) && step >= rc.start && step <= end {
            refine(state)?;
        }
    }

    Ok(LogRow {
        iter: step,
        loss: loss.total,
        l1: loss.l1,
        ssim_term: loss.ssim_term,
        vol_term: loss.vol_term,
        psnr: psnr(render.image(), target)?,
        anchors: state.grid.len(),
        gaussians: render.gaussians.len(),
        ms_per_iter: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trains until `config.train.iterations` steps have completed, calling
/// `on_step` after each one.
pub fn train(
    scene: &Scene,
    state: &mut TrainState,
    mut on_step: impl FnMut(&LogRow),
) -> Result<()> {
    let views = scene.train_indices();
    if views.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    while state.iteration < state.config.train.iterations {
        if state.view_queue.is_empty() {
            let mut order = views.clone();
            order.shuffle(&mut state.rng);
            order.reverse();
            state.view_queue = order;
        }
        let view = state.view_queue.pop().expect("queue refilled above");
        if view >= scene.len() {
            return Err(Error::Validation(format!(
                "view {view} is not part of this scene"
            )));
        }
        let row = train_step(scene, state, view)?;
        on_step(&row);
    }
    Ok(())
}

/// Renders `views` and scores them against the scene images.
pub fn evaluate(
    scene: &Scene,
    state: &TrainState,
    views: &[usize],
    model_size_mb: Option<f64>,
) -> Result<EvalReport> {
    let cfg = state.config.ssim();
    let rows = views
        .iter()
        .map(|&v| {
            let img = state.render(&scene.cameras[v])?;
            Ok(ViewMetrics {
                view: v,
                psnr: psnr(img.image(), &scene.images[v])?,
                ssim: ssim(img.image(), &scene.images[v], &cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows, model_size_mb))
}
