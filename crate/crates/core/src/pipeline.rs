//! The full differentiable chain for one view: anchors → decoded neural
//! Gaussians → splats → image, and its reverse pass back to every learnable
//! anchor and decoder parameter.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::decoders::{
    self, decode_attributes, view_context, DecodedHeads, DecoderGrads, DecoderSet, HeadCache,
    HeadGrads, ViewCache, ViewContext,
};
use crate::error::{Error, Result};
use crate::gaussgen::{
    cull_anchors, opacity_filter, spawn_gaussians, FilterConfig, NeuralGaussian,
};
use crate::image::Image;
use crate::rasterizer::{
    build_covariance, build_covariance_backward, project, project_backward, rasterize,
    rasterize_backward, ProjectCache, RasterConfig, RenderOutput, Splat2D,
};
use crate::scaffold::{AnchorGrid, GaussianObservation, FEATURE_DIM};
use crate::scene_io::Camera;

/// Anchors per work unit when merging decoder gradients; fixed so the
/// summation order does not depend on the thread count.
const DECODER_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderSettings {
    pub raster: RasterConfig,
    pub filter: FilterConfig,
}

#[derive(Debug, Clone)]
struct AnchorPass {
    index: usize,
    ctx: ViewContext,
    view_cache: ViewCache,
    heads: DecodedHeads,
    head_cache: HeadCache,
}

#[derive(Debug, Clone)]
struct Projected {
    gaussian: usize,
    cov3d: Matrix3<f64>,
    cache: ProjectCache,
}

/// Everything one forward pass produced, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ViewRender {
    /// Visible anchor indices in ascending order.
    pub visible: Vec<usize>,
    /// Number of decoded Gaussians before the opacity filter.
    pub candidates: usize,
    /// Post-filter Gaussians ordered by (anchor, offset).
    pub gaussians: Vec<NeuralGaussian>,
    /// Projected splats; `source_index` points into `gaussians`.
    pub splats: Vec<Splat2D>,
    /// Gaussians dropped at projection (behind the near plane or non-finite).
    pub dropped: usize,
    pub raster: RenderOutput,
    passes: Vec<AnchorPass>,
    projected: Vec<Projected>,
}

impl ViewRender {
    pub fn image(&self) -> &Image {
        &self.raster.image
    }
}

/// Renders one view of the scaffold.
pub fn render_view(
    grid: &AnchorGrid,
    decoders: &DecoderSet,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<ViewRender> {
    let visible = cull_anchors(grid, camera, &settings.filter, settings.raster.near);
    let cam_pos = camera.camera_position();
    let passes: Vec<AnchorPass> = visible
        .par_iter()
        .map(|&index| {
            let anchor = &grid.anchors[index];
            let (ctx, view_cache) = view_context(anchor, &cam_pos, decoders)?;
            let (heads, head_cache) = decode_attributes(&ctx, decoders, anchor);
            Ok(AnchorPass {
                index,
                ctx,
                view_cache,
                heads,
                head_cache,
            })
        })
        .collect::<Result<_>>()?;

    let mut candidates = 0;
    let mut gaussians = Vec::new();
    for p in &passes {
        let spawned = spawn_gaussians(&grid.anchors[p.index], p.index, &p.heads);
        candidates += spawned.len();
        gaussians.extend(opacity_filter(spawned, &settings.filter));
    }

    let projections: Vec<Option<(Splat2D, Projected)>> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let cov3d = build_covariance(g.quaternion, g.scale);
            project(
                &g.mean,
                &cov3d,
                g.opacity,
                g.color,
                i,
                camera,
                &settings.raster,
            )
            .map(|(s, cache)| {
                (
                    s,
                    Projected {
                        gaussian: i,
                        cov3d,
                        cache,
                    },
                )
            })
        })
        .collect();
    let dropped = projections.iter().filter(|p| p.is_none()).count();
    let (splats, projected): (Vec<_>, Vec<_>) = projections.into_iter().flatten().unzip();

    let raster = rasterize(&splats, camera.width, camera.height, &settings.raster);
    Ok(ViewRender {
        visible,
        candidates,
        gaussians,
        splats,
        dropped,
        raster,
        passes,
        projected,
    })
}

/// Gradients for every learnable parameter, laid out densely per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    /// `FEATURE_DIM` entries per anchor.
    pub feature: Vec<f64>,
    /// `3k` entries per anchor.
    pub offsets: Vec<f64>,
    pub log_offset_scale: Vec<f64>,
    pub log_base_scale: Vec<f64>,
    pub decoders: DecoderGrads,
}

impl ModelGrads {
    pub fn zeros(num_anchors: usize, decoders: &DecoderSet) -> Self {
        Self {
            feature: vec![0.0; num_anchors * FEATURE_DIM],
            offsets: vec![0.0; num_anchors * 3 * decoders.k],
            log_offset_scale: vec![0.0; num_anchors * 3],
            log_base_scale: vec![0.0; num_anchors * 3],
            decoders: decoders.zero_grads(),
        }
    }
}

/// Result of the reverse pass.
#[derive(Debug, Clone)]
pub struct ViewGrads {
    pub model: ModelGrads,
    /// One entry per post-filter Gaussian for refinement statistics.
    pub observations: Vec<GaussianObservation>,
}

/// Reverse pass of [`render_view`]. `d_scales` optionally adds direct loss
/// gradients on each post-filter Gaussian's scale.
pub fn render_view_backward(
    grid: &AnchorGrid,
    decoders: &DecoderSet,
    camera: &Camera,
    render: &ViewRender,
    d_image: &Image,
    d_scales: Option<&[[f64; 3]]>,
) -> Result<ViewGrads> {
    let n = render.gaussians.len();
    if d_scales.is_some_and(|d| d.len() != n) || render.passes.iter().any(|p| p.index >= grid.len())
    {
        return Err(Error::Internal(
            "backward called with state that does not match the forward pass".into(),
        ));
    }
    let splat_grads = rasterize_backward(&render.splats, &render.raster, d_image)?;

    // per-Gaussian gradients of the activated head outputs and the mean
    let mut d_opacity = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    let mut d_rot = vec![[0.0; 4]; n];
    let mut d_scale = d_scales.map_or_else(|| vec![[0.0; 3]; n], <[_]>::to_vec);
    let mut d_mean = vec![Vector3::zeros(); n];
    let mut screen_norm = vec![0.0; n];
    let (half_w, half_h) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
    for (p, sg) in render.projected.iter().zip(&splat_grads) {
        let i = p.gaussian;
        let g = &render.gaussians[i];
        let (dmu, dsigma) = project_backward(&p.cache, &p.cov3d, camera, sg.mean2d, sg.cov2d);
        let (dq, ds) = build_covariance_backward(g.quaternion, g.scale, &dsigma);
        if g.opacity_passes_gradient() {
            d_opacity[i] = sg.opacity;
        }
        d_color[i] = sg.color;
        d_rot[i] = dq;
        for a in 0..3 {
            d_scale[i][a] += ds[a];
        }
        d_mean[i] = dmu;
        screen_norm[i] = (sg.mean2d[0] * half_w).hypot(sg.mean2d[1] * half_h);
    }

    let k = decoders.k;
    let mut model = ModelGrads::zeros(grid.len(), decoders);
    let mut cursor = 0;
    let mut spans = Vec::with_capacity(render.passes.len());
    for p in &render.passes {
        let start = cursor;
        while cursor < n && render.gaussians[cursor].parent_anchor == p.index {
            cursor += 1;
        }
        spans.push(start..cursor);
    }

    let chunks: Vec<(DecoderGrads, Vec<decoders::AnchorInputGrads>)> = render
        .passes
        .par_chunks(DECODER_CHUNK)
        .zip(spans.par_chunks(DECODER_CHUNK))
        .map(|(passes, spans)| {
            let mut dgrads = decoders.zero_grads();
            let mut inputs = Vec::with_capacity(passes.len());
            for (p, span) in passes.iter().zip(spans) {
                let mut up = HeadGrads::zeros(k);
                for i in span.clone() {
                    let j = render.gaussians[i].offset_index;
                    up.opacity[j] = d_opacity[i];
                    up.colors[j] = d_color[i];
                    up.rotations[j] = d_rot[i];
                    up.scales[j] = d_scale[i];
                }
                inputs.push(decoders::backward(
                    decoders,
                    &p.ctx,
                    &p.view_cache,
                    &p.head_cache,
                    &p.heads,
                    &up,
                    &mut dgrads,
                )?);
            }
            Ok((dgrads, inputs))
        })
        .collect::<Result<_>>()?;

    let mut pass_iter = render.passes.iter();
    for (dgrads, inputs) in chunks {
        model.decoders.add(&dgrads);
        for input in inputs {
            let a = pass_iter.next().expect("one input per pass").index;
            model.feature[a * FEATURE_DIM..(a + 1) * FEATURE_DIM].copy_from_slice(&input.feature);
            model.log_base_scale[a * 3..a * 3 + 3].copy_from_slice(&input.log_base_scale);
        }
    }

    // μ = x_v + O ⊙ exp(log l)
    let mut observations = Vec::with_capacity(n);
    for (i, g) in render.gaussians.iter().enumerate() {
        let a = g.parent_anchor;
        let anchor = &grid.anchors[a];
        let l = anchor.offset_scale();
        let o = anchor.offsets[g.offset_index];
        let dmu = d_mean[i];
        for ax in 0..3 {
            model.offsets[(a * k + g.offset_index) * 3 + ax] += dmu[ax] * l[ax];
            model.log_offset_scale[a * 3 + ax] += dmu[ax] * o[ax] * l[ax];
        }
        observations.push(GaussianObservation {
            position: g.mean,
            grad_norm: screen_norm[i],
            opacity: g.opacity,
            anchor: a,
        });
    }
    Ok(ViewGrads {
        model,
        observations,
    })
}
