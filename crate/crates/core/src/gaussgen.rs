//! Per-view neural Gaussian generation: frustum culling of anchors, offset
//! placement of the `k` children and opacity filtering.

use nalgebra::Vector3;

use crate::decoders::DecodedHeads;
use crate::scaffold::{Anchor, AnchorGrid};
use crate::scene_io::Camera;

/// Opacity floor used when the opacity filter is disabled.
pub const UNFILTERED_MIN_OPACITY: f64 = 1e-4;

/// A renderable Gaussian decoded from one anchor offset.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGaussian {
    pub mean: Vector3<f64>,
    /// Opacity used for blending.
    pub opacity: f64,
    /// `tanh` head output before filtering or clamping.
    pub raw_opacity: f64,
    pub color: [f64; 3],
    pub quaternion: [f64; 4],
    pub scale: [f64; 3],
    pub parent_anchor: usize,
    pub offset_index: usize,
}

impl NeuralGaussian {
    /// Whether the blending opacity follows the raw head output, i.e. whether
    /// opacity gradients flow back into the decoder.
    pub fn opacity_passes_gradient(&self) -> bool {
        self.opacity == self.raw_opacity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub tau_alpha: f64,
    /// Culling margin as a multiple of the anchor's largest offset scale.
    pub frustum_margin: f64,
    pub enable_frustum: bool,
    pub enable_opacity: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_alpha: 0.0,
            frustum_margin: 1.0,
            enable_frustum: true,
            enable_opacity: true,
        }
    }
}

/// Visibility of a single anchor, padded by `margin` world units.
pub fn anchor_visible(position: &Vector3<f64>, margin: f64, camera: &Camera, near: f64) -> bool {
    let t = camera.to_camera(position);
    if !(t.z > near) {
        // the padding sphere may still straddle the near plane
        return margin > 0.0 && t.z + margin > near;
    }
    let [u, v] = camera.project_camera_point(&t);
    let pad = margin * camera.fx.max(camera.fy) / t.z;
    u >= -pad && u <= camera.width as f64 + pad && v >= -pad && v <= camera.height as f64 + pad
}

/// Indices of anchors whose padded position falls inside the view frustum.
/// Returns every anchor when frustum culling is disabled.
pub fn cull_anchors(
    grid: &AnchorGrid,
    camera: &Camera,
    cfg: &FilterConfig,
    near: f64,
) -> Vec<usize> {
    if !cfg.enable_frustum {
        return (0..grid.len()).collect();
    }
    grid.anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let extent = a.offset_scale().into_iter().fold(0.0, f64::max);
            anchor_visible(
                &a.position,
                cfg.frustum_margin.max(0.0) * extent,
                camera,
                near,
            )
        })
        .map(|(i, _)| i)
        .collect()
}

/// The `k` unfiltered children of `anchor`, with `μ_i = x_v + O_i ⊙ l_v`.
pub fn spawn_gaussians(
    anchor: &Anchor,
    anchor_index: usize,
    heads: &DecodedHeads,
) -> Vec<NeuralGaussian> {
    let l = anchor.offset_scale();
    anchor
        .offsets
        .iter()
        .enumerate()
        .map(|(i, o)| NeuralGaussian {
            mean: anchor.position + Vector3::new(o[0] * l[0], o[1] * l[1], o[2] * l[2]),
            opacity: heads.opacity[i],
            raw_opacity: heads.opacity[i],
            color: heads.colors[i],
            quaternion: heads.rotations[i],
            scale: heads.scales[i],
            parent_anchor: anchor_index,
            offset_index: i,
        })
        .collect()
}

/// Keeps candidates with `α_raw ≥ τ_α`. When the filter is disabled every
/// candidate survives with its opacity clamped to a small positive floor.
pub fn opacity_filter(candidates: Vec<NeuralGaussian>, cfg: &FilterConfig) -> Vec<NeuralGaussian> {
    if cfg.enable_opacity {
        candidates
            .into_iter()
            .filter(|g| g.raw_opacity >= cfg.tau_alpha)
            .collect()
    } else {
        candidates
            .into_iter()
            .map(|mut g| {
                g.opacity = g.raw_opacity.max(UNFILTERED_MIN_OPACITY);
                g
            })
            .collect()
    }
}
