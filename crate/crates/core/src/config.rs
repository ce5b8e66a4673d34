//! Run configuration. Every tunable lives here; files are TOML with one
//! section per concern and every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussgen::FilterConfig;
use crate::metrics::SsimConfig;
use crate::pipeline::RenderSettings;
use crate::rasterizer::RasterConfig;
use crate::scaffold::RefinementConfig;

/// Scaffold voxel size: fixed, or the median nearest-neighbor distance of the
/// initial points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoxelSize {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VoxelSizeRepr {
    Number(f64),
    Text(String),
}

impl Serialize for VoxelSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            VoxelSize::Auto => VoxelSizeRepr::Text("auto".into()),
            VoxelSize::Fixed(v) => VoxelSizeRepr::Number(*v),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VoxelSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match VoxelSizeRepr::deserialize(d)? {
            VoxelSizeRepr::Number(v) => Ok(VoxelSize::Fixed(v)),
            VoxelSizeRepr::Text(t) => VoxelSize::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

impl VoxelSize {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(VoxelSize::Auto);
        }
        s.parse::<f64>()
            .map(VoxelSize::Fixed)
            .map_err(|_| format!("voxel size must be a number or \"auto\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// White for scenes loaded from alpha-composited images, black otherwise.
    Auto,
    Black,
    White,
}

impl Background {
    pub fn resolve(self, white_scene: bool) -> [f64; 3] {
        match self {
            Background::Black => [0.0; 3],
            Background::White => [1.0; 3],
            Background::Auto if white_scene => [1.0; 3],
            Background::Auto => [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Neural Gaussians per anchor.
    pub k: usize,
    pub voxel_size: VoxelSize,
    /// Lattice points used when the scene has no sparse points.
    pub init_points: usize,
    pub init_bounds_min: [f64; 3],
    pub init_bounds_max: [f64; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            k: 10,
            voxel_size: VoxelSize::Auto,
            init_points: 100_000,
            init_bounds_min: [-1.5; 3],
            init_bounds_max: [1.5; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub grow: bool,
    pub prune: bool,
    /// Iterations per refinement round.
    pub every: u64,
    pub start: u64,
    /// Refinement stops after this fraction of the run.
    pub end_fraction: f64,
    /// Growth threshold in units of `grad_unit`.
    pub tau_g_multiplier: f64,
    /// Unit of the screen-space gradient statistic.
    pub grad_unit: f64,
    pub levels: u32,
    pub keep_prob: f64,
    pub prune_opacity: f64,
    /// Base growth voxel size; the scaffold voxel size when unset.
    pub growth_voxel_size: Option<f64>,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            grow: true,
            prune: true,
            every: 100,
            start: 500,
            end_fraction: 0.6,
            tau_g_multiplier: 64.0,
            grad_unit: 0.0002,
            levels: 3,
            keep_prob: 0.5,
            prune_opacity: 0.5,
            growth_voxel_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let s = SsimConfig::default();
        Self {
            lambda_ssim: 0.2,
            lambda_vol: 0.001,
            ssim_window: s.window,
            ssim_sigma: s.sigma,
            ssim_c1: s.c1,
            ssim_c2: s.c2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSection {
    pub offsets: f64,
    /// Offset rate at the end of the run relative to its start.
    pub offsets_final_factor: f64,
    pub features: f64,
    pub scales: f64,
    pub mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for LrSection {
    fn default() -> Self {
        Self {
            offsets: 0.01,
            offsets_final_factor: 0.01,
            features: 0.0075,
            scales: 0.007,
            mlp: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: u64,
    pub seed: u64,
    /// Every `test_every`-th view (starting at 0) is held out for evaluation.
    pub test_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            seed: 0,
            test_every: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub tile_size: usize,
    pub background: Background,
    pub alpha_skip: f64,
    pub min_transmittance: f64,
    pub near: f64,
    pub lowpass: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        let r = RasterConfig::default();
        Self {
            tile_size: r.tile_size,
            background: Background::Auto,
            alpha_skip: r.alpha_skip,
            min_transmittance: r.min_transmittance,
            near: r.near,
            lowpass: r.lowpass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub frustum: bool,
    pub opacity: bool,
    pub tau_alpha: f64,
    pub frustum_margin: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            frustum: f.enable_frustum,
            opacity: f.enable_opacity,
            tau_alpha: f.tau_alpha,
            frustum_margin: f.frustum_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub refine: RefineSection,
    pub loss: LossSection,
    pub lr: LrSection,
    pub train: TrainSection,
    pub render: RenderSection,
    pub filter: FilterSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, file: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].matches('\n').count() + 1
            });
            Error::parse(file, line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.model.k == 0 {
            return bad("model.k must be >= 1".into());
        }
        if let VoxelSize::Fixed(v) = self.model.voxel_size {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("model.voxel_size must be positive, got {v}"));
            }
        }
        if self.train.test_every == 0 {
            return bad("train.test_every must be >= 1".into());
        }
        if self.refine.every == 0 {
            return bad("refine.every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.refine.keep_prob) {
            return bad("refine.keep_prob must lie in [0, 1]".into());
        }
        if self.refine.levels == 0 {
            return bad("refine.levels must be >= 1".into());
        }
        if self.loss.lambda_ssim < 0.0 || self.loss.lambda_vol < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.loss.ssim_window == 0 || self.loss.ssim_window.is_multiple_of(2) {
            return bad("loss.ssim_window must be odd".into());
        }
        if self.render.tile_size == 0 {
            return bad("render.tile_size must be >= 1".into());
        }
        if !(self.filter.frustum_margin >= 0.0) {
            return bad("filter.frustum_margin must be >= 0".into());
        }
        Ok(())
    }

    pub fn ssim(&self) -> SsimConfig {
        SsimConfig {
            window: self.loss.ssim_window,
            sigma: self.loss.ssim_sigma,
            c1: self.loss.ssim_c1,
            c2: self.loss.ssim_c2,
        }
    }

    pub fn render_settings(&self, white_scene: bool) -> RenderSettings {
        RenderSettings {
            raster: RasterConfig {
                tile_size: self.render.tile_size,
                background: self.render.background.resolve(white_scene),
                alpha_skip: self.render.alpha_skip,
                min_transmittance: self.render.min_transmittance,
                near: self.render.near,
                lowpass: self.render.lowpass,
            },
            filter: FilterConfig {
                tau_alpha: self.filter.tau_alpha,
                frustum_margin: self.filter.frustum_margin,
                enable_frustum: self.filter.frustum,
                enable_opacity: self.filter.opacity,
            },
        }
    }

    /// Refinement settings for a scaffold of voxel size `voxel_size`.
    pub fn refinement(&self, voxel_size: f64) -> RefinementConfig {
        RefinementConfig {
            growth_voxel_size: self.refine.growth_voxel_size.unwrap_or(voxel_size),
            grad_threshold: self.refine.tau_g_multiplier * self.refine.grad_unit,
            levels: self.refine.levels,
            keep_prob: self.refine.keep_prob,
            prune_opacity: self.refine.prune_opacity,
        }
    }

    /// Last iteration (exclusive) at which refinement statistics are gathered.
    pub fn refine_end(&self) -> u64 {
        (self.refine.end_fraction * self.train.iterations as f64).floor() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.k, 10);
        assert_eq!(cfg.refine.every, 100);
        assert_eq!(cfg.refine.prune_opacity, 0.5);
        let back = RunConfig::from_toml_str(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn voxel_size_forms() {
        let cfg = RunConfig::from_toml_str("[model]\nvoxel_size = 0.25\n", "a").unwrap();
        assert_eq!(cfg.model.voxel_size, VoxelSize::Fixed(0.25));
        let cfg = RunConfig::from_toml_str("[model]\nvoxel_size = \"auto\"\n", "a").unwrap();
        assert_eq!(cfg.model.voxel_size, VoxelSize::Auto);
        assert!(RunConfig::from_toml_str("[model]\nvoxel_size = \"big\"\n", "a").is_err());
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = RunConfig::from_toml_str(
            "[train]\nseed = 1\n\n[loss]\nlambda_vol = oops\n",
            "run.toml",
        )
        .unwrap_err();
        match err {
            Error::Parse { line, file, .. } => {
                assert_eq!(line, 5);
                assert_eq!(file, "run.toml");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(RunConfig::from_toml_str("[train]\nunknown = 1\n", "x").is_err());
    }
}
