#![allow(dead_code)]

use anchorsplat::decoders::{DecoderSet, Head};
use anchorsplat::gaussgen::FilterConfig;
use anchorsplat::image::Image;
use anchorsplat::pipeline::{render_view, render_view_backward, ModelGrads, RenderSettings};
use anchorsplat::rasterizer::{RasterConfig, Splat2D};
use anchorsplat::scaffold::{Anchor, AnchorGrid, FEATURE_DIM};
use anchorsplat::scene_io::Camera;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_splats(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<Splat2D> {
    (0..n)
        .map(|i| {
            let sx: f64 = rng.gen_range(0.7..8.0);
            let sy: f64 = rng.gen_range(0.7..8.0);
            let rho: f64 = rng.gen_range(-0.9..0.9);
            Splat2D {
                mean2d: [rng.gen_range(-8.0..w + 8.0), rng.gen_range(-8.0..h + 8.0)],
                cov2d: [sx * sx + 0.3, rho * sx * sy, sy * sy + 0.3],
                // coarse depths make exact ties likely
                depth: rng.gen_range(1..40) as f64 * 0.25,
                opacity: rng.gen_range(0.01..0.99),
                color: [rng.gen(), rng.gen(), rng.gen()],
                source_index: i,
            }
        })
        .collect()
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

/// Straight-loop PSNR.
pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
            for c in 0..3 {
                sum += (pa[c] - pb[c]).powi(2);
                n += 1;
            }
        }
    }
    10.0 * (1.0 / (sum / n as f64)).log10()
}

/// SSIM with an explicit 2D Gaussian window evaluated at every valid position.
pub fn ssim_oracle(a: &Image, b: &Image, window: usize, sigma: f64) -> f64 {
    let half = (window as f64 - 1.0) / 2.0;
    let mut w2 = vec![vec![0.0; window]; window];
    let mut total = 0.0;
    for (i, row) in w2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y0 in 0..=a.height - window {
            for x0 in 0..=a.width - window {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..window {
                    for j in 0..window {
                        let w = w2[i][j] / total;
                        let va = a.pixel(x0 + j, y0 + i)[c];
                        let vb = b.pixel(x0 + j, y0 + i)[c];
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Median nearest-neighbor distance by comparing all pairs.
pub fn nn_median_oracle(pts: &[Vector3<f64>]) -> f64 {
    let mut d: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// Learnable scalar addressed by group and flat index.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    Feature(usize, usize),
    Offset(usize, usize),
    LogOffsetScale(usize, usize),
    LogBaseScale(usize, usize),
    Decoder(Head, usize),
}

/// A tiny differentiable scene: two anchors, `k = 3`, a 16×16 camera and a
/// smooth loss `Σ w · image + λ Σ s_x s_y s_z`.
pub struct GradScene {
    pub grid: AnchorGrid,
    pub decoders: DecoderSet,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub weights: Image,
    pub lambda_vol: f64,
}

impl GradScene {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng(seed);
        let k = 3;
        let anchors = [Vector3::new(-0.3, 0.1, 0.0), Vector3::new(0.35, -0.1, 0.2)]
            .into_iter()
            .map(|p| {
                let mut a = Anchor::new(p, k, 0.3, 1);
                for f in a.feature.iter_mut() {
                    *f = rng.gen_range(-1.0..1.0);
                }
                for o in a.offsets.as_flattened_mut() {
                    *o = rng.gen_range(-1.0..1.0);
                }
                a.log_base_scale = std::array::from_fn(|_| rng.gen_range(-1.2..-0.6));
                a.log_offset_scale = std::array::from_fn(|_| rng.gen_range(-1.5..-1.0));
                a
            })
            .collect();
        let grid = AnchorGrid::from_anchors(anchors, 0.1).unwrap();
        let mut decoders = DecoderSet::init(k, &mut rng);
        // push opacity logits positive so most Gaussians survive the filter
        let op = decoders.net_mut(Head::Opacity);
        let n = op.params.len();
        for b in op.params[n - k..].iter_mut() {
            *b = 0.8;
        }
        let camera = Camera::look_at(
            16,
            16,
            20.0,
            Vector3::new(0.4, -0.5, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let settings = RenderSettings {
            raster: RasterConfig {
                background: [0.2, 0.1, 0.3],
                ..RasterConfig::default().exact()
            },
            filter: FilterConfig::default(),
        };
        let weights = Image::from_data(
            16,
            16,
            (0..16 * 16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        Self {
            grid,
            decoders,
            camera,
            settings,
            weights,
            lambda_vol: 0.5,
        }
    }

    pub fn loss(&self) -> f64 {
        let r = render_view(&self.grid, &self.decoders, &self.camera, &self.settings).unwrap();
        let img: f64 = r
            .image()
            .data
            .iter()
            .zip(&self.weights.data)
            .map(|(a, b)| a * b)
            .sum();
        let vol: f64 = r
            .gaussians
            .iter()
            .map(|g| g.scale[0] * g.scale[1] * g.scale[2])
            .sum();
        img + self.lambda_vol * vol
    }

    pub fn gaussian_count(&self) -> usize {
        render_view(&self.grid, &self.decoders, &self.camera, &self.settings)
            .unwrap()
            .splats
            .len()
    }

    pub fn analytic(&self) -> ModelGrads {
        let r = render_view(&self.grid, &self.decoders, &self.camera, &self.settings).unwrap();
        let d_scales: Vec<[f64; 3]> = r
            .gaussians
            .iter()
            .map(|g| {
                let s = g.scale;
                [s[1] * s[2], s[0] * s[2], s[0] * s[1]].map(|v| v * self.lambda_vol)
            })
            .collect();
        render_view_backward(
            &self.grid,
            &self.decoders,
            &self.camera,
            &r,
            &self.weights,
            Some(&d_scales),
        )
        .unwrap()
        .model
    }

    pub fn params(&self) -> Vec<Param> {
        let k = self.decoders.k;
        let mut out = Vec::new();
        for a in 0..self.grid.len() {
            out.extend((0..FEATURE_DIM).map(|i| Param::Feature(a, i)));
            out.extend((0..3 * k).map(|i| Param::Offset(a, i)));
            out.extend((0..3).map(|i| Param::LogOffsetScale(a, i)));
            out.extend((0..3).map(|i| Param::LogBaseScale(a, i)));
        }
        for h in Head::ALL {
            out.extend((0..self.decoders.net(h).params.len()).map(|i| Param::Decoder(h, i)));
        }
        out
    }

    pub fn param_mut(&mut self, p: Param) -> &mut f64 {
        match p {
            Param::Feature(a, i) => &mut self.grid.anchors[a].feature[i],
            Param::Offset(a, i) => &mut self.grid.anchors[a].offsets.as_flattened_mut()[i],
            Param::LogOffsetScale(a, i) => &mut self.grid.anchors[a].log_offset_scale[i],
            Param::LogBaseScale(a, i) => &mut self.grid.anchors[a].log_base_scale[i],
            Param::Decoder(h, i) => &mut self.decoders.net_mut(h).params[i],
        }
    }

    pub fn grad_of(&self, g: &ModelGrads, p: Param) -> f64 {
        let k = self.decoders.k;
        match p {
            Param::Feature(a, i) => g.feature[a * FEATURE_DIM + i],
            Param::Offset(a, i) => g.offsets[a * 3 * k + i],
            Param::LogOffsetScale(a, i) => g.log_offset_scale[a * 3 + i],
            Param::LogBaseScale(a, i) => g.log_base_scale[a * 3 + i],
            Param::Decoder(h, i) => g.decoders.0[h as usize][i],
        }
    }

    /// Central difference of the loss in parameter `p`.
    pub fn numeric(&mut self, p: Param, h: f64) -> f64 {
        let orig = *self.param_mut(p);
        *self.param_mut(p) = orig + h;
        let lp = self.loss();
        *self.param_mut(p) = orig - h;
        let lm = self.loss();
        *self.param_mut(p) = orig;
        (lp - lm) / (2.0 * h)
    }
}

/// Relative error with an absolute floor for gradients near zero.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
