use super::tiles::{conic, depth_order};
use super::{RasterConfig, Splat2D};
use crate::image::Image;

/// Untiled renderer: every pixel walks the full depth-sorted splat list.
/// Uses the same skip and termination thresholds as `cfg`.
pub fn render_naive(splats: &[Splat2D], width: usize, height: usize, cfg: &RasterConfig) -> Image {
    let order = depth_order(splats);
    let conics: Vec<_> = splats.iter().map(|s| conic(&s.cov2d)).collect();
    let mut image = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for &i in &order {
                let Some([a, b, cc]) = conics[i as usize] else {
                    continue;
                };
                let s = &splats[i as usize];
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let sigma =
                    s.opacity * (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy)).exp();
                if sigma < cfg.alpha_skip {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += s.color[ch] * sigma * t;
                }
                t *= 1.0 - sigma;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            for ch in 0..3 {
                c[ch] += t * cfg.background[ch];
            }
            image.set_pixel(x, y, c);
        }
    }
    image
}
