use rayon::prelude::*;

use super::{RasterConfig, Splat2D, SplatGrad};
use crate::error::{Error, Result};
use crate::image::Image;

/// Smallest determinant accepted for a dilated 2D covariance.
const MIN_DET: f64 = 1e-12;

/// Per-tile splat lists in blending order (depth ascending, ties by source index).
#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the splat slice, one list per tile in row-major tile order.
    pub lists: Vec<Vec<u32>>,
}

impl TileLayout {
    pub fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / self.tile_size) * self.tiles_x + x / self.tile_size
    }

    fn pixel_range(
        &self,
        tile: usize,
        width: usize,
        height: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0..(x0 + self.tile_size).min(width),
            y0..(y0 + self.tile_size).min(height),
        )
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    pub layout: TileLayout,
    /// Inverse 2D covariance `(a, b, c)` per splat, `None` for skipped splats.
    pub conics: Vec<Option<[f64; 3]>>,
    /// Splats skipped for a near-singular covariance.
    pub singular: usize,
    /// Settings the image was rendered with.
    pub config: RasterConfig,
}

pub(crate) fn conic(cov: &[f64; 3]) -> Option<[f64; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det >= MIN_DET) || !det.is_finite() {
        return None;
    }
    Some([cov[2] / det, -cov[1] / det, cov[0] / det])
}

/// Global blending order: depth ascending, ties broken by source index.
pub(crate) fn depth_order(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.source_index.cmp(&sb.source_index))
            .then(a.cmp(&b))
    });
    order
}

/// Mahalanobis radius beyond which `opacity · G < alpha_skip`; `None` if the
/// splat can never reach the threshold, infinite when skipping is disabled.
fn support_radius(opacity: f64, alpha_skip: f64) -> Option<f64> {
    if alpha_skip <= 0.0 {
        return Some(f64::INFINITY);
    }
    if opacity < alpha_skip {
        return None;
    }
    // slack keeps boundary pixels whose σ rounds up to the threshold
    Some((2.0 * (opacity / alpha_skip).ln()).max(0.0).sqrt() * (1.0 + 1e-6) + 1e-6)
}

/// Assigns splats to every tile whose pixel centers may receive a
/// contribution of at least `alpha_skip`.
pub fn bin_splats(
    splats: &[Splat2D],
    conics: &[Option<[f64; 3]>],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> TileLayout {
    let ts = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for idx in depth_order(splats) {
        let s = &splats[idx as usize];
        if conics[idx as usize].is_none() {
            continue;
        }
        let Some(r) = support_radius(s.opacity, cfg.alpha_skip) else {
            continue;
        };
        let (x_lo, x_hi, y_lo, y_hi) = if r.is_infinite() {
            (0, tiles_x - 1, 0, tiles_y - 1)
        } else {
            let rx = r * s.cov2d[0].sqrt();
            let ry = r * s.cov2d[2].sqrt();
            // pixel centers lie at i + 0.5 for i in 0..width
            let px_lo = (s.mean2d[0] - rx - 0.5).ceil().max(0.0);
            let px_hi = (s.mean2d[0] + rx - 0.5).floor().min(width as f64 - 1.0);
            let py_lo = (s.mean2d[1] - ry - 0.5).ceil().max(0.0);
            let py_hi = (s.mean2d[1] + ry - 0.5).floor().min(height as f64 - 1.0);
            if !(px_lo <= px_hi && py_lo <= py_hi) {
                continue;
            }
            (
                px_lo as usize / ts,
                px_hi as usize / ts,
                py_lo as usize / ts,
                py_hi as usize / ts,
            )
        };
        for ty in y_lo..=y_hi {
            for tx in x_lo..=x_hi {
                lists[ty * tiles_x + tx].push(idx);
            }
        }
    }
    TileLayout {
        tile_size: ts,
        tiles_x,
        tiles_y,
        lists,
    }
}

/// One blended contribution at a pixel.
struct Contribution {
    slot: usize,
    sigma: f64,
    gauss: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Front-to-back blending of one pixel. Calls `visit` for every splat that
/// contributes and returns `(color, final transmittance)`.
#[inline]
fn blend_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    splats: &[Splat2D],
    conics: &[Option<[f64; 3]>],
    cfg: &RasterConfig,
    mut visit: impl FnMut(Contribution),
) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for (slot, &idx) in list.iter().enumerate() {
        let s = &splats[idx as usize];
        let [a, b, cc] = conics[idx as usize].expect("binned splats have conics");
        let dx = px - s.mean2d[0];
        let dy = py - s.mean2d[1];
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy);
        let gauss = power.exp();
        let sigma = s.opacity * gauss;
        if sigma < cfg.alpha_skip {
            continue;
        }
        for ch in 0..3 {
            c[ch] += s.color[ch] * sigma * t;
        }
        visit(Contribution {
            slot,
            sigma,
            gauss,
            transmittance: t,
            dx,
            dy,
        });
        t *= 1.0 - sigma;
        if t < cfg.min_transmittance {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * cfg.background[ch];
    }
    (c, t)
}

/// Renders `splats` into a `width × height` image.
pub fn rasterize(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> RenderOutput {
    let conics: Vec<Option<[f64; 3]>> = splats.iter().map(|s| conic(&s.cov2d)).collect();
    let singular = conics.iter().filter(|c| c.is_none()).count();
    let layout = bin_splats(splats, &conics, width, height, cfg);

    let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..layout.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (xs, ys) = layout.pixel_range(tile, width, height);
            let list = &layout.lists[tile];
            let mut colors = Vec::with_capacity(xs.len() * ys.len() * 3);
            let mut trans = Vec::with_capacity(xs.len() * ys.len());
            for y in ys {
                for x in xs.clone() {
                    let (c, t) = blend_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list,
                        splats,
                        &conics,
                        cfg,
                        |_| {},
                    );
                    colors.extend_from_slice(&c);
                    trans.push(t);
                }
            }
            (colors, trans)
        })
        .collect();

    let mut image = Image::new(width, height);
    let mut final_transmittance = vec![0.0; width * height];
    for (tile, (colors, trans)) in tiles.iter().enumerate() {
        let (xs, ys) = layout.pixel_range(tile, width, height);
        let mut i = 0;
        for y in ys {
            for x in xs.clone() {
                image.set_pixel(x, y, [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]]);
                final_transmittance[y * width + x] = trans[i];
                i += 1;
            }
        }
    }
    RenderOutput {
        image,
        final_transmittance,
        layout,
        conics,
        singular,
        config: cfg.clone(),
    }
}

/// Exact reverse pass of [`rasterize`] under the same skip and termination
/// rules. Returns one gradient per splat.
pub fn rasterize_backward(
    splats: &[Splat2D],
    output: &RenderOutput,
    d_image: &Image,
) -> Result<Vec<SplatGrad>> {
    let (width, height) = (output.image.width, output.image.height);
    if output.conics.len() != splats.len() || !d_image.same_shape(&output.image) {
        return Err(Error::Internal(
            "rasterizer backward called with a mismatched forward cache".into(),
        ));
    }
    let cfg = &output.config;
    let layout = &output.layout;
    let conics = &output.conics;

    // per tile: gradient slots aligned with the tile list, conic grads in cov2d
    let per_tile: Vec<Vec<SplatGrad>> = (0..layout.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &layout.lists[tile];
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (xs, ys) = layout.pixel_range(tile, width, height);
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let dc = d_image.pixel(x, y);
                    if dc == [0.0; 3] {
                        continue;
                    }
                    contribs.clear();
                    blend_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list,
                        splats,
                        conics,
                        cfg,
                        |c| contribs.push(c),
                    );
                    let mut behind = cfg.background;
                    for c in contribs.iter().rev() {
                        let s = &splats[list[c.slot] as usize];
                        let g = &mut local[c.slot];
                        let mut d_sigma = 0.0;
                        for ch in 0..3 {
                            g.color[ch] += dc[ch] * c.sigma * c.transmittance;
                            d_sigma += dc[ch] * c.transmittance * (s.color[ch] - behind[ch]);
                            behind[ch] = s.color[ch] * c.sigma + (1.0 - c.sigma) * behind[ch];
                        }
                        g.opacity += d_sigma * c.gauss;
                        let d_power = d_sigma * c.sigma;
                        let [a, b, cc] = conics[list[c.slot] as usize].unwrap();
                        g.mean2d[0] += d_power * (a * c.dx + b * c.dy);
                        g.mean2d[1] += d_power * (b * c.dx + cc * c.dy);
                        // conic parameter gradients, converted to cov2d below
                        g.cov2d[0] += -0.5 * c.dx * c.dx * d_power;
                        g.cov2d[1] += -c.dx * c.dy * d_power;
                        g.cov2d[2] += -0.5 * c.dy * c.dy * d_power;
                    }
                }
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (tile, local) in per_tile.iter().enumerate() {
        for (&idx, g) in layout.lists[tile].iter().zip(local) {
            let dst = &mut grads[idx as usize];
            for i in 0..2 {
                dst.mean2d[i] += g.mean2d[i];
            }
            for i in 0..3 {
                dst.cov2d[i] += g.cov2d[i];
                dst.color[i] += g.color[i];
            }
            dst.opacity += g.opacity;
        }
    }
    for (g, q) in grads.iter_mut().zip(conics) {
        let Some([a, b, c]) = *q else { continue };
        // dL/dΣ = -Q (dL/dQ) Q with the off-diagonal gradient split over both slots
        let [da, db, dc] = g.cov2d;
        let hb = 0.5 * db;
        let m00 = a * da + b * hb;
        let m01 = a * hb + b * dc;
        let m10 = b * da + c * hb;
        let m11 = b * hb + c * dc;
        let g00 = -(m00 * a + m01 * b);
        let g01 = -(m00 * b + m01 * c);
        let g10 = -(m10 * a + m11 * b);
        let g11 = -(m10 * b + m11 * c);
        g.cov2d = [g00, g01 + g10, g11];
    }
    Ok(grads)
}
