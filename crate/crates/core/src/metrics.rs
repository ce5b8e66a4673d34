//! Image quality metrics. SSIM is single-scale with a Gaussian window and
//! valid-mode filtering, and comes with its analytic gradient so the training
//! loss and evaluation share one implementation.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio for unit peak; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Formats a dB value, writing `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:?}")
    }
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Single-channel plane with row-major storage.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

/// Valid-mode separable filtering.
fn filter_valid(p: &Plane, g: &[f64]) -> Plane {
    let n = g.len();
    let (ow, oh) = (p.w + 1 - n, p.h + 1 - n);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane {
        w: ow,
        h: oh,
        v: out,
    }
}

/// Adjoint of [`filter_valid`]: scatters an output-sized plane back to `w × h`.
fn filter_valid_adjoint(p: &Plane, g: &[f64], w: usize, h: usize) -> Plane {
    let n = g.len();
    let mut tmp = vec![0.0; p.w * h];
    for y in 0..p.h {
        for x in 0..p.w {
            let v = p.v[y * p.w + x];
            for i in 0..n {
                tmp[(y + i) * p.w + x] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..p.w {
            let v = tmp[y * p.w + x];
            for i in 0..n {
                out[y * w + x + i] += g[i] * v;
            }
        }
    }
    Plane { w, h, v: out }
}

fn channel(img: &Image, c: usize) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        v: img.data.iter().skip(c).step_by(3).copied().collect(),
    }
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    }
}

fn check_ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<()> {
    check_shapes(a, b)?;
    if cfg.window == 0 || a.width < cfg.window || a.height < cfg.window {
        return Err(Error::Validation(format!(
            "SSIM needs images of at least {0}x{0}, got {1}x{2}",
            cfg.window, a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over all valid window positions and the three channels.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    ssim_impl(a, b, cfg, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<(f64, Image)> {
    ssim_impl(a, b, cfg, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn ssim_impl(
    a: &Image,
    b: &Image,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    check_ssim(a, b, cfg)?;
    let g = gaussian_kernel(cfg.window, cfg.sigma);
    let (c1, c2) = (cfg.c1, cfg.c2);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width, a.height));
    let mut count = 0;
    for c in 0..3 {
        let pa = channel(a, c);
        let pb = channel(b, c);
        let mu_a = filter_valid(&pa, &g);
        let mu_b = filter_valid(&pb, &g);
        let e_aa = filter_valid(&product(&pa, &pa), &g);
        let e_bb = filter_valid(&product(&pb, &pb), &g);
        let e_ab = filter_valid(&product(&pa, &pb), &g);
        count = mu_a.v.len();
        let mut d_mu = vec![0.0; count];
        let mut d_eaa = vec![0.0; count];
        let mut d_eab = vec![0.0; count];
        for i in 0..count {
            let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
            let var_a = e_aa.v[i] - ma * ma;
            let var_b = e_bb.v[i] - mb * mb;
            let cov = e_ab.v[i] - ma * mb;
            let num_l = 2.0 * ma * mb + c1;
            let num_c = 2.0 * cov + c2;
            let den_l = ma * ma + mb * mb + c1;
            let den_c = var_a + var_b + c2;
            let den = den_l * den_c;
            let s = num_l * num_c / den;
            total += s;
            if want_grad {
                d_mu[i] = (2.0 * mb * num_c - 2.0 * mb * num_l) / den - s * 2.0 * ma / den_l
                    + s * 2.0 * ma / den_c;
                d_eaa[i] = -s / den_c;
                d_eab[i] = 2.0 * num_l / den;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let scatter = |v: Vec<f64>| {
                filter_valid_adjoint(
                    &Plane {
                        w: mu_a.w,
                        h: mu_a.h,
                        v,
                    },
                    &g,
                    a.width,
                    a.height,
                )
            };
            let gm = scatter(d_mu);
            let gaa = scatter(d_eaa);
            let gab = scatter(d_eab);
            for p in 0..a.width * a.height {
                grad.data[3 * p + c] = gm.v[p] + 2.0 * pa.v[p] * gaa.v[p] + pb.v[p] * gab.v[p];
            }
        }
    }
    let norm = (3 * count) as f64;
    if let Some(grad) = grad.as_mut() {
        grad.data.iter_mut().for_each(|v| *v /= norm);
    }
    Ok((total / norm, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Checkpoint size in MiB, when known.
    pub model_size_mb: Option<f64>,
}

impl EvalReport {
    pub fn new(views: Vec<ViewMetrics>, model_size_mb: Option<f64>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            views,
            mean_psnr,
            mean_ssim,
            model_size_mb,
        }
    }

    pub fn count(&self) -> usize {
        self.views.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for v in &self.views {
            s.push_str(&format!("{},{},{:?}\n", v.view, format_db(v.psnr), v.ssim));
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let db = |v: f64| {
            if v.is_finite() {
                json!(v)
            } else {
                json!(format_db(v))
            }
        };
        json!({
            "count": self.count(),
            "mean_psnr": db(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "model_size_mb": self.model_size_mb,
            "views": self.views.iter().map(|v| json!({
                "view": v.view,
                "psnr": db(v.psnr),
                "ssim": v.ssim,
            })).collect::<Vec<_>>(),
        })
    }
}
