use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{ssim_with_grad, SsimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_vol: 0.001,
            ssim: SsimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l1: f64,
    /// `λ_SSIM · (1 − SSIM)`.
    pub ssim_term: f64,
    /// `λ_vol · Σ s_x s_y s_z`.
    pub vol_term: f64,
    pub d_image: Image,
    pub d_scales: Vec<[f64; 3]>,
}

/// `L1 + λ_SSIM (1 − SSIM) + λ_vol Σ Prod(s)` with its gradients w.r.t. the
/// rendered image and every Gaussian scale.
pub fn compute_loss(
    rendered: &Image,
    target: &Image,
    scales: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if !rendered.same_shape(target) {
        return Err(Error::Validation(format!(
            "rendered image is {}x{} but target is {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = rendered.data.len() as f64;
    let mut d_image = Image::new(rendered.width, rendered.height);
    let mut l1 = 0.0;
    for ((d, r), t) in d_image
        .data
        .iter_mut()
        .zip(&rendered.data)
        .zip(&target.data)
    {
        let diff = r - t;
        l1 += diff.abs();
        *d = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    l1 /= n;

    let mut ssim_term = 0.0;
    if cfg.lambda_ssim != 0.0 {
        let (s, g) = ssim_with_grad(rendered, target, &cfg.ssim)?;
        ssim_term = cfg.lambda_ssim * (1.0 - s);
        for (d, gs) in d_image.data.iter_mut().zip(&g.data) {
            *d -= cfg.lambda_ssim * gs;
        }
    }

    let mut vol = 0.0;
    let d_scales = scales
        .iter()
        .map(|s| {
            vol += s[0] * s[1] * s[2];
            [
                cfg.lambda_vol * s[1] * s[2],
                cfg.lambda_vol * s[0] * s[2],
                cfg.lambda_vol * s[0] * s[1],
            ]
        })
        .collect();
    let vol_term = cfg.lambda_vol * vol;
    Ok(LossOutput {
        total: l1 + ssim_term + vol_term,
        l1,
        ssim_term,
        vol_term,
        d_image,
        d_scales,
    })
}
