#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment estimates for one flat tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update at 1-based `step`.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = [1.0, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(
            &mut p,
            &[0.0, 0.0],
            &mut m,
            &mut v,
            0.1,
            1,
            &AdamConfig::default(),
        );
        assert_eq!(p, [1.0, -2.0]);
        let mut m = [0.5, -0.5];
        let mut v = [0.25, 0.25];
        adam_update(
            &mut p,
            &[0.0, 0.0],
            &mut m,
            &mut v,
            0.0,
            4,
            &AdamConfig::default(),
        );
        assert_eq!(m, [0.45, -0.45]);
        assert_eq!(v, [0.25 * 0.999, 0.25 * 0.999]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(
            &mut p,
            &[1.0],
            &mut m,
            &mut v,
            0.01,
            1,
            &AdamConfig::default(),
        );
        assert!((p[0] + 0.01).abs() < 1e-15);
    }
}
