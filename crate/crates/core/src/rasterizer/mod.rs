//! Differentiable tile-based splatting: 3D covariance construction, EWA
//! projection to screen space, depth-ordered alpha blending and the exact
//! reverse pass of each stage.

mod reference;
mod tiles;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::scene_io::Camera;

pub use reference::render_naive;
pub use tiles::{bin_splats, rasterize, rasterize_backward, RenderOutput, TileLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Per-splat contributions with `σ` below this are skipped.
    pub alpha_skip: f64,
    /// Traversal stops once transmittance drops below this.
    pub min_transmittance: f64,
    pub near: f64,
    /// Added to the 2D covariance diagonal, in px².
    pub lowpass: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            alpha_skip: 1.0 / 255.0,
            min_transmittance: 1e-4,
            near: 0.01,
            lowpass: 0.3,
        }
    }
}

impl RasterConfig {
    /// Same settings with contribution skipping and early termination disabled.
    pub fn exact(&self) -> Self {
        Self {
            alpha_skip: 0.0,
            min_transmittance: 0.0,
            ..self.clone()
        }
    }
}

/// A screen-space Gaussian ready for blending.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Symmetric covariance `(xx, xy, yy)` in px².
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub source_index: usize,
}

/// Per-splat gradients. `cov2d` holds derivatives w.r.t. the three free
/// entries `(xx, xy, yy)`, the off-diagonal one moving both matrix slots.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Rotation matrix of a quaternion `(w, x, y, z)` without renormalization.
pub fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn build_covariance(q: [f64; 4], scale: [f64; 3]) -> Matrix3<f64> {
    let m = quat_matrix(q) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// Gradients of [`build_covariance`] w.r.t. `q` and `scale`, given the
/// symmetric gradient `d_sigma` of the loss w.r.t. `Σ`.
pub fn build_covariance_backward(
    q: [f64; 4],
    scale: [f64; 3],
    d_sigma: &Matrix3<f64>,
) -> ([f64; 4], [f64; 3]) {
    let r = quat_matrix(q);
    let s = Matrix3::from_diagonal(&Vector3::from(scale));
    let m = r * s;
    let dm = 2.0 * d_sigma * m;
    let dr = dm * s;
    let mut ds = [0.0; 3];
    for (j, d) in ds.iter_mut().enumerate() {
        *d = (0..3).map(|i| dm[(i, j)] * r[(i, j)]).sum();
    }
    let [w, x, y, z] = q;
    let partials = [
        Matrix3::new(
            0.0,
            -2.0 * z,
            2.0 * y,
            2.0 * z,
            0.0,
            -2.0 * x,
            -2.0 * y,
            2.0 * x,
            0.0,
        ),
        Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ];
    let dq = partials.map(|p| dr.component_mul(&p).sum());
    (dq, ds)
}

/// Intermediate values of [`project`] needed by [`project_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectCache {
    pub t: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a world-space Gaussian through `camera`. Returns `None` when the
/// mean is not in front of the near plane or the result is not finite.
pub fn project(
    mean: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    opacity: f64,
    color: [f64; 3],
    source_index: usize,
    camera: &Camera,
    cfg: &RasterConfig,
) -> Option<(Splat2D, ProjectCache)> {
    let w = camera.rotation();
    let t = w * mean + camera.translation();
    if !(t.z > cfg.near) {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let jacobian = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    );
    let tw = jacobian * w;
    let cov = tw * cov3d * tw.transpose();
    let splat = Splat2D {
        mean2d: [fx * t.x * iz + camera.cx, fy * t.y * iz + camera.cy],
        cov2d: [
            cov[(0, 0)] + cfg.lowpass,
            0.5 * (cov[(0, 1)] + cov[(1, 0)]),
            cov[(1, 1)] + cfg.lowpass,
        ],
        depth: t.z,
        opacity,
        color,
        source_index,
    };
    let finite = splat
        .mean2d
        .iter()
        .chain(&splat.cov2d)
        .all(|v| v.is_finite());
    finite.then_some((splat, ProjectCache { t, jacobian }))
}

/// Gradients w.r.t. the world mean and the 3D covariance (symmetric matrix
/// form) from the screen-space mean and covariance gradients.
pub fn project_backward(
    cache: &ProjectCache,
    cov3d: &Matrix3<f64>,
    camera: &Camera,
    d_mean2d: [f64; 2],
    d_cov2d: [f64; 3],
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = camera.rotation();
    let (fx, fy) = (camera.fx, camera.fy);
    let t = cache.t;
    let j = cache.jacobian;
    let g = Matrix2::new(d_cov2d[0], 0.5 * d_cov2d[1], 0.5 * d_cov2d[1], d_cov2d[2]);
    let tw = j * w;
    let d_sigma = tw.transpose() * g * tw;
    let dj = 2.0 * g * tw * cov3d * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dt = Vector3::zeros();
    dt.x += d_mean2d[0] * fx * iz - dj[(0, 2)] * fx * iz2;
    dt.y += d_mean2d[1] * fy * iz - dj[(1, 2)] * fy * iz2;
    dt.z += -d_mean2d[0] * fx * t.x * iz2 - d_mean2d[1] * fy * t.y * iz2 - dj[(0, 0)] * fx * iz2
        + dj[(0, 2)] * 2.0 * fx * t.x * iz3
        - dj[(1, 1)] * fy * iz2
        + dj[(1, 2)] * 2.0 * fy * t.y * iz3;
    (w.transpose() * dt, d_sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Quaternion, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::look_at(
            64,
            48,
            100.0,
            Vector3::new(0.5, -3.0, 0.4),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap()
    }

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }

    #[test]
    fn covariance_special_cases() {
        assert_eq!(
            build_covariance([1.0, 0.0, 0.0, 0.0], [1.0; 3]),
            Matrix3::identity()
        );
        assert_eq!(
            build_covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))
        );
    }

    #[test]
    fn covariance_matches_rotation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let s: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.01..2.0));
            let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
                .to_rotation_matrix()
                .into_inner();
            let oracle =
                rot * Matrix3::from_diagonal(&Vector3::from(s.map(|v| v * v))) * rot.transpose();
            let sigma = build_covariance(q, s);
            assert!((sigma - oracle).abs().max() < 1e-12);
            assert!(
                (sigma - sigma.transpose()).abs().max() == 0.0
                    || (sigma - sigma.transpose()).abs().max() < 1e-15
            );
            assert!(sigma.symmetric_eigenvalues().min() >= -1e-12);
        }
    }

    #[test]
    fn covariance_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..20 {
            let q = random_unit_quat(&mut rng);
            let s: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..2.0));
            let g: Matrix3<f64> = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let g = 0.5 * (g + g.transpose());
            let f = |q: [f64; 4], s: [f64; 3]| build_covariance(q, s).component_mul(&g).sum();
            let (dq, ds) = build_covariance_backward(q, s, &g);
            for i in 0..4 {
                let (mut qp, mut qm) = (q, q);
                qp[i] += h;
                qm[i] -= h;
                let num = (f(qp, s) - f(qm, s)) / (2.0 * h);
                assert!((dq[i] - num).abs() <= 1e-6 * num.abs().max(1.0), "dq{i}");
            }
            for i in 0..3 {
                let (mut sp, mut sm) = (s, s);
                sp[i] += h;
                sm[i] -= h;
                let num = (f(q, sp) - f(q, sm)) / (2.0 * h);
                assert!((ds[i] - num).abs() <= 1e-6 * num.abs().max(1.0), "ds{i}");
            }
        }
    }

    #[test]
    fn on_axis_projection() {
        let cam = Camera::from_pose(
            64,
            64,
            100.0,
            100.0,
            32.0,
            32.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        let cfg = RasterConfig::default();
        let (s, _) = project(
            &Vector3::new(0.0, 0.0, 2.0),
            &Matrix3::identity(),
            0.5,
            [1.0; 3],
            0,
            &cam,
            &cfg,
        )
        .unwrap();
        assert_eq!(s.mean2d, [32.0, 32.0]);
        assert!((s.cov2d[0] - 2500.3).abs() < 1e-9);
        assert!((s.cov2d[2] - 2500.3).abs() < 1e-9);
        assert_eq!(s.cov2d[1], 0.0);
        assert!(project(
            &Vector3::new(0.0, 0.0, -1.0),
            &Matrix3::identity(),
            0.5,
            [1.0; 3],
            0,
            &cam,
            &cfg
        )
        .is_none());
    }

    /// Numeric Jacobian of the pixel projection map, then J W Σ Wᵀ Jᵀ.
    #[test]
    fn projected_covariance_matches_numeric_jacobian() {
        let cam = camera();
        let cfg = RasterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pix = |t: &Vector3<f64>| [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
        for _ in 0..50 {
            let mean = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let sigma = build_covariance(
                random_unit_quat(&mut rng),
                std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
            );
            let (s, _) = project(&mean, &sigma, 0.5, [0.0; 3], 0, &cam, &cfg).unwrap();
            let t = cam.to_camera(&mean);
            let h = 1e-6;
            let mut jac = Matrix2x3::zeros();
            for c in 0..3 {
                let mut tp = t;
                tp[c] += h;
                let mut tm = t;
                tm[c] -= h;
                let (a, b) = (pix(&tp), pix(&tm));
                jac[(0, c)] = (a[0] - b[0]) / (2.0 * h);
                jac[(1, c)] = (a[1] - b[1]) / (2.0 * h);
            }
            let w = cam.rotation();
            let cov = jac * w * sigma * w.transpose() * jac.transpose();
            let expect = [cov[(0, 0)] + 0.3, cov[(0, 1)], cov[(1, 1)] + 0.3];
            for i in 0..3 {
                assert!((s.cov2d[i] - expect[i]).abs() <= 1e-6 * expect[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn projection_backward_matches_differences() {
        let cam = camera();
        let cfg = RasterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..20 {
            let mean = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let sigma = build_covariance(
                random_unit_quat(&mut rng),
                std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
            );
            let dm: [f64; 2] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let dc: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let f = |mean: &Vector3<f64>, sigma: &Matrix3<f64>| {
                let (s, _) = project(mean, sigma, 0.5, [0.0; 3], 0, &cam, &cfg).unwrap();
                dm[0] * s.mean2d[0]
                    + dm[1] * s.mean2d[1]
                    + dc[0] * s.cov2d[0]
                    + dc[1] * s.cov2d[1]
                    + dc[2] * s.cov2d[2]
            };
            let (_, cache) = project(&mean, &sigma, 0.5, [0.0; 3], 0, &cam, &cfg).unwrap();
            let (dmean, dsigma) = project_backward(&cache, &sigma, &cam, dm, dc);
            for i in 0..3 {
                let mut p = mean;
                p[i] += h;
                let mut m = mean;
                m[i] -= h;
                let num = (f(&p, &sigma) - f(&m, &sigma)) / (2.0 * h);
                assert!(
                    (dmean[i] - num).abs() <= 1e-6 * num.abs().max(1.0),
                    "mean {i}: {} vs {num}",
                    dmean[i]
                );
            }
            // symmetric perturbations of Σ
            for (a, b) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
                let mut e = Matrix3::zeros();
                e[(a, b)] = h;
                e[(b, a)] = h;
                let num = (f(&mean, &(sigma + e)) - f(&mean, &(sigma - e))) / (2.0 * h);
                let an = if a == b {
                    dsigma[(a, a)]
                } else {
                    dsigma[(a, b)] + dsigma[(b, a)]
                };
                assert!(
                    (an - num).abs() <= 1e-6 * num.abs().max(1.0),
                    "sigma {a}{b}"
                );
            }
        }
    }
}
