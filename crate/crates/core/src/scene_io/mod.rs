//! Posed-image datasets: cameras, images and sparse points.

mod colmap;
mod transforms;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use colmap::{
    load_colmap_text, read_cameras_txt, read_images_txt, read_points3d_txt, write_colmap_text,
    ColmapCamera, ColmapImage, ColmapPoint,
};
pub use transforms::load_transforms_json;

/// Converts a Hamilton quaternion `(w, x, y, z)` into a rotation matrix.
/// The quaternion is normalized first.
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Pinhole camera with a rigid world-to-camera transform.
///
/// The camera looks down +z, x right, y down (OpenCV convention).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    /// Builds a camera from intrinsics and a world-to-camera rotation and
    /// translation, validating the result.
    pub fn from_pose(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera: w2c,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A camera at `eye` looking at `target`, with `up` roughly opposite the
    /// image y axis.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Validation(
                "look_at: up is parallel to the view direction".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::from_pose(
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::Validation(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite camera pose".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::Validation(format!(
                "camera rotation is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world space, `-Rᵀ t`.
    pub fn camera_position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point. Pixel centers sit at
    /// half-integer coordinates.
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }
}

/// JSON form of a camera used by `render --camera`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4 world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = c.world_to_camera[(r, col)];
            }
        }
        Self {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: m,
        }
    }
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| j.world_to_camera[r][c]);
        let cam = Camera {
            width: j.width,
            height: j.height,
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            world_to_camera: m,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl Camera {
    /// Parses a [`CameraJson`] document; `label` names the source in errors.
    pub fn from_json(text: &str, label: &str) -> Result<Self> {
        let j: CameraJson =
            serde_json::from_str(text).map_err(|e| Error::parse(label, e.line(), e.to_string()))?;
        Camera::try_from(j)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CameraJson::from(self))
            .expect("camera fields are plain numbers")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Optional per-point RGB in [0, 1].
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self {
            positions,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Validation(format!(
                "point {i} has non-finite coordinates"
            )));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.positions.len() {
                return Err(Error::Validation(
                    "point colors and positions differ in length".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitRule {
    /// Views whose index is a multiple of `n` go to the test split.
    EveryNth(usize),
    /// Exactly these view indices go to the test split.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub points: PointCloud,
    pub split: Vec<SplitTag>,
    /// True when the source format implies a white background.
    pub white_background: bool,
}

impl Scene {
    /// Assembles a scene with every view tagged as training data.
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>, points: PointCloud) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::Validation(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        for (i, (c, img)) in cameras.iter().zip(&images).enumerate() {
            if c.width != img.width || c.height != img.height {
                return Err(Error::Validation(format!(
                    "view {i}: image is {}x{} but camera is {}x{}",
                    img.width, img.height, c.width, c.height
                )));
            }
        }
        points.validate()?;
        let split = vec![SplitTag::Train; cameras.len()];
        Ok(Self {
            cameras,
            images,
            points,
            split,
            white_background: false,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_with(SplitTag::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_with(SplitTag::Test)
    }

    fn indices_with(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Tags every view as train or test according to `rule`.
pub fn split_train_test(mut scene: Scene, rule: &SplitRule) -> Result<Scene> {
    let n_views = scene.len();
    let split: Vec<SplitTag> = match rule {
        SplitRule::EveryNth(0) => {
            return Err(Error::Validation("every-nth split needs n >= 1".into()));
        }
        SplitRule::EveryNth(n) => (0..n_views)
            .map(|i| {
                if i % n == 0 {
                    SplitTag::Test
                } else {
                    SplitTag::Train
                }
            })
            .collect(),
        SplitRule::Explicit(test) => {
            if let Some(bad) = test.iter().find(|&&i| i >= n_views) {
                return Err(Error::Validation(format!(
                    "test index {bad} out of range for {n_views} views"
                )));
            }
            (0..n_views)
                .map(|i| {
                    if test.contains(&i) {
                        SplitTag::Test
                    } else {
                        SplitTag::Train
                    }
                })
                .collect()
        }
    };
    if !split.contains(&SplitTag::Train) {
        return Err(Error::Validation("split leaves no training views".into()));
    }
    scene.split = split;
    Ok(scene)
}
