//! Blender-style `transforms.json` datasets.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::Deserialize;

use super::{Camera, PointCloud, Scene};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Converts an OpenGL-convention camera-to-world matrix (camera looks down
/// -z, y up) into a world-to-camera matrix in the OpenCV convention used by
/// [`Camera`].
pub(crate) fn blender_c2w_to_w2c(c2w: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let rot = c2w.fixed_view::<3, 3>(0, 0).into_owned();
    if rot.determinant().abs() < 1e-9 || c2w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "camera-to-world matrix is not invertible".into(),
        ));
    }
    // flip the camera y and z axes
    let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
    (c2w * flip)
        .try_inverse()
        .ok_or_else(|| Error::Validation("camera-to-world matrix is not invertible".into()))
}

/// Loads a Blender-style dataset. Images are resolved relative to the JSON
/// file, with `.png` appended when `file_path` has no extension. The point
/// cloud is empty and the scene is flagged for a white background.
pub fn load_transforms_json(file: impl AsRef<Path>) -> Result<Scene> {
    let file = file.as_ref();
    let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let label = file
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parsed: TransformsFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(label, e.line(), e.to_string()))?;
    let base = file.parent().unwrap_or(Path::new("."));

    let mut cameras = Vec::with_capacity(parsed.frames.len());
    let mut images = Vec::with_capacity(parsed.frames.len());
    for frame in &parsed.frames {
        let mut rel = frame.file_path.trim_start_matches("./").to_string();
        if Path::new(&rel).extension().is_none() {
            rel.push_str(".png");
        }
        let img = Image::read_png(base.join(&rel))?;
        let c2w = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
        let w2c = blender_c2w_to_w2c(&c2w)?;
        let focal = 0.5 * img.width as f64 / (0.5 * parsed.camera_angle_x).tan();
        let rotation: Matrix3<f64> = w2c.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vector3<f64> = w2c.fixed_view::<3, 1>(0, 3).into_owned();
        cameras.push(Camera::from_pose(
            img.width,
            img.height,
            focal,
            focal,
            img.width as f64 / 2.0,
            img.height as f64 / 2.0,
            rotation,
            translation,
        )?);
        images.push(img);
    }
    let mut scene = Scene::new(cameras, images, PointCloud::default())?;
    scene.white_background = true;
    Ok(scene)
}
