//! COLMAP text-format reader and writer (cameras.txt, images.txt,
//! points3D.txt). Binary models are not supported.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};

use super::{quat_to_rotation, Camera, PointCloud, Scene};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// Pinhole intrinsics `(fx, fy, cx, cy)`.
    pub fn intrinsics(&self) -> Result<[f64; 4]> {
        match (self.model.as_str(), self.params.as_slice()) {
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => Ok([f, f, cx, cy]),
            ("PINHOLE", &[fx, fy, cx, cy]) => Ok([fx, fy, cx, cy]),
            ("SIMPLE_PINHOLE" | "PINHOLE", p) => Err(Error::Validation(format!(
                "camera {}: {} expects {} parameters, got {}",
                self.id,
                self.model,
                if self.model == "PINHOLE" { 4 } else { 3 },
                p.len()
            ))),
            (other, _) => Err(Error::UnsupportedCameraModel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation as `(qw, qx, qy, qz)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)` observations.
    pub track: Vec<(u32, u32)>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn is_comment(line: &str) -> bool {
    line.trim_start().starts_with('#')
}

struct Fields<'a> {
    file: &'a str,
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(file: &'a str, line: usize, text: &'a str) -> Self {
        Self {
            file,
            line,
            it: text.split_whitespace(),
        }
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| Error::parse(self.file, self.line, format!("missing {what}")))?;
        tok.parse::<T>()
            .map_err(|_| Error::parse(self.file, self.line, format!("invalid {what} `{tok}`")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.it.by_ref().collect()
    }
}

pub fn read_cameras_txt(path: impl AsRef<Path>) -> Result<Vec<ColmapCamera>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let label = file_label(path);
    let mut cameras = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if is_comment(line) || line.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(&label, i + 1, line);
        let id = f.next("camera id")?;
        let model: String = f.next("camera model")?;
        let width = f.next("width")?;
        let height = f.next("height")?;
        let params = f
            .rest()
            .into_iter()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::parse(&label, i + 1, format!("invalid camera parameter `{t}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cam = ColmapCamera {
            id,
            model,
            width,
            height,
            params,
        };
        // reject unsupported models at parse time so the error names the model
        cam.intrinsics().map_err(|e| match e {
            Error::Validation(msg) => Error::parse(&label, i + 1, msg),
            other => other,
        })?;
        cameras.push(cam);
    }
    Ok(cameras)
}

pub fn read_images_txt(path: impl AsRef<Path>) -> Result<Vec<ColmapImage>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let label = file_label(path);
    let mut images = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !is_comment(l));
    while let Some((i, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(&label, i + 1, line);
        let id = f.next("image id")?;
        let qvec = [f.next("qw")?, f.next("qx")?, f.next("qy")?, f.next("qz")?];
        let tvec = [f.next("tx")?, f.next("ty")?, f.next("tz")?];
        let camera_id = f.next("camera id")?;
        let name: String = f.next("image name")?;
        if qvec.iter().map(|v: &f64| v * v).sum::<f64>() < 1e-24 {
            return Err(Error::parse(&label, i + 1, "zero quaternion"));
        }
        images.push(ColmapImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
        });
        // the following line lists 2D observations and may be empty
        if let Some((j, obs)) = lines.next() {
            let n = obs.split_whitespace().count();
            if n % 3 != 0 {
                return Err(Error::parse(
                    &label,
                    j + 1,
                    "POINTS2D entries must come in triples",
                ));
            }
        }
    }
    Ok(images)
}

pub fn read_points3d_txt(path: impl AsRef<Path>) -> Result<Vec<ColmapPoint>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let label = file_label(path);
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if is_comment(line) || line.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(&label, i + 1, line);
        let id = f.next("point id")?;
        let xyz = [f.next("x")?, f.next("y")?, f.next("z")?];
        let rgb = [f.next("r")?, f.next("g")?, f.next("b")?];
        let error = f.next("error")?;
        let rest = f.rest();
        if !rest.len().is_multiple_of(2) {
            return Err(Error::parse(
                &label,
                i + 1,
                "track entries must come in pairs",
            ));
        }
        let track = rest
            .chunks(2)
            .map(|p| match (p[0].parse(), p[1].parse()) {
                (Ok(a), Ok(b)) => Ok((a, b)),
                _ => Err(Error::parse(&label, i + 1, "invalid track entry")),
            })
            .collect::<Result<Vec<_>>>()?;
        let xyz: [f64; 3] = xyz;
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(&label, i + 1, "non-finite point coordinates"));
        }
        points.push(ColmapPoint {
            id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    Ok(points)
}

/// Loads a COLMAP text reconstruction plus its `images/` folder. Views are
/// ordered by image name and all tagged as training data.
pub fn load_colmap_text(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let cameras = read_cameras_txt(dir.join("cameras.txt"))?;
    let mut records = read_images_txt(dir.join("images.txt"))?;
    let points = read_points3d_txt(dir.join("points3D.txt"))?;
    records.sort_by(|a, b| a.name.cmp(&b.name));

    let mut cams = Vec::with_capacity(records.len());
    let mut images = Vec::with_capacity(records.len());
    for rec in &records {
        let intr = cameras
            .iter()
            .find(|c| c.id == rec.camera_id)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "image {} references unknown camera {}",
                    rec.name, rec.camera_id
                ))
            })?;
        let [fx, fy, cx, cy] = intr.intrinsics()?;
        let r = quat_to_rotation(rec.qvec);
        let t = Vector3::from(rec.tvec);
        cams.push(Camera::from_pose(
            intr.width,
            intr.height,
            fx,
            fy,
            cx,
            cy,
            r,
            t,
        )?);
        images.push(Image::read_png(dir.join("images").join(&rec.name))?);
    }

    let cloud = PointCloud {
        positions: points.iter().map(|p| Vector3::from(p.xyz)).collect(),
        colors: Some(
            points
                .iter()
                .map(|p| p.rgb.map(|c| c as f64 / 255.0))
                .collect(),
        ),
    };
    Scene::new(cams, images, cloud)
}

/// Writes `scene` as a COLMAP text reconstruction with one PINHOLE camera per
/// view and PNG images named `view_XXXX.png`. Points are written without tracks.
pub fn write_colmap_text(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (i, (cam, img)) in scene.cameras.iter().zip(&scene.images).enumerate() {
        let id = i + 1;
        let name = format!("view_{i:04}.png");
        writeln!(
            cams,
            "{id} PINHOLE {} {} {:?} {:?} {:?} {:?}",
            cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy
        )
        .unwrap();
        let q =
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(cam.rotation()));
        let t = cam.translation();
        writeln!(
            imgs,
            "{id} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {id} {name}\n",
            q.w, q.i, q.j, q.k, t.x, t.y, t.z
        )
        .unwrap();
        img.write_png(img_dir.join(&name))?;
    }

    let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for (i, p) in scene.points.positions.iter().enumerate() {
        let rgb = scene
            .points
            .colors
            .as_ref()
            .map(|c| c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .unwrap_or([128, 128, 128]);
        writeln!(
            pts,
            "{} {:?} {:?} {:?} {} {} {} 0",
            i + 1,
            p.x,
            p.y,
            p.z,
            rgb[0],
            rgb[1],
            rgb[2]
        )
        .unwrap();
    }

    for (name, body) in [
        ("cameras.txt", cams),
        ("images.txt", imgs),
        ("points3D.txt", pts),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
