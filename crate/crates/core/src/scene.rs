//! Posed multi-view image sets and their JSON manifests.
//!
//! The manifest follows the NeRF-synthetic layout:
//!
//! ```json
//! { "camera_angle_x": 0.69,
//!   "background": [1, 1, 1],
//!   "frames": [ { "file_path": "train/r_0.png",
//!                 "transform_matrix": [[...], [...], [...], [0, 0, 0, 1]] } ] }
//! ```
//!
//! `transform_matrix` is camera-to-world, row-major, OpenGL axes. Frames may
//! override intrinsics with `fl_x`, `fl_y`, `cx`, `cy`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, save_rgba_png};
use crate::linalg::{det, matvec, transpose, Mat3, Vec3};
use crate::scalar::{cst, Real};
use crate::splat::Camera;
use crate::tetmesh::Aabb;

/// Tolerance for the rigidity check on manifest transforms.
pub const RIGID_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
    #[serde(default)]
    pub background: Option<[f64; 3]>,
    pub frames: Vec<FrameEntry>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Camera of frame `i` for an image of the given size.
    pub fn camera(&self, i: usize, width: usize, height: usize) -> Result<Camera> {
        let f = &self.frames[i];
        check_rigid(&f.transform_matrix).map_err(|m| Error::Format(format!("frame {i} ({}): {m}", f.file_path)))?;
        let fx = match (f.fl_x, self.camera_angle_x) {
            (Some(v), _) => v,
            (None, Some(a)) => 0.5 * width as f64 / (0.5 * a).tan(),
            (None, None) => return Err(Error::Format(format!("frame {i}: no focal length or camera_angle_x"))),
        };
        let fy = f.fl_y.unwrap_or(fx);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Format(format!("frame {i}: focal length must be positive")));
        }
        let cx = f.cx.unwrap_or(0.5 * width as f64);
        let cy = f.cy.unwrap_or(0.5 * height as f64);
        Ok(Camera::from_c2w_opengl(&f.transform_matrix, fx, fy, cx, cy, width, height))
    }
}

/// Rotation block orthonormal with det +1, within
/// [`RIGID_TOL`].
pub fn check_rigid(m: &[[f64; 4]; 4]) -> std::result::Result<(), String> {
    let r: Mat3<f64> = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite transform".into());
    }
    let rtr = crate::linalg::matmul(&transpose(&r), &r);
    for i in 0..3 {
        for j in 0..3 {
            let e = if i == j { 1.0 } else { 0.0 };
            if (rtr[i][j] - e).abs() > RIGID_TOL {
                return Err("rotation is not orthonormal".into());
            }
        }
    }
    if (det(&r) - 1.0).abs() > RIGID_TOL {
        return Err("rotation determinant is not +1".into());
    }
    if (m[3][0].abs() + m[3][1].abs() + m[3][2].abs() + (m[3][3] - 1.0).abs()) > RIGID_TOL {
        return Err("last row is not (0, 0, 0, 1)".into());
    }
    Ok(())
}

/// One posed image. `rgb` is already composited over the scene background.
#[derive(Clone, Debug)]
pub struct View<T> {
    pub name: String,
    pub camera: Camera,
    pub rgb: Vec<T>,
    pub mask: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset<T> {
    pub views: Vec<View<T>>,
    pub background: [f64; 3],
}

/// World-space direction of the ray through pixel coordinates `(u, v)`.
pub fn ray_direction(cam: &Camera, u: f64, v: f64) -> Vec3<f64> {
    let d = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    matvec(&transpose(&cam.rotation), d)
}

fn ray_hits_box(o: Vec3<f64>, d: Vec3<f64>, b: &Aabb) -> bool {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return false;
            }
            continue;
        }
        let (mut lo, mut hi) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    t0 <= t1
}

/// Mask that is 1 where the pixel's ray meets `b` and 0 elsewhere.
pub fn box_mask<T: Real>(cam: &Camera, b: &Aabb) -> Vec<T> {
    let o = cam.center();
    let mut m = Vec::with_capacity(cam.n_pixels());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = ray_direction(cam, x as f64 + 0.5, y as f64 + 0.5);
            m.push(if ray_hits_box(o, d, b) { T::one() } else { T::zero() });
        }
    }
    m
}

fn resolve_frame_path(root: &Path, file: &str) -> PathBuf {
    let p = root.join(file);
    if p.extension().is_none() && !p.exists() {
        return p.with_extension("png");
    }
    p
}

impl<T: Real> SceneDataset<T> {
    /// Load a manifest and its images. Missing alpha channels fall back to
    /// `mask_box` (1 where the pixel ray meets the box) or to all ones.
    pub fn load(manifest: &Path, mask_box: Option<&Aabb>, background: Option<[f64; 3]>) -> Result<Self> {
        let m = SceneManifest::load(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let bg = background.or(m.background).unwrap_or([0.0; 3]);
        let mut views = Vec::with_capacity(m.frames.len());
        let mut size = None;
        for (i, f) in m.frames.iter().enumerate() {
            let img = load_image(&resolve_frame_path(root, &f.file_path))?;
            match size {
                None => size = Some((img.width, img.height)),
                Some(s) if s != (img.width, img.height) => {
                    return Err(Error::SizeMismatch(format!("frame {i} is {}x{}, expected {}x{}", img.width, img.height, s.0, s.1)))
                }
                _ => {}
            }
            let camera = m.camera(i, img.width, img.height)?;
            let (rgb, mask) = match &img.alpha {
                Some(a) => {
                    let mut rgb = img.rgb.clone();
                    for (p, &al) in a.iter().enumerate() {
                        for c in 0..3 {
                            rgb[3 * p + c] = rgb[3 * p + c] * al + bg[c] * (1.0 - al);
                        }
                    }
                    (rgb.into_iter().map(cst).collect(), a.iter().map(|&v| cst(v)).collect())
                }
                None => {
                    let mask = match mask_box {
                        Some(b) => box_mask(&camera, b),
                        None => vec![T::one(); img.width * img.height],
                    };
                    (img.rgb.into_iter().map(cst).collect(), mask)
                }
            };
            views.push(View { name: f.file_path.clone(), camera, rgb, mask });
        }
        if views.is_empty() {
            return Err(Error::Format("scene manifest has no frames".into()));
        }
        Ok(Self { views, background: bg })
    }

    /// Write RGBA PNGs (alpha = mask) and a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::with_capacity(self.views.len());
        for (i, v) in self.views.iter().enumerate() {
            let name = format!("r_{i}.png");
            // Un-composite so that loading restores the stored colours.
            let mut rgb = v.rgb.clone();
            for p in 0..v.mask.len() {
                let a = crate::scalar::to_f64(v.mask[p]);
                for c in 0..3 {
                    if a > 0.0 {
                        let x = crate::scalar::to_f64(rgb[3 * p + c]);
                        rgb[3 * p + c] = cst(((x - self.background[c] * (1.0 - a)) / a).clamp(0.0, 1.0));
                    }
                }
            }
            save_rgba_png(&dir.join(&name), v.camera.width, v.camera.height, &rgb, &v.mask)?;
            let c = &v.camera;
            frames.push(FrameEntry {
                file_path: name,
                transform_matrix: c.to_c2w_opengl(),
                fl_x: Some(c.fx),
                fl_y: Some(c.fy),
                cx: Some(c.cx),
                cy: Some(c.cy),
            });
        }
        SceneManifest { camera_angle_x: None, background: Some(self.background), frames }.save(&dir.join("transforms.json"))
    }

    pub fn width(&self) -> usize {
        self.views[0].camera.width
    }

    pub fn height(&self) -> usize {
        self.views[0].camera.height
    }
}

/// `n` cameras spread evenly (Fibonacci spiral) over the sphere of
/// `radius` around `center`, excluding polar caps, all looking at `center`.
/// `phase` rotates the spiral so that different phases give disjoint
/// view sets.
pub fn orbit_cameras(n: usize, center: Vec3<f64>, radius: f64, fov_x: f64, width: usize, height: usize, phase: f64) -> Vec<Camera> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 0.85 * (1.0 - (2.0 * i as f64 + 1.0) / n as f64);
            let phi = i as f64 * golden + phase;
            let r = (1.0 - z * z).sqrt();
            let eye = [center[0] + radius * r * phi.cos(), center[1] + radius * r * phi.sin(), center[2] + radius * z];
            Camera::look_at(eye, center, [0.0, 0.0, 1.0], fov_x, width, height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_check() {
        let mut m = [[1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 2.0], [0.0, 0.0, 0.0, 1.0]];
        assert!(check_rigid(&m).is_ok());
        m[0][0] = 1.1;
        assert!(check_rigid(&m).is_err());
        let mirror = [[-1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!(check_rigid(&mirror).is_err());
    }

    #[test]
    fn box_mask_covers_the_centre() {
        let cam = Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0], 0.6, 20, 20);
        let m: Vec<f64> = box_mask(&cam, &Aabb::new([-0.3; 3], [0.3; 3]));
        assert_eq!(m[10 * 20 + 10], 1.0);
        assert_eq!(m[0], 0.0);
        // The ray through the principal point is the viewing direction.
        let d = ray_direction(&cam, cam.cx, cam.cy);
        assert!((d[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orbit_cameras_look_at_centre() {
        for cam in orbit_cameras(5, [0.5; 3], 3.0, 0.7, 16, 16, 1.0) {
            let c = cam.center();
            let r = ((c[0] - 0.5).powi(2) + (c[1] - 0.5).powi(2) + (c[2] - 0.5).powi(2)).sqrt();
            assert!((r - 3.0).abs() < 1e-12);
        }
    }
}
