//! CPU splatting renderer with an analytic backward pass.
//!
//! Gaussians are projected with the local affine approximation of the
//! perspective map, dilated by 0.3 px², globally depth-sorted and composited
//! front to back per pixel. Pixel centres sit at half-integer coordinates.
//! A pixel stops compositing once the next splat would push transmittance
//! below [`T_MIN`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{matvec, transpose, Mat3, Vec3};
use crate::reparam::{Gaussian3D, GaussianGrad};
use crate::scalar::{cst, to_f64, Real};

/// Screen-space dilation added to the projected covariance.
pub const LOW_PASS: f64 = 0.3;
/// Per-splat opacity clamp.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this opacity are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

/// Compositing stops before a splat would take transmittance below this.
pub const T_MIN: f64 = 1e-4;

/// Rows per work item; also the unit of the deterministic gradient reduction.
const ROW_BLOCK: usize = 8;

/// Pinhole camera. Extrinsics are world-to-camera in the OpenCV convention
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
    pub near: f64,
}

impl Camera {
    /// From an OpenGL camera-to-world matrix (−z forward, y up) as used by
    /// NeRF-style scene manifests.
    pub fn from_c2w_opengl(c2w: &[[f64; 4]; 4], fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        // Columns of the OpenCV camera frame in world coordinates.
        let mut r_cv = [[0.0; 3]; 3];
        for i in 0..3 {
            r_cv[i] = [c2w[i][0], -c2w[i][1], -c2w[i][2]];
        }
        let pos = [c2w[0][3], c2w[1][3], c2w[2][3]];
        let rot = transpose(&r_cv);
        let t = matvec(&rot, pos);
        Self { fx, fy, cx, cy, width, height, rotation: rot, translation: [-t[0], -t[1], -t[2]], near: 0.01 }
    }

    /// Inverse of [`Camera::from_c2w_opengl`].
    pub fn to_c2w_opengl(&self) -> [[f64; 4]; 4] {
        let r = transpose(&self.rotation);
        let c = self.center();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i] = [r[i][0], -r[i][1], -r[i][2], c[i]];
        }
        m[3][3] = 1.0;
        m
    }

    /// Camera looking from `eye` at `target`, horizontal field of view
    /// `fov_x` radians, principal point at the image centre.
    pub fn look_at(eye: Vec3<f64>, target: Vec3<f64>, up: Vec3<f64>, fov_x: f64, width: usize, height: usize) -> Self {
        use crate::linalg::{cross, norm, scale, sub};
        let f = sub(target, eye);
        let f = scale(f, 1.0 / norm(f));
        let mut r = cross(f, up);
        if norm(r) < 1e-9 {
            r = cross(f, [1.0, 0.0, 0.0]);
        }
        let r = scale(r, 1.0 / norm(r));
        let d = cross(f, r);
        let rot = [r, d, f];
        let t = matvec(&rot, eye);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation: rot,
            translation: [-t[0], -t[1], -t[2]],
            near: 0.01,
        }
    }

    pub fn center(&self) -> Vec3<f64> {
        let t = matvec(&transpose(&self.rotation), self.translation);
        [-t[0], -t[1], -t[2]]
    }

    pub fn center_as<T: Real>(&self) -> Vec3<T> {
        self.center().map(cst)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct Projected<T> {
    pub index: usize,
    pub mean2d: [T; 2],
    /// `(xx, xy, yy)` of the dilated covariance.
    pub cov2d: [T; 3],
    /// `(xx, xy, yy)` of its inverse.
    pub conic: [T; 3],
    pub depth: T,
    pub p_cam: Vec3<T>,
    pub color: [T; 3],
    pub opacity: T,
    /// Pixel bounding box `[x0, x1) × [y0, y1)` outside which the splat's
    /// opacity is below [`ALPHA_MIN`].
    pub bbox: [usize; 4],
    /// Exponents below this give opacity under [`ALPHA_MIN`].
    pub log_cut: T,
}

fn projection_jacobian<T: Real>(cam: &Camera, p: Vec3<T>) -> [[T; 3]; 2] {
    let (fx, fy) = (cst::<T>(cam.fx), cst::<T>(cam.fy));
    let z = p[2];
    let z2 = z * z;
    [[fx / z, T::zero(), -fx * p[0] / z2], [T::zero(), fy / z, -fy * p[1] / z2]]
}

/// Projection Jacobian (2×3) times the world-to-camera rotation.
fn jac_and_m<T: Real>(cam: &Camera, p: Vec3<T>) -> [[T; 3]; 2] {
    let j = projection_jacobian(cam, p);
    let w = cam.rotation.map(|r| r.map(cst::<T>));
    let mut m = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                m[r][c] += j[r][k] * w[k][c];
            }
        }
    }
    m
}

fn camera_point<T: Real>(cam: &Camera, p: Vec3<T>) -> Vec3<T> {
    let w = cam.rotation.map(|r| r.map(cst::<T>));
    let q = matvec(&w, p);
    [q[0] + cst(cam.translation[0]), q[1] + cst(cam.translation[1]), q[2] + cst(cam.translation[2])]
}

/// Why a Gaussian did not reach the compositing stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Culled {
    BehindNear,
    Singular,
    Offscreen,
}

/// Project one Gaussian. Returns the footprint or the reason it was culled.
pub fn project<T: Real>(g: &Gaussian3D<T>, index: usize, cam: &Camera) -> Result<Projected<T>, Culled> {
    let p = camera_point(cam, g.mean);
    if !(to_f64(p[2]) > cam.near) {
        return Err(Culled::BehindNear);
    }
    let m = jac_and_m(cam, p);
    // cov2d = M Σ Mᵀ + 0.3 I
    let mut ms = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                ms[r][c] += m[r][k] * g.cov[k][c];
            }
        }
    }
    let mut c2 = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                c2[r][c] += ms[r][k] * m[c][k];
            }
        }
    }
    let lp = cst::<T>(LOW_PASS);
    let cov2d = [c2[0][0] + lp, c2[0][1], c2[1][1] + lp];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > T::zero()) || !(cov2d[0] > T::zero()) {
        return Err(Culled::Singular);
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let mean2d = [
        cst::<T>(cam.fx) * p[0] / p[2] + cst(cam.cx),
        cst::<T>(cam.fy) * p[1] / p[2] + cst(cam.cy),
    ];
    let opacity = g.opacity.min(T::one());
    let o = to_f64(opacity);
    if !(o >= ALPHA_MIN) {
        return Err(Culled::Offscreen);
    }
    // o·exp(−q/2) ≥ 1/255  ⇔  q ≤ 2 ln(255 o); the ellipse dᵀK d ≤ r² spans
    // ±r√Σxx horizontally and ±r√Σyy vertically.
    let r2 = 2.0 * (o / ALPHA_MIN).ln();
    let ex = (r2 * to_f64(cov2d[0])).sqrt();
    let ey = (r2 * to_f64(cov2d[2])).sqrt();
    let (mx, my) = (to_f64(mean2d[0]), to_f64(mean2d[1]));
    // Pixel centre x + 0.5 must lie within [mx − ex, mx + ex]; one pixel of
    // slack absorbs rounding.
    let x0 = ((mx - ex - 0.5).floor() - 1.0).max(0.0);
    let x1 = (mx + ex - 0.5).floor() + 2.0;
    let y0 = ((my - ey - 0.5).floor() - 1.0).max(0.0);
    let y1 = (my + ey - 0.5).floor() + 2.0;
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(x1 > 0.0 && y1 > 0.0 && x0 < w && y0 < h) {
        return Err(Culled::Offscreen);
    }
    let bbox = [x0 as usize, x1.min(w) as usize, y0 as usize, y1.min(h) as usize];
    // Slightly loose so the exact test on o·exp(power) decides at the edge.
    let log_cut = cst((ALPHA_MIN / o).ln() - 1e-6);
    Ok(Projected { index, mean2d, cov2d, conic, depth: p[2], p_cam: p, color: g.color, opacity, bbox, log_cut })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width × 3`.
    pub rgb: Vec<T>,
    /// Row-major `height × width`.
    pub alpha: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub rendered: usize,
    pub behind_near: usize,
    pub singular: usize,
    pub offscreen: usize,
}

/// Projected and depth-sorted Gaussians for one view.
pub struct Prepared<T> {
    pub splats: Vec<Projected<T>>,
    pub stats: RenderStats,
}

pub fn prepare<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera) -> Prepared<T> {
    let results: Vec<Result<Projected<T>, Culled>> =
        gaussians.par_iter().enumerate().map(|(i, g)| project(g, i, cam)).collect();
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => splats.push(p),
            Err(Culled::BehindNear) => stats.behind_near += 1,
            Err(Culled::Singular) => stats.singular += 1,
            Err(Culled::Offscreen) => stats.offscreen += 1,
        }
    }
    // Stable sort: ties keep index order.
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal));
    stats.rendered = splats.len();
    Prepared { splats, stats }
}

#[inline]
fn splat_alpha<T: Real>(s: &Projected<T>, px: T, py: T) -> Option<(T, T, T, T)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -cst::<T>(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > T::zero() || power < s.log_cut {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    if raw < cst(ALPHA_MIN) {
        return None;
    }
    Some((raw.min(cst(ALPHA_MAX)), raw, g, power))
}

/// Per-row list of splats whose box covers the row, in depth order.
fn row_lists<T>(splats: &[Projected<T>], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (i, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.bbox[3]).skip(s.bbox[2]) {
            row.push(i as u32);
        }
    }
    rows
}

pub fn render<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera, background: [T; 3]) -> (RenderOutput<T>, RenderStats) {
    let prep = prepare(gaussians, cam);
    (render_prepared(&prep, cam, background), prep.stats)
}

pub fn render_prepared<T: Real>(prep: &Prepared<T>, cam: &Camera, background: [T; 3]) -> RenderOutput<T> {
    let (w, h) = (cam.width, cam.height);
    let rows = row_lists(&prep.splats, h);
    let mut rgb = vec![T::zero(); w * h * 3];
    let mut alpha = vec![T::zero(); w * h];
    rgb.par_chunks_mut(w * 3)
        .zip(alpha.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (rgb_row, a_row))| {
            let py = cst::<T>(y as f64 + 0.5);
            for x in 0..w {
                let px = cst::<T>(x as f64 + 0.5);
                let mut t = T::one();
                let mut c = [T::zero(); 3];
                for &i in &rows[y] {
                    let s = &prep.splats[i as usize];
                    if x < s.bbox[0] || x >= s.bbox[1] {
                        continue;
                    }
                    if let Some((a, ..)) = splat_alpha(s, px, py) {
                        let next = t * (T::one() - a);
                        if next < cst(T_MIN) {
                            break;
                        }
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * a * t;
                        }
                        t = next;
                    }
                }
                for ch in 0..3 {
                    rgb_row[3 * x + ch] = c[ch] + t * background[ch];
                }
                a_row[x] = T::one() - t;
            }
        });
    RenderOutput { width: w, height: h, rgb, alpha }
}

/// Result of [`render_backward`].
pub struct RenderGrad<T> {
    /// Per input Gaussian (zero for culled ones).
    pub gaussians: Vec<GaussianGrad<T>>,
    /// Per input Gaussian, `‖∂L/∂mean2d‖` in normalized device coordinates
    /// (zero for culled ones).
    pub screen_grad: Vec<f64>,
    /// Whether the Gaussian was composited in at least one pixel.
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad<T> {
    mean2d: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    opacity: T,
    hit: bool,
}

/// Backward of [`render`] given `∂L/∂rgb` and `∂L/∂alpha`.
pub fn render_backward<T: Real>(
    gaussians: &[Gaussian3D<T>],
    cam: &Camera,
    background: [T; 3],
    g_rgb: &[T],
    g_alpha: &[T],
) -> RenderGrad<T> {
    let prep = prepare(gaussians, cam);
    render_backward_prepared(&prep, gaussians, cam, background, g_rgb, g_alpha)
}

pub fn render_backward_prepared<T: Real>(
    prep: &Prepared<T>,
    gaussians: &[Gaussian3D<T>],
    cam: &Camera,
    background: [T; 3],
    g_rgb: &[T],
    g_alpha: &[T],
) -> RenderGrad<T> {
    let (w, h) = (cam.width, cam.height);
    assert_eq!(g_rgb.len(), w * h * 3);
    assert_eq!(g_alpha.len(), w * h);
    let rows = row_lists(&prep.splats, h);
    let ns = prep.splats.len();
    let n_blocks = h.div_ceil(ROW_BLOCK);
    let partials: Vec<Vec<ScreenGrad<T>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![ScreenGrad::<T>::default(); ns];
            let mut hits: Vec<(u32, T, T, T)> = Vec::new();
            for y in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h) {
                let py = cst::<T>(y as f64 + 0.5);
                for x in 0..w {
                    let pix = y * w + x;
                    let gc = [g_rgb[3 * pix], g_rgb[3 * pix + 1], g_rgb[3 * pix + 2]];
                    let ga = g_alpha[pix];
                    if gc.iter().all(|&v| v == T::zero()) && ga == T::zero() {
                        continue;
                    }
                    let px = cst::<T>(x as f64 + 0.5);
                    hits.clear();
                    let mut t = T::one();
                    for &i in &rows[y] {
                        let s = &prep.splats[i as usize];
                        if x < s.bbox[0] || x >= s.bbox[1] {
                            continue;
                        }
                        if let Some((a, raw, g, _)) = splat_alpha(s, px, py) {
                            let next = t * (T::one() - a);
                            if next < cst(T_MIN) {
                                break;
                            }
                            hits.push((i, a, raw, g));
                            t = next;
                        }
                    }
                    let t_final = t;
                    // Walk back to front. `after` = Σ_{j>i} c_j α_j T_j + T_final·bg.
                    let mut after = [t_final * background[0], t_final * background[1], t_final * background[2]];
                    let mut t_cur = t_final;
                    for &(i, a, raw, g) in hits.iter().rev() {
                        let s = &prep.splats[i as usize];
                        let one_m = T::one() - a;
                        let t_i = t_cur / one_m;
                        let sg = &mut acc[i as usize];
                        sg.hit = true;
                        let mut d_alpha = T::zero();
                        for ch in 0..3 {
                            sg.color[ch] += a * t_i * gc[ch];
                            d_alpha += gc[ch] * (s.color[ch] * t_i - after[ch] / one_m);
                        }
                        d_alpha += ga * t_final / one_m;
                        for ch in 0..3 {
                            after[ch] += s.color[ch] * a * t_i;
                        }
                        t_cur = t_i;
                        if raw >= cst(ALPHA_MAX) {
                            continue;
                        }
                        // α = o·exp(power)
                        sg.opacity += d_alpha * g;
                        let d_power = d_alpha * a;
                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        sg.mean2d[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                        sg.mean2d[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                        let half = cst::<T>(0.5);
                        sg.conic[0] -= d_power * half * dx * dx;
                        sg.conic[1] -= d_power * dx * dy;
                        sg.conic[2] -= d_power * half * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![ScreenGrad::<T>::default(); ns];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            for k in 0..2 {
                s.mean2d[k] += p.mean2d[k];
            }
            for k in 0..3 {
                s.conic[k] += p.conic[k];
                s.color[k] += p.color[k];
            }
            s.opacity += p.opacity;
            s.hit |= p.hit;
        }
    }

    let n_gaussians = gaussians.len();
    let mut out = RenderGrad {
        gaussians: vec![GaussianGrad::zero(); n_gaussians],
        screen_grad: vec![0.0; n_gaussians],
        visible: vec![false; n_gaussians],
    };
    let (half_w, half_h) = (0.5 * w as f64, 0.5 * h as f64);
    for (s, sg) in prep.splats.iter().zip(&screen) {
        if !sg.hit {
            continue;
        }
        let gm = to_3d(s, sg, cam, &gaussians[s.index]);
        out.gaussians[s.index] = gm;
        let (gx, gy) = (to_f64(sg.mean2d[0]) * half_w, to_f64(sg.mean2d[1]) * half_h);
        out.screen_grad[s.index] = (gx * gx + gy * gy).sqrt();
        out.visible[s.index] = true;
    }
    out
}

/// Chain screen-space gradients of one splat back to its 3D Gaussian.
fn to_3d<T: Real>(s: &Projected<T>, sg: &ScreenGrad<T>, cam: &Camera, g: &Gaussian3D<T>) -> GaussianGrad<T> {
    let p = s.p_cam;
    let (fx, fy) = (cst::<T>(cam.fx), cst::<T>(cam.fy));
    let z = p[2];
    let z2 = z * z;
    let z3 = z2 * z;

    // Conic K = C⁻¹ (symmetric, off-diagonal shared): ∂L/∂C = −K Gk K with
    // Gk the matrix form of the conic gradient.
    let k = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
    let half = cst::<T>(0.5);
    let gk = [[sg.conic[0], half * sg.conic[1]], [half * sg.conic[1], sg.conic[2]]];
    let mut kg = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for m in 0..2 {
                kg[r][c] += k[r][m] * gk[m][c];
            }
        }
    }
    let mut g2 = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for m in 0..2 {
                g2[r][c] -= kg[r][m] * k[m][c];
            }
        }
    }

    // cov2d = M Σ Mᵀ with M = J W.
    let m = jac_and_m(cam, p);
    let mut g_cov = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for a in 0..2 {
                for b in 0..2 {
                    acc += g2[a][b] * m[a][i] * m[b][j];
                }
            }
            g_cov[i][j] = acc;
        }
    }
    let sigma = &g.cov;
    let mut g_m = [[T::zero(); 3]; 2];
    for a in 0..2 {
        // (G2 M Σᵀ + G2ᵀ M Σ)[a]
        for c in 0..3 {
            let mut acc = T::zero();
            for b in 0..2 {
                for k in 0..3 {
                    acc += g2[a][b] * m[b][k] * sigma[c][k] + g2[b][a] * m[b][k] * sigma[k][c];
                }
            }
            g_m[a][c] = acc;
        }
    }
    let wr = cam.rotation.map(|r| r.map(cst::<T>));
    let mut g_j = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                g_j[a][c] += g_m[a][k] * wr[c][k];
            }
        }
    }
    let two = cst::<T>(2.0);
    let mut gp = [T::zero(); 3];
    gp[2] += g_j[0][0] * (-fx / z2) + g_j[0][2] * (two * fx * p[0] / z3) + g_j[1][1] * (-fy / z2) + g_j[1][2] * (two * fy * p[1] / z3);
    gp[0] += g_j[0][2] * (-fx / z2);
    gp[1] += g_j[1][2] * (-fy / z2);
    // mean2d = (fx·x/z + cx, fy·y/z + cy)
    gp[0] += sg.mean2d[0] * fx / z;
    gp[1] += sg.mean2d[1] * fy / z;
    gp[2] -= sg.mean2d[0] * fx * p[0] / z2 + sg.mean2d[1] * fy * p[1] / z2;
    let g_mean = crate::linalg::matvec_t(&wr, gp);
    GaussianGrad { mean: g_mean, cov: g_cov, color: sg.color, opacity: sg.opacity }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(size: usize) -> Camera {
        Camera::look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.8, size, size)
    }

    fn iso(mean: Vec3<f64>, var: f64, color: [f64; 3], opacity: f64) -> Gaussian3D<f64> {
        Gaussian3D { mean, cov: [[var, 0.0, 0.0], [0.0, var, 0.0], [0.0, 0.0, var]], color, opacity }
    }

    #[test]
    fn opengl_round_trip_and_center() {
        let cam = Camera::look_at([1.0, 2.0, 3.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0], 0.7, 32, 24);
        let back = Camera::from_c2w_opengl(&cam.to_c2w_opengl(), cam.fx, cam.fy, cam.cx, cam.cy, 32, 24);
        for i in 0..3 {
            assert!((back.translation[i] - cam.translation[i]).abs() < 1e-12);
            assert!((cam.center()[i] - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((back.rotation[i][j] - cam.rotation[i][j]).abs() < 1e-12);
            }
        }
        // The target projects to the principal point.
        let p: Vec3<f64> = camera_point(&cam, [0.0, 0.5, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
    }

    #[test]
    fn on_axis_projection() {
        let cam = axis_camera(64);
        let sigma = 0.1;
        let g = iso([0.0, 0.0, 0.0], sigma * sigma, [1.0; 3], 0.9);
        let p = project(&g, 0, &cam).unwrap();
        let z = 4.0;
        let oracle = (cam.fx * sigma / z).powi(2) + LOW_PASS;
        assert!((p.cov2d[0] - oracle).abs() < 1e-12 && (p.cov2d[2] - oracle).abs() < 1e-12 && p.cov2d[1].abs() < 1e-12);
        assert!((p.mean2d[0] - cam.cx).abs() < 1e-12 && (p.mean2d[1] - cam.cy).abs() < 1e-12);
        // Twice as far: half the standard deviation before the floor.
        let far = Camera::look_at([0.0, 0.0, -8.0], [0.0; 3], [0.0, 1.0, 0.0], 0.8, 64, 64);
        let q = project(&g, 0, &far).unwrap();
        let s1 = (p.cov2d[0] - LOW_PASS).sqrt();
        let s2 = (q.cov2d[0] - LOW_PASS).sqrt();
        assert!((s1 / s2 - 2.0).abs() < 1e-12);
        let behind = iso([0.0, 0.0, -5.0], 0.01, [1.0; 3], 0.9);
        assert_eq!(project(&behind, 0, &cam).unwrap_err(), Culled::BehindNear);
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = axis_camera(8);
        let (out, _) = render::<f64>(&[], &cam, [0.2, 0.3, 0.4]);
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        for px in out.rgb.chunks(3) {
            assert_eq!(px, &[0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn single_splat_alpha_closed_form() {
        let cam = axis_camera(16);
        let g = iso([0.0; 3], 0.02, [1.0, 0.5, 0.25], 0.98);
        let (out, _) = render(&[g], &cam, [0.0; 3]);
        let p = project(&g, 0, &cam).unwrap();
        let c = p.cov2d[0];
        for y in 0..16 {
            for x in 0..16 {
                let dx = x as f64 + 0.5 - p.mean2d[0];
                let dy = y as f64 + 0.5 - p.mean2d[1];
                let a = 0.98 * (-0.5 * (dx * dx + dy * dy) / c).exp();
                let a = if a < ALPHA_MIN { 0.0 } else { a.min(ALPHA_MAX) };
                assert!((out.alpha[y * 16 + x] - a).abs() < 1e-12);
            }
        }
        // Maximal around the principal point (8, 8), decreasing outward.
        let row: Vec<f64> = (8..16).map(|x| out.alpha[8 * 16 + x]).collect();
        assert!(row.windows(2).all(|w| w[0] >= w[1]));
        assert!(out.alpha[8 * 16 + 8] >= out.alpha.iter().cloned().fold(0.0, f64::max) - 1e-15);
    }

    #[test]
    fn input_order_does_not_matter() {
        let cam = axis_camera(16);
        let a = iso([0.1, 0.0, 0.5], 0.05, [1.0, 0.0, 0.0], 0.7);
        let b = iso([-0.1, 0.05, -0.5], 0.04, [0.0, 1.0, 0.0], 0.6);
        let (x, _) = render(&[a, b], &cam, [0.0; 3]);
        let (y, _) = render(&[b, a], &cam, [0.0; 3]);
        assert_eq!(x, y);
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let cam = axis_camera(16);
        let a = iso([0.1, 0.0, 0.5], 0.05, [1.0, 0.0, 0.0], 0.7);
        let g = render_backward(&[a], &cam, [0.0; 3], &vec![0.0; 16 * 16 * 3], &vec![0.0; 256]);
        assert_eq!(g.gaussians[0], GaussianGrad::zero());
        assert_eq!(g.screen_grad[0], 0.0);
    }

    #[test]
    fn occluded_colour_gradient_is_transmittance_scaled() {
        let cam = axis_camera(16);
        // Huge opaque blocker in front, small splat behind it.
        let blocker = iso([0.0, 0.0, -1.0], 100.0, [0.0; 3], 0.9999);
        let hidden = iso([0.0, 0.0, 0.5], 0.01, [0.3; 3], 0.9);
        let visible = iso([0.0, 0.0, 0.5], 0.01, [0.3; 3], 0.9);
        let ones = vec![1.0; 16 * 16 * 3];
        let zero = vec![0.0; 256];
        let g1 = render_backward(&[blocker, hidden], &cam, [0.0; 3], &ones, &zero);
        let g0 = render_backward(&[visible], &cam, [0.0; 3], &ones, &zero);
        for ch in 0..3 {
            let ratio = g1.gaussians[1].color[ch] / g0.gaussians[0].color[ch];
            assert!((ratio - (1.0 - ALPHA_MAX)).abs() < 1e-5, "{ratio}");
        }
    }

    fn loss_weights(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let rgb = (0..n * 3).map(|_| next()).collect();
        let a = (0..n).map(|_| next()).collect();
        (rgb, a)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.9, 16, 16);
        let gs = vec![
            Gaussian3D { mean: [0.1, 0.05, 0.2], cov: [[0.04, 0.01, 0.0], [0.01, 0.03, 0.005], [0.0, 0.005, 0.05]], color: [0.9, 0.2, 0.4], opacity: 0.8 },
            Gaussian3D { mean: [-0.15, -0.1, -0.1], cov: [[0.03, -0.008, 0.002], [-0.008, 0.05, 0.0], [0.002, 0.0, 0.02]], color: [0.1, 0.7, 0.5], opacity: 0.6 },
        ];
        let bg = [0.1, 0.2, 0.3];
        let (wr, wa) = loss_weights(256, 9);
        let loss = |gs: &[Gaussian3D<f64>]| {
            let (o, _) = render(gs, &cam, bg);
            o.rgb.iter().zip(&wr).map(|(a, b)| a * b).sum::<f64>() + o.alpha.iter().zip(&wa).map(|(a, b)| a * b).sum::<f64>()
        };
        let an = render_backward(&gs, &cam, bg, &wr, &wa);
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut Gaussian3D<f64>, f64), k: usize| {
            let mut p = gs.clone();
            f(&mut p[k], h);
            let mut m = gs.clone();
            f(&mut m[k], -h);
            (loss(&p) - loss(&m)) / (2.0 * h)
        };
        let ok = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3);
        for k in 0..2 {
            let g = &an.gaussians[k];
            for d in 0..3 {
                let v = fd(&|x, e| x.mean[d] += e, k);
                assert!(ok(v, g.mean[d]), "mean {k} {d}: {v} vs {}", g.mean[d]);
                let v = fd(&|x, e| x.color[d] += e, k);
                assert!(ok(v, g.color[d]), "color {k} {d}: {v} vs {}", g.color[d]);
                for j in d..3 {
                    // Symmetric perturbation of the pair (d, j), (j, d).
                    let v = fd(
                        &|x, e| {
                            x.cov[d][j] += e;
                            if j != d {
                                x.cov[j][d] += e;
                            }
                        },
                        k,
                    );
                    let a = if j == d { g.cov[d][d] } else { g.cov[d][j] + g.cov[j][d] };
                    assert!(ok(v, a), "cov {k} {d}{j}: {v} vs {a}");
                }
            }
            let v = fd(&|x, e| x.opacity += e, k);
            assert!(ok(v, g.opacity), "opacity {k}: {v} vs {}", g.opacity);
            assert!(an.screen_grad[k] > 0.0);
        }
    }
}
