//! Tetrahedron → 3D Gaussian reparameterization.
//!
//! For a tet with vertices `vᵢ`, activated corner weights `wᵢ` and unit
//! quaternion `q`:
//!
//! ```text
//! μ  = Σ wᵢ vᵢ / Σ wᵢ
//! Σ' = Σ wᵢ (vᵢ − μ)(vᵢ − μ)ᵀ        (not normalized by Σ wᵢ)
//! Σ  = R(q) Σ' R(q)ᵀ
//! c  = clamp(Σ wᵢ SHᵢ(dᵢ) / Σ wᵢ + ½, 0, 1),   dᵢ = vᵢ − camera centre
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::hierarchy::{barycentric, SubdivisionForest};
use crate::linalg::{
    dot, frobenius, mat_to_quat, matmul, quat_normalize, quat_normalize_backward, quat_to_mat, quat_to_mat_backward,
    sub, sym_eigen, transpose, Mat3, Quat, Vec3,
};
use crate::scalar::{cst, Real};
use crate::sh;

/// Added to `ReLU(raw)` so weight sums never vanish.
pub const W_FLOOR: f64 = 1e-6;

#[inline]
pub fn activate_weight<T: Real>(raw: T) -> T {
    raw.max(T::zero()) + cst(W_FLOOR)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn inverse_sigmoid<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D<T> {
    pub mean: Vec3<T>,
    pub cov: Mat3<T>,
    pub color: [T; 3],
    pub opacity: T,
}

/// Gradient of a scalar loss with respect to a [`Gaussian3D`]'s fields. The
/// covariance gradient treats all nine entries as independent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad<T> {
    pub mean: Vec3<T>,
    pub cov: Mat3<T>,
    pub color: [T; 3],
    pub opacity: T,
}

impl<T: Real> GaussianGrad<T> {
    pub fn zero() -> Self {
        Self { mean: [T::zero(); 3], cov: [[T::zero(); 3]; 3], color: [T::zero(); 3], opacity: T::zero() }
    }
}

/// Mean and covariance of a tet with activated weights `w` and unit
/// quaternion `q`.
pub fn gaussian_geometry<T: Real>(p: &[Vec3<T>; 4], w: &[T; 4], q: Quat<T>) -> Result<(Vec3<T>, Mat3<T>)> {
    let ws = w[0] + w[1] + w[2] + w[3];
    if !(ws > T::zero()) {
        return Err(Error::DegenerateWeights(crate::scalar::to_f64(ws)));
    }
    let mean = weighted_mean(p, w, ws);
    let sp = local_covariance(p, w, mean);
    let r = quat_to_mat(q);
    Ok((mean, matmul(&matmul(&r, &sp), &transpose(&r))))
}

fn weighted_mean<T: Real>(p: &[Vec3<T>; 4], w: &[T; 4], ws: T) -> Vec3<T> {
    let mut m = [T::zero(); 3];
    for i in 0..4 {
        for d in 0..3 {
            m[d] += w[i] * p[i][d];
        }
    }
    [m[0] / ws, m[1] / ws, m[2] / ws]
}

fn local_covariance<T: Real>(p: &[Vec3<T>; 4], w: &[T; 4], mean: Vec3<T>) -> Mat3<T> {
    let mut s = [[T::zero(); 3]; 3];
    for i in 0..4 {
        let e = sub(p[i], mean);
        for a in 0..3 {
            for b in 0..3 {
                s[a][b] += w[i] * e[a] * e[b];
            }
        }
    }
    s
}

/// View-dependent colour: weight-averaged per-vertex SH colours, shifted by
/// ½ and clamped to `[0, 1]`.
pub fn color_from_sh<T: Real>(degree: usize, sh: [&[T]; 4], w: &[T; 4], view_origin: Vec3<T>, p: &[Vec3<T>; 4]) -> [T; 3] {
    let ws = w[0] + w[1] + w[2] + w[3];
    let mut c = [T::zero(); 3];
    for i in 0..4 {
        let ci = sh::eval(degree, sh[i], sub(p[i], view_origin));
        for ch in 0..3 {
            c[ch] += w[i] * ci[ch];
        }
    }
    c.map(|x| (x / ws + cst(0.5)).max(T::zero()).min(T::one()))
}

/// Everything a leaf tet contributes to its Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct LeafInput<'a, T> {
    pub points: [Vec3<T>; 4],
    pub weights_raw: [T; 4],
    pub rotation_raw: Quat<T>,
    pub opacity_raw: T,
    pub sh: [&'a [T]; 4],
}

/// Gradients with respect to a [`LeafInput`]. SH gradients hold
/// `sh::n_coeffs(degree)` leading entries per corner.
#[derive(Clone, Copy, Debug)]
pub struct LeafGrad<T> {
    pub points: [Vec3<T>; 4],
    pub weights_raw: [T; 4],
    pub rotation_raw: Quat<T>,
    pub opacity_raw: T,
    pub sh: [[T; 48]; 4],
}

pub fn tet_to_gaussian<T: Real>(leaf: &LeafInput<T>, degree: usize, view_origin: Vec3<T>) -> Gaussian3D<T> {
    let w = leaf.weights_raw.map(activate_weight);
    let (mean, cov) = gaussian_geometry(&leaf.points, &w, quat_normalize(leaf.rotation_raw))
        .expect("activated weights are bounded below");
    Gaussian3D {
        mean,
        cov,
        color: color_from_sh(degree, leaf.sh, &w, view_origin, &leaf.points),
        opacity: sigmoid(leaf.opacity_raw),
    }
}

/// Backward of [`tet_to_gaussian`].
pub fn tet_to_gaussian_backward<T: Real>(
    leaf: &LeafInput<T>,
    degree: usize,
    view_origin: Vec3<T>,
    g: &GaussianGrad<T>,
) -> LeafGrad<T> {
    let p = &leaf.points;
    let w = leaf.weights_raw.map(activate_weight);
    let ws = w[0] + w[1] + w[2] + w[3];
    let mean = weighted_mean(p, &w, ws);
    let sp = local_covariance(p, &w, mean);
    let q = quat_normalize(leaf.rotation_raw);
    let r = quat_to_mat(q);
    let rt = transpose(&r);

    let mut g_p = [[T::zero(); 3]; 4];
    let mut g_w = [T::zero(); 4];

    // Σ = R Σ' Rᵀ
    let g_sp = matmul(&matmul(&rt, &g.cov), &r);
    let g_r = {
        let a = matmul(&matmul(&g.cov, &r), &sp);
        let b = matmul(&matmul(&transpose(&g.cov), &r), &sp);
        let mut m = a;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += b[i][j];
            }
        }
        m
    };
    let g_q = quat_normalize_backward(leaf.rotation_raw, quat_to_mat_backward(q, &g_r));

    // Σ' = Σ wᵢ eᵢ eᵢᵀ. The mean's influence through eᵢ cancels because
    // Σ wᵢ eᵢ = 0.
    let sym = {
        let mut s = g_sp;
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = g_sp[i][j] + g_sp[j][i];
            }
        }
        s
    };
    for i in 0..4 {
        let e = sub(p[i], mean);
        let se = crate::linalg::matvec(&sym, e);
        for d in 0..3 {
            g_p[i][d] += w[i] * se[d];
        }
        g_w[i] += dot(e, crate::linalg::matvec(&g_sp, e));
        // μ = Σ wᵢ vᵢ / W
        g_w[i] += dot(e, g.mean) / ws;
        for d in 0..3 {
            g_p[i][d] += w[i] / ws * g.mean[d];
        }
    }

    // Colour.
    let mut g_sh = [[T::zero(); 48]; 4];
    let cols: Vec<[T; 3]> = (0..4).map(|i| sh::eval(degree, leaf.sh[i], sub(p[i], view_origin))).collect();
    let mut avg = [T::zero(); 3];
    for i in 0..4 {
        for ch in 0..3 {
            avg[ch] += w[i] * cols[i][ch] / ws;
        }
    }
    let mut g_avg = g.color;
    for ch in 0..3 {
        let c = avg[ch] + cst(0.5);
        if c < T::zero() || c > T::one() {
            g_avg[ch] = T::zero();
        }
    }
    if g_avg.iter().any(|&x| x != T::zero()) {
        for i in 0..4 {
            let gci = g_avg.map(|x| x * w[i] / ws);
            let g_dir = sh::eval_backward(degree, leaf.sh[i], sub(p[i], view_origin), gci, &mut g_sh[i]);
            for d in 0..3 {
                g_p[i][d] += g_dir[d];
            }
            for ch in 0..3 {
                g_w[i] += g_avg[ch] * (cols[i][ch] - avg[ch]) / ws;
            }
        }
    }

    let o = sigmoid(leaf.opacity_raw);
    let g_w_raw = [0, 1, 2, 3].map(|i| if leaf.weights_raw[i] > T::zero() { g_w[i] } else { T::zero() });
    LeafGrad { points: g_p, weights_raw: g_w_raw, rotation_raw: g_q, opacity_raw: g.opacity * o * (T::one() - o), sh: g_sh }
}

/// Axis scales (descending) and rotation of a symmetric PSD covariance,
/// `Σ = R diag(s²) Rᵀ` with `det R = +1`.
pub fn covariance_to_scale_rotation<T: Real>(cov: &Mat3<T>) -> Result<(Vec3<T>, Quat<T>)> {
    let n = frobenius(cov);
    let asym = ((cov[0][1] - cov[1][0]).powi(2) + (cov[0][2] - cov[2][0]).powi(2) + (cov[1][2] - cov[2][1]).powi(2)).sqrt();
    if asym > cst::<T>(1e-9) * n.max(T::min_positive_value()) {
        return Err(Error::NotSymmetric(crate::scalar::to_f64(asym)));
    }
    let (vals, vecs) = sym_eigen(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = [[T::zero(); 3]; 3];
    for (c, &k) in idx.iter().enumerate() {
        for row in 0..3 {
            r[row][c] = vecs[row][k];
        }
    }
    if crate::linalg::det(&r) < T::zero() {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
    }
    let scales = [vals[idx[0]], vals[idx[1]], vals[idx[2]]].map(|l| l.max(T::zero()).sqrt());
    Ok((scales, mat_to_quat(&r)))
}

/// Learnable render attributes. SH lives on render vertices; weights,
/// opacity and rotation on forest nodes (only leaves render).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAttributes<T: Real> {
    pub sh_degree: usize,
    /// `n_render_vertices × sh::n_coeffs(sh_degree)`.
    pub sh: Vec<T>,
    pub weights: Vec<[T; 4]>,
    pub opacity: Vec<T>,
    pub rotation: Vec<Quat<T>>,
}

impl<T: Real> RenderAttributes<T> {
    /// Uniform start: grey DC colour, unit weights, identity rotation and
    /// the given opacity.
    pub fn uniform(n_vertices: usize, n_nodes: usize, sh_degree: usize, opacity: f64) -> Self {
        let nc = sh::n_coeffs(sh_degree);
        Self {
            sh_degree,
            sh: vec![T::zero(); n_vertices * nc],
            weights: vec![[T::one(); 4]; n_nodes],
            opacity: vec![inverse_sigmoid(cst(opacity)); n_nodes],
            rotation: vec![[T::one(), T::zero(), T::zero(), T::zero()]; n_nodes],
        }
    }

    /// Random attributes for synthetic scenes.
    pub fn random<R: Rng>(n_vertices: usize, n_nodes: usize, sh_degree: usize, rng: &mut R) -> Self {
        let nc = sh::n_coeffs(sh_degree);
        let mut sh_v = vec![T::zero(); n_vertices * nc];
        for v in 0..n_vertices {
            for c in 0..3 {
                sh_v[v * nc + c] = sh::rgb_to_dc(cst(rng.gen_range(0.05..0.95)));
            }
            for k in 3..nc {
                sh_v[v * nc + k] = cst(rng.gen_range(-0.1..0.1));
            }
        }
        Self {
            sh_degree,
            sh: sh_v,
            weights: (0..n_nodes).map(|_| [(); 4].map(|_| cst(rng.gen_range(0.5..2.0)))).collect(),
            opacity: (0..n_nodes).map(|_| cst(rng.gen_range(-0.5..3.0))).collect(),
            rotation: (0..n_nodes)
                .map(|_| quat_normalize([(); 4].map(|_| cst::<T>(rng.gen_range(-1.0..1.0)))))
                .collect(),
        }
    }

    pub fn n_coeffs(&self) -> usize {
        sh::n_coeffs(self.sh_degree)
    }

    pub fn vertex_sh(&self, v: usize) -> &[T] {
        let n = self.n_coeffs();
        &self.sh[v * n..(v + 1) * n]
    }

    /// Extend the attribute arrays after `forest.subdivide(node)`: the new
    /// control vertex takes the barycentric blend of the corner SH, each
    /// child inherits the parent's opacity and rotation, and child `i`'s
    /// weight at the new corner is the blend of the parent's corner weights.
    pub fn on_split(&mut self, forest: &SubdivisionForest<T>, node: usize) {
        let n = forest.node(node);
        let children = n.children.expect("node was split");
        let b = barycentric(&forest.controls()[node]);
        let nc = self.n_coeffs();
        let mut blended = vec![T::zero(); nc];
        for i in 0..4 {
            let s = self.vertex_sh(n.corners[i]);
            for k in 0..nc {
                blended[k] += b[i] * s[k];
            }
        }
        debug_assert_eq!(self.sh.len() / nc, n.control_vertex.unwrap());
        self.sh.extend(blended);
        let pw = self.weights[node];
        let wc = (0..4).fold(T::zero(), |a, i| a + b[i] * pw[i]);
        for (i, &c) in children.iter().enumerate() {
            debug_assert_eq!(c, self.weights.len());
            let mut w = pw;
            w[i] = wc;
            self.weights.push(w);
            self.opacity.push(self.opacity[node]);
            self.rotation.push(self.rotation[node]);
        }
    }

    pub fn leaf_input<'a>(&'a self, forest: &SubdivisionForest<T>, render_pos: &[Vec3<T>], node: usize) -> LeafInput<'a, T> {
        let corners = forest.node(node).corners;
        LeafInput {
            points: corners.map(|c| render_pos[c]),
            weights_raw: self.weights[node],
            rotation_raw: self.rotation[node],
            opacity_raw: self.opacity[node],
            sh: corners.map(|c| self.vertex_sh(c)),
        }
    }

    pub fn check_sizes(&self, forest: &SubdivisionForest<T>) -> Result<()> {
        let n = forest.n_nodes();
        if self.sh.len() != forest.n_render_vertices() * self.n_coeffs()
            || self.weights.len() != n
            || self.opacity.len() != n
            || self.rotation.len() != n
        {
            return Err(Error::SizeMismatch("render attributes do not match the forest".into()));
        }
        Ok(())
    }
}
