//! Tetrahedral mesh, construction, conformality checks and element quality.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cross, dot, norm, sub, Vec3};
use crate::scalar::{cst, to_f64, Real};

/// Signed volume `det[p1−p0, p2−p0, p3−p0] / 6`.
#[inline]
pub fn signed_volume<T: Real>(p0: Vec3<T>, p1: Vec3<T>, p2: Vec3<T>, p3: Vec3<T>) -> T {
    let a = sub(p1, p0);
    let b = sub(p2, p0);
    let c = sub(p3, p0);
    dot(a, cross(b, c)) / cst(6.0)
}

/// Gradient of [`signed_volume`] with respect to each of the four points.
pub fn signed_volume_grad<T: Real>(p: &[Vec3<T>; 4]) -> [Vec3<T>; 4] {
    let sixth = cst::<T>(1.0 / 6.0);
    let a = sub(p[1], p[0]);
    let b = sub(p[2], p[0]);
    let c = sub(p[3], p[0]);
    let g1 = crate::linalg::scale(cross(b, c), sixth);
    let g2 = crate::linalg::scale(cross(c, a), sixth);
    let g3 = crate::linalg::scale(cross(a, b), sixth);
    let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
    [g0, g1, g2, g3]
}

pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Mean-ratio style quality `Q = 6√2·V / S_rms³`, where `S_rms` is the
/// root-mean-square edge length. `1` for the regular tet, `0` for flat or
/// inverted ones.
pub fn quality_gamma<T: Real>(p: &[Vec3<T>; 4]) -> T {
    let v = signed_volume(p[0], p[1], p[2], p[3]);
    if v <= T::zero() {
        return T::zero();
    }
    let s2 = mean_sq_edge(p);
    cst::<T>(6.0 * std::f64::consts::SQRT_2) * v / (s2 * s2.sqrt())
}

fn mean_sq_edge<T: Real>(p: &[Vec3<T>; 4]) -> T {
    TET_EDGES
        .iter()
        .map(|&(i, j)| {
            let e = sub(p[j], p[i]);
            dot(e, e)
        })
        .fold(T::zero(), |a, b| a + b)
        / cst(6.0)
}

/// Gradient of [`quality_gamma`] with respect to the four points. Zero where
/// the quality is clamped (non-positive volume).
pub fn quality_gamma_grad<T: Real>(p: &[Vec3<T>; 4]) -> [Vec3<T>; 4] {
    let mut g = [[T::zero(); 3]; 4];
    let v = signed_volume(p[0], p[1], p[2], p[3]);
    if v <= T::zero() {
        return g;
    }
    let c0 = cst::<T>(6.0 * std::f64::consts::SQRT_2);
    let s2 = mean_sq_edge(p);
    let s3 = s2 * s2.sqrt();
    // Q = c0·V·s2^{-3/2}
    let dq_dv = c0 / s3;
    let dq_ds2 = -cst::<T>(1.5) * c0 * v / (s3 * s2);
    let gv = signed_volume_grad(p);
    for k in 0..4 {
        for d in 0..3 {
            g[k][d] = dq_dv * gv[k][d];
        }
    }
    let third = cst::<T>(2.0 / 6.0);
    for &(i, j) in TET_EDGES.iter() {
        let e = sub(p[j], p[i]);
        for d in 0..3 {
            let t = dq_ds2 * third * e[d];
            g[j][d] += t;
            g[i][d] -= t;
        }
    }
    g
}

fn triangle_area<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> T {
    norm(cross(sub(b, a), sub(c, a))) * cst(0.5)
}

/// Circumradius of a tetrahedron (infinite when degenerate).
pub fn circumradius<T: Real>(p: &[Vec3<T>; 4]) -> T {
    let a = sub(p[1], p[0]);
    let b = sub(p[2], p[0]);
    let c = sub(p[3], p[0]);
    let denom = cst::<T>(2.0) * dot(a, cross(b, c));
    if denom == T::zero() {
        return T::infinity();
    }
    let mut num = crate::linalg::scale(cross(b, c), dot(a, a));
    crate::linalg::axpy(&mut num, dot(b, b), cross(c, a));
    crate::linalg::axpy(&mut num, dot(c, c), cross(a, b));
    norm(num) / denom.abs()
}

/// Inradius `3V / Σ face areas`.
pub fn inradius<T: Real>(p: &[Vec3<T>; 4]) -> T {
    let v = signed_volume(p[0], p[1], p[2], p[3]).abs();
    let area = triangle_area(p[1], p[2], p[3])
        + triangle_area(p[0], p[2], p[3])
        + triangle_area(p[0], p[1], p[3])
        + triangle_area(p[0], p[1], p[2]);
    if area == T::zero() {
        return T::zero();
    }
    cst::<T>(3.0) * v / area
}

/// Aspect ratio `3r/ρ` (inradius over circumradius, normalized so the regular
/// tet scores 1). Degenerate or inverted tets score 0.
pub fn aspect_ratio<T: Real>(p: &[Vec3<T>; 4]) -> T {
    if signed_volume(p[0], p[1], p[2], p[3]) <= T::zero() {
        return T::zero();
    }
    let rho = circumradius(p);
    if !rho.is_finite() || rho == T::zero() {
        return T::zero();
    }
    (cst::<T>(3.0) * inradius(p) / rho).min(T::one())
}

/// Number of tets with non-positive signed volume.
pub fn count_inverted<T: Real>(positions: &[Vec3<T>], tets: &[[usize; 4]]) -> usize {
    tets.iter()
        .filter(|t| signed_volume(positions[t[0]], positions[t[1]], positions[t[2]], positions[t[3]]) <= T::zero())
        .count()
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    /// Smallest box containing `points`.
    pub fn bounding<T: Real>(points: &[Vec3<T>]) -> Self {
        let mut b = Self::new([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in points {
            for d in 0..3 {
                let x = to_f64(p[d]);
                b.min[d] = b.min[d].min(x);
                b.max[d] = b.max[d].max(x);
            }
        }
        b
    }

    /// Grow every side by `frac` of the extent.
    pub fn padded(&self, frac: f64) -> Self {
        let e = self.extent();
        let mut b = *self;
        for d in 0..3 {
            b.min[d] -= frac * e[d];
            b.max[d] += frac * e[d];
        }
        b
    }
}

/// Vertex positions plus positively oriented 4-index tetrahedra.
#[derive(Clone, Debug, PartialEq)]
pub struct TetMesh<T: Real> {
    vertices: Vec<Vec3<T>>,
    tets: Vec<[usize; 4]>,
}

impl<T: Real> TetMesh<T> {
    /// Validates indices and that every tet has positive signed volume.
    pub fn new(vertices: Vec<Vec3<T>>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let mesh = Self::new_unchecked(vertices, tets)?;
        for (k, _) in mesh.tets.iter().enumerate() {
            let v = mesh.tet_volume(k);
            if v <= T::zero() {
                return Err(Error::InvertedTet { tet: k, volume: to_f64(v) });
            }
        }
        Ok(mesh)
    }

    /// Validates indices only; orientation is not checked.
    pub fn new_unchecked(vertices: Vec<Vec3<T>>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let n = vertices.len();
        for (k, t) in tets.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { tet: k, index: bad, n_vertices: n });
            }
        }
        Ok(Self { vertices, tets })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_points(&self, k: usize) -> [Vec3<T>; 4] {
        tet_points(&self.vertices, &self.tets[k])
    }

    pub fn tet_volume(&self, k: usize) -> T {
        let p = self.tet_points(k);
        signed_volume(p[0], p[1], p[2], p[3])
    }

    /// Same connectivity, new positions.
    pub fn with_positions(&self, vertices: Vec<Vec3<T>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::SizeMismatch(format!(
                "{} positions for {} vertices",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(Self { vertices, tets: self.tets.clone() })
    }

    pub fn total_volume(&self) -> T {
        (0..self.n_tets()).map(|k| self.tet_volume(k)).fold(T::zero(), |a, b| a + b)
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .tets
            .iter()
            .flat_map(|t| TET_EDGES.iter().map(move |&(i, j)| (t[i].min(t[j]), t[i].max(t[j]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// For every vertex, the tets incident to it.
    pub fn vertex_tets(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.vertices.len()];
        for (k, t) in self.tets.iter().enumerate() {
            for &v in t {
                inc[v].push(k);
            }
        }
        inc
    }
}

pub fn tet_points<T: Real>(positions: &[Vec3<T>], t: &[usize; 4]) -> [Vec3<T>; 4] {
    [positions[t[0]], positions[t[1]], positions[t[2]], positions[t[3]]]
}

/// Uniform grid over `bbox` with `res` cubes per axis, each cube split into
/// six tets around its main diagonal (Freudenthal/Kuhn).
pub fn build_uniform_grid<T: Real>(bbox: &Aabb, res: [usize; 3]) -> Result<TetMesh<T>> {
    let ext = bbox.extent();
    if ext.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::DegenerateBox { extent: ext });
    }
    if res.iter().any(|&r| r == 0) {
        return Err(Error::InvalidResolution(res));
    }
    let [nx, ny, nz] = res;
    let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let f = [i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64];
                vertices.push([
                    cst::<T>(bbox.min[0] + f[0] * ext[0]),
                    cst::<T>(bbox.min[1] + f[1] * ext[1]),
                    cst::<T>(bbox.min[2] + f[2] * ext[2]),
                ]);
            }
        }
    }
    // Each axis permutation gives one monotone lattice path 000 → 111.
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS.iter() {
                    let mut c = [i, j, k];
                    let mut t = [idx(c[0], c[1], c[2]), 0, 0, 0];
                    for (s, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        t[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    let p = tet_points(&vertices, &t);
                    if signed_volume(p[0], p[1], p[2], p[3]) < T::zero() {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    TetMesh::new(vertices, tets)
}

/// Sorted-triple key of a triangular face.
pub type FaceKey = [usize; 3];

/// Outward-oriented faces of a positively oriented tet, opposite vertex `i`.
pub fn oriented_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    [[t[1], t[2], t[3]], [t[0], t[3], t[2]], [t[0], t[1], t[3]], [t[0], t[2], t[1]]]
}

/// `(sorted key, parity)` where parity is `true` when the face winding is an
/// even permutation of the sorted key.
fn face_key(f: [usize; 3]) -> (FaceKey, bool) {
    let mut k = f;
    let mut swaps = 0;
    for i in 0..3 {
        for j in 0..2 - i {
            if k[j] > k[j + 1] {
                k.swap(j, j + 1);
                swaps += 1;
            }
        }
    }
    (k, swaps % 2 == 0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceViolation {
    pub face: FaceKey,
    /// `(tet, local face index)` for every incidence of the face.
    pub incidences: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConformalityReport {
    pub ok: bool,
    pub boundary_faces: usize,
    pub interior_faces: usize,
    pub violations: Vec<FaceViolation>,
}

/// Every face must occur once (boundary) or twice with opposite winding
/// (interior).
pub fn validate_conformal<T: Real>(mesh: &TetMesh<T>) -> ConformalityReport {
    validate_conformal_tets(mesh.tets())
}

pub fn validate_conformal_tets(tets: &[[usize; 4]]) -> ConformalityReport {
    let mut faces: HashMap<FaceKey, Vec<(usize, usize, bool)>> = HashMap::new();
    for (k, t) in tets.iter().enumerate() {
        for (fi, f) in oriented_faces(t).into_iter().enumerate() {
            let (key, parity) = face_key(f);
            faces.entry(key).or_default().push((k, fi, parity));
        }
    }
    let mut report = ConformalityReport { ok: true, boundary_faces: 0, interior_faces: 0, violations: Vec::new() };
    let mut keys: Vec<_> = faces.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        let inc = &faces[&key];
        let good = match inc.len() {
            1 => {
                report.boundary_faces += 1;
                true
            }
            2 if inc[0].2 != inc[1].2 => {
                report.interior_faces += 1;
                true
            }
            _ => false,
        };
        if !good {
            report.violations.push(FaceViolation { face: key, incidences: inc.iter().map(|&(k, f, _)| (k, f)).collect() });
        }
    }
    report.ok = report.violations.is_empty();
    report
}

/// Ratio of the largest to smallest absolute tet volume among tet `k` and
/// all tets sharing at least one vertex with it.
pub fn adjacent_volume_ratio<T: Real>(mesh: &TetMesh<T>, k: usize) -> T {
    let inc = mesh.vertex_tets();
    avr_with_incidence(mesh, &inc, k)
}

fn avr_with_incidence<T: Real>(mesh: &TetMesh<T>, inc: &[Vec<usize>], k: usize) -> T {
    let mut lo = T::infinity();
    let mut hi = T::zero();
    for &v in &mesh.tets()[k] {
        for &n in &inc[v] {
            let vol = mesh.tet_volume(n).abs();
            lo = lo.min(vol);
            hi = hi.max(vol);
        }
    }
    if lo == T::zero() {
        T::infinity()
    } else {
        hi / lo
    }
}

/// Per-tet metrics plus summaries.
#[derive(Clone, Debug)]
pub struct QualityReport {
    pub volume: Vec<f64>,
    pub q: Vec<f64>,
    pub ar: Vec<f64>,
    pub avr: Vec<f64>,
    pub inverted_count: usize,
}

/// Mean and (population) standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

impl QualityReport {
    pub fn compute<T: Real>(mesh: &TetMesh<T>) -> Self {
        let inc = mesh.vertex_tets();
        let rows: Vec<(f64, f64, f64, f64)> = (0..mesh.n_tets())
            .into_par_iter()
            .map(|k| {
                let p = mesh.tet_points(k);
                (
                    to_f64(mesh.tet_volume(k)),
                    to_f64(quality_gamma(&p)),
                    to_f64(aspect_ratio(&p)),
                    to_f64(avr_with_incidence(mesh, &inc, k)),
                )
            })
            .collect();
        let inverted_count = rows.iter().filter(|r| r.0 <= 0.0).count();
        Self {
            volume: rows.iter().map(|r| r.0).collect(),
            q: rows.iter().map(|r| r.1).collect(),
            ar: rows.iter().map(|r| r.2).collect(),
            avr: rows.iter().map(|r| r.3).collect(),
            inverted_count,
        }
    }

    pub fn q_summary(&self) -> Summary {
        Summary::of(&self.q)
    }

    pub fn ar_summary(&self) -> Summary {
        Summary::of(&self.ar)
    }

    pub fn avr_summary(&self) -> Summary {
        Summary::of(&self.avr)
    }

    /// `tet_id,volume,Q,AR,AVR`
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tet_id,volume,Q,AR,AVR")?;
        for k in 0..self.q.len() {
            writeln!(w, "{},{},{},{},{}", k, self.volume[k], self.q[k], self.ar[k], self.avr[k])?;
        }
        Ok(())
    }

    /// `metric,mean,std` rows for Q, AR, ARG and AVR plus the inverted
    /// count. ARG is the aspect-ratio gamma, which is what Q measures, so the
    /// two rows agree.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,mean,std")?;
        let q = self.q_summary();
        for (name, s) in [("Q", q), ("AR", self.ar_summary()), ("ARG", q), ("AVR", self.avr_summary())] {
            writeln!(w, "{name},{},{}", s.mean, s.std)?;
        }
        writeln!(w, "inverted,{},0", self.inverted_count)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORNER: [Vec3<f64>; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn regular(scale: f64) -> [Vec3<f64>; 4] {
        let s = scale;
        [[s, s, s], [s, -s, -s], [-s, -s, s], [-s, s, -s]]
    }

    #[test]
    fn signed_volume_examples() {
        let [a, b, c, d] = CORNER;
        assert!((signed_volume(a, b, c, d) - 1.0 / 6.0).abs() < 1e-15);
        assert!((signed_volume(a, b, d, c) + 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(signed_volume(a, b, c, [0.5, 0.5, 0.0]), 0.0);
    }

    #[test]
    fn quality_examples() {
        assert!((quality_gamma(&regular(1.0)) - 1.0).abs() < 1e-12);
        assert!((quality_gamma(&regular(1e-3)) - 1.0).abs() < 1e-12);
        let flat = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(quality_gamma(&flat), 0.0);
        // Independent evaluation: V = 1/6, S_rms² = (1+1+1+2+2+2)/6 = 1.5.
        let oracle = 6.0 * 2f64.sqrt() * (1.0 / 6.0) / 1.5f64.powf(1.5);
        assert!((oracle - 0.7698).abs() < 1e-4);
        assert!((quality_gamma(&CORNER) - oracle).abs() < 1e-12);
    }

    /// Circumcenter by Gaussian elimination on |x − p_i|² = |x − p_0|².
    fn circumradius_oracle(p: &[Vec3<f64>; 4]) -> f64 {
        let mut a = [[0.0; 4]; 3];
        for i in 0..3 {
            for d in 0..3 {
                a[i][d] = 2.0 * (p[i + 1][d] - p[0][d]);
            }
            a[i][3] = (0..3).map(|d| p[i + 1][d] * p[i + 1][d] - p[0][d] * p[0][d]).sum();
        }
        for col in 0..3 {
            let piv = (col..3).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in 0..4 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let x = [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]];
        ((0..3).map(|d| (x[d] - p[0][d]).powi(2)).sum::<f64>()).sqrt()
    }

    #[test]
    fn aspect_ratio_examples() {
        assert!((aspect_ratio(&regular(2.0)) - 1.0).abs() < 1e-12);
        let flat = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.3, 0.0]];
        assert_eq!(aspect_ratio(&flat), 0.0);
        // Oracle: r = 3V/ΣA with faces 1/2, 1/2, 1/2, √3/2; ρ from the linear solve.
        let r = 3.0 * (1.0 / 6.0) / (1.5 + 3f64.sqrt() / 2.0);
        let rho = circumradius_oracle(&CORNER);
        assert!((rho - 3f64.sqrt() / 2.0).abs() < 1e-14);
        let oracle = 3.0 * r / rho;
        assert!((oracle - 0.732).abs() < 1e-3);
        assert!((aspect_ratio(&CORNER) - oracle).abs() < 1e-12);
    }

    #[test]
    fn quality_gradient_matches_finite_differences() {
        let p: [Vec3<f64>; 4] = [[0.1, 0.0, -0.2], [1.2, 0.1, 0.0], [0.2, 0.9, 0.1], [0.0, 0.3, 1.1]];
        let g = quality_gamma_grad(&p);
        let h = 1e-6;
        for k in 0..4 {
            for d in 0..3 {
                let mut pp = p;
                pp[k][d] += h;
                let mut pm = p;
                pm[k][d] -= h;
                let fd = (quality_gamma(&pp) - quality_gamma(&pm)) / (2.0 * h);
                assert!((fd - g[k][d]).abs() < 1e-8 * (1.0 + fd.abs()), "{k},{d}: {fd} vs {}", g[k][d]);
            }
        }
    }

    #[test]
    fn grid_partitions_box() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [1, 1, 1]).unwrap();
        assert_eq!(m.n_tets(), 6);
        for k in 0..6 {
            assert!((m.tet_volume(k) - 1.0 / 6.0).abs() < 1e-15);
        }
        let b = Aabb::new([-1.0, 0.0, 2.0], [1.0, 0.5, 3.0]);
        let m = build_uniform_grid::<f64>(&b, [2, 1, 1]).unwrap();
        assert_eq!(m.n_tets(), 12);
        assert!((m.total_volume() - b.volume()).abs() < 1e-12 * b.volume());
        assert_eq!(count_inverted(m.vertices(), m.tets()), 0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        let flat = Aabb::new([0.0; 3], [1.0, 0.0, 1.0]);
        assert!(matches!(build_uniform_grid::<f64>(&flat, [1, 1, 1]), Err(Error::DegenerateBox { .. })));
        assert!(matches!(build_uniform_grid::<f64>(&Aabb::unit(), [1, 0, 1]), Err(Error::InvalidResolution(_))));
    }

    /// Brute-force face incidence: count how many tets contain each vertex
    /// triple, over all triples drawn from the tets.
    #[test]
    fn grid_faces_brute_force() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [3, 2, 2]).unwrap();
        let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
        for t in m.tets() {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| t[i]).collect();
                f.sort();
                *counts.entry([f[0], f[1], f[2]]).or_default() += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 1 || c == 2));
        let interior = counts.values().filter(|&&c| c == 2).count();
        let boundary = counts.values().filter(|&&c| c == 1).count();
        // Boundary of a 3x2x2 box: 2·(3·2 + 3·2 + 2·2) squares, 2 triangles each.
        assert_eq!(boundary, 2 * 2 * (6 + 6 + 4));
        let report = validate_conformal(&m);
        assert!(report.ok);
        assert_eq!(report.interior_faces, interior);
        assert_eq!(report.boundary_faces, boundary);
    }

    #[test]
    fn conformality_examples() {
        let mut verts = CORNER.to_vec();
        verts.extend(CORNER.iter().map(|p| [p[0] + 5.0, p[1], p[2]]));
        let m = TetMesh::new(verts, vec![[0, 1, 2, 3], [4, 5, 6, 7]]).unwrap();
        let r = validate_conformal(&m);
        assert!(r.ok);
        assert_eq!(r.boundary_faces, 8);

        // Face (0,1,2) shared by three tets.
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.2, 0.2, 2.0],
        ];
        let m = TetMesh::new_unchecked(verts, vec![[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]]).unwrap();
        let r = validate_conformal(&m);
        assert!(!r.ok);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].face, [0, 1, 2]);
        assert_eq!(r.violations[0].incidences.len(), 3);
    }

    #[test]
    fn same_winding_is_a_violation() {
        // Two tets on the same side of a shared face.
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.1, 0.1, 2.0]];
        let m = TetMesh::new(verts, vec![[0, 1, 2, 3], [0, 1, 2, 4]]).unwrap();
        assert!(!validate_conformal(&m).ok);
    }

    #[test]
    fn avr_examples() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [2, 2, 2]).unwrap();
        for k in 0..m.n_tets() {
            assert!((adjacent_volume_ratio(&m, k) - 1.0).abs() < 1e-12);
        }
        let lone = TetMesh::new(CORNER.to_vec(), vec![[0, 1, 2, 3]]).unwrap();
        assert_eq!(adjacent_volume_ratio(&lone, 0), 1.0);
        // Second tet shares face (0,1,2) with apex at height 1/2: volume 1/12.
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -0.5]];
        let m = TetMesh::<f64>::new(verts, vec![[0, 1, 2, 3], [0, 2, 1, 4]]).unwrap();
        let oracle = m.tet_volume(0).abs().max(m.tet_volume(1).abs()) / m.tet_volume(0).abs().min(m.tet_volume(1).abs());
        assert!((m.tet_volume(1) - 1.0 / 12.0).abs() < 1e-15);
        assert!((oracle - 2.0).abs() < 1e-12);
        assert!((adjacent_volume_ratio(&m, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inversion_by_reflection() {
        let mut m = build_uniform_grid::<f64>(&Aabb::unit(), [1, 1, 1]).unwrap();
        assert_eq!(count_inverted(m.vertices(), m.tets()), 0);
        // Reflect vertex t[0] of tet 0 through the plane of its opposite face.
        let t = m.tets()[0];
        let p = m.tet_points(0);
        let n = cross(sub(p[2], p[1]), sub(p[3], p[1]));
        let n = crate::linalg::scale(n, 1.0 / norm(n));
        let dist = dot(sub(p[0], p[1]), n);
        let mut verts = m.vertices().to_vec();
        verts[t[0]] = crate::linalg::add(p[0], crate::linalg::scale(n, -2.0 * dist));
        m = m.with_positions(verts).unwrap();
        assert!(count_inverted(m.vertices(), m.tets()) >= 1);
        assert!(matches!(TetMesh::new(m.vertices().to_vec(), m.tets().to_vec()), Err(Error::InvertedTet { .. })));
    }

    #[test]
    fn index_range_checked() {
        assert!(matches!(
            TetMesh::<f64>::new(CORNER.to_vec(), vec![[0, 1, 2, 4]]),
            Err(Error::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn quality_report_on_grid() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [2, 2, 2]).unwrap();
        let r = QualityReport::compute(&m);
        assert_eq!(r.inverted_count, 0);
        assert!((r.avr_summary().mean - 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("tet_id,volume,Q,AR,AVR\n0,"));
        assert_eq!(s.lines().count(), 1 + m.n_tets());
    }
}
