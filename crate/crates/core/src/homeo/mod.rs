//! Orientation-preserving invertible map of 3D space.
//!
//! The map is a stack of [`CouplingBlock`]s acting on coordinates normalized
//! into the unit cube of a domain box. Every block has Jacobian determinant
//! `exp(s) > 0`, so the composite is a homeomorphism with a positive Jacobian
//! determinant everywhere the conditioners are differentiable.

pub mod coupling;
pub mod hash;
pub mod mlp;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use coupling::{
    conjugate, permutation_matrix, permute, unpermute, BlockGrad, BlockTape, Conditioner, CouplingBlock, S_CLAMP,
};
pub use hash::{HashEncoding2D, HashEncodingConfig};
pub use mlp::Mlp;

use crate::linalg::{matmul, Mat3, Vec3};
use crate::scalar::{cst, to_f64, Real};
use crate::tetmesh::Aabb;

/// Points per batch when evaluating large point sets.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub blocks: usize,
    pub encoding: HashEncodingConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { blocks: 3, encoding: HashEncodingConfig::default(), hidden_width: 128, hidden_layers: 2 }
    }
}

impl MapConfig {
    /// Same architecture with a smaller hash table, for tests and quick runs.
    pub fn with_table_log2(mut self, log2: u32) -> Self {
        self.encoding.log2_table_size = log2;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationPreservingMap<T: Real> {
    domain: Aabb,
    blocks: Vec<CouplingBlock<T>>,
}

/// Gradient of a scalar loss with respect to all map parameters.
#[derive(Clone, Debug, Default)]
pub struct MapGrad<T> {
    pub blocks: Vec<BlockGrad<T>>,
}

/// Recorded forward pass for [`OrientationPreservingMap::backward`].
pub struct MapTape<T: Real> {
    blocks: Vec<BlockTape<T>>,
    clamped: Vec<[bool; 3]>,
}

impl<T: Real> OrientationPreservingMap<T> {
    pub fn new(domain: Aabb, blocks: Vec<CouplingBlock<T>>) -> Self {
        Self { domain, blocks }
    }

    /// Network map that starts as the exact identity (zero output layers).
    /// Axes are cycled x, y, z across blocks.
    pub fn identity<R: Rng>(domain: Aabb, config: &MapConfig, rng: &mut R) -> Self {
        Self::random(domain, config, 1e-4, 0.0, rng)
    }

    /// Network map with table entries uniform in `±table_amplitude` and the
    /// output layer scaled by `output_gain`.
    pub fn random<R: Rng>(domain: Aabb, config: &MapConfig, table_amplitude: f64, output_gain: f64, rng: &mut R) -> Self {
        let blocks = (0..config.blocks)
            .map(|b| {
                CouplingBlock::network(
                    b % 3,
                    config.encoding,
                    config.hidden_width,
                    config.hidden_layers,
                    table_amplitude,
                    output_gain,
                    rng,
                )
            })
            .collect();
        Self { domain, blocks }
    }

    pub fn domain(&self) -> &Aabb {
        &self.domain
    }

    pub fn blocks(&self) -> &[CouplingBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [CouplingBlock<T>] {
        &mut self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.n_params()).sum()
    }

    fn normalize(&self, p: Vec3<T>) -> Vec3<T> {
        let e = self.domain.extent();
        [
            (p[0] - cst(self.domain.min[0])) / cst(e[0]),
            (p[1] - cst(self.domain.min[1])) / cst(e[1]),
            (p[2] - cst(self.domain.min[2])) / cst(e[2]),
        ]
    }

    fn denormalize(&self, p: Vec3<T>) -> Vec3<T> {
        let e = self.domain.extent();
        [
            p[0] * cst(e[0]) + cst(self.domain.min[0]),
            p[1] * cst(e[1]) + cst(self.domain.min[1]),
            p[2] * cst(e[2]) + cst(self.domain.min[2]),
        ]
    }

    fn chunked<F>(&self, points: &[Vec3<T>], f: F) -> Vec<Vec3<T>>
    where
        F: Fn(&[Vec3<T>]) -> Vec<Vec3<T>> + Sync,
    {
        points.par_chunks(CHUNK).flat_map_iter(|c| f(c)).collect()
    }

    /// Forward map of a batch of scene-space points.
    pub fn forward_batch(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        self.chunked(points, |chunk| {
            let mut x: Vec<Vec3<T>> = chunk.iter().map(|&p| self.normalize(p)).collect();
            for b in &self.blocks {
                x = b.forward_batch(&x);
            }
            x.into_iter().map(|p| self.denormalize(p)).collect()
        })
    }

    pub fn forward(&self, p: Vec3<T>) -> Vec3<T> {
        self.forward_batch(&[p])[0]
    }

    /// Exact inverse of [`Self::forward_batch`].
    pub fn inverse_batch(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        self.chunked(points, |chunk| {
            let mut x: Vec<Vec3<T>> = chunk.iter().map(|&p| self.normalize(p)).collect();
            for b in self.blocks.iter().rev() {
                x = b.inverse_batch(&x);
            }
            x.into_iter().map(|p| self.denormalize(p)).collect()
        })
    }

    pub fn inverse(&self, p: Vec3<T>) -> Vec3<T> {
        self.inverse_batch(&[p])[0]
    }

    /// Scene-space Jacobian `∂forward/∂p` at each point, composed by the chain
    /// rule from the per-block Jacobians.
    pub fn jacobian_batch(&self, points: &[Vec3<T>]) -> Vec<Mat3<T>> {
        let e = self.domain.extent();
        points
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut x: Vec<Vec3<T>> = chunk.iter().map(|&p| self.normalize(p)).collect();
                let mut jac = vec![crate::linalg::identity::<T>(); x.len()];
                for b in &self.blocks {
                    let (y, jb) = b.jacobian_batch(&x);
                    for (j, jbk) in jac.iter_mut().zip(&jb) {
                        *j = matmul(jbk, j);
                    }
                    x = y;
                }
                jac.into_iter().map(move |mut j| {
                    for r in 0..3 {
                        for c in 0..3 {
                            j[r][c] = j[r][c] * cst(e[r] / e[c]);
                        }
                    }
                    j
                })
            })
            .collect()
    }

    pub fn jacobian(&self, p: Vec3<T>) -> Mat3<T> {
        self.jacobian_batch(&[p])[0]
    }

    /// `det ∂forward/∂p` as the product of the block determinants
    /// `exp(s_b)`. Taking `det` of the assembled [`Self::jacobian_batch`]
    /// instead cancels catastrophically once the map shears strongly.
    pub fn jacobian_det_batch(&self, points: &[Vec3<T>]) -> Vec<T> {
        points
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut x: Vec<Vec3<T>> = chunk.iter().map(|&p| self.normalize(p)).collect();
                let mut log_det = vec![T::zero(); x.len()];
                for b in &self.blocks {
                    let (y, s) = b.forward_log_det(&x);
                    for (a, s) in log_det.iter_mut().zip(s) {
                        *a += s;
                    }
                    x = y;
                }
                log_det.into_iter().map(|l| l.exp())
            })
            .collect()
    }

    /// Clamp into the domain box, logging when anything moved.
    fn clamp_to_domain(&self, points: &[Vec3<T>]) -> (Vec<Vec3<T>>, Vec<[bool; 3]>) {
        let mut n_out = 0;
        let mut flags = Vec::with_capacity(points.len());
        let out = points
            .iter()
            .map(|p| {
                let mut q = *p;
                let mut f = [false; 3];
                for d in 0..3 {
                    let (lo, hi) = (cst::<T>(self.domain.min[d]), cst::<T>(self.domain.max[d]));
                    if q[d] < lo || q[d] > hi {
                        q[d] = q[d].max(lo).min(hi);
                        f[d] = true;
                    }
                }
                if f.iter().any(|&x| x) {
                    n_out += 1;
                }
                flags.push(f);
                q
            })
            .collect();
        if n_out > 0 {
            log::warn!("{n_out} point(s) outside the map domain were clamped");
        }
        (out, flags)
    }

    /// Map base vertices; points outside the domain are clamped first.
    pub fn map_vertices(&self, base: &[Vec3<T>]) -> Vec<Vec3<T>> {
        let (pts, _) = self.clamp_to_domain(base);
        self.forward_batch(&pts)
    }

    /// [`Self::map_vertices`] with a tape for [`Self::backward`].
    pub fn map_vertices_taped(&self, base: &[Vec3<T>]) -> (Vec<Vec3<T>>, MapTape<T>) {
        let (pts, clamped) = self.clamp_to_domain(base);
        let mut x: Vec<Vec3<T>> = pts.iter().map(|&p| self.normalize(p)).collect();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward_taped(&x);
            tapes.push(t);
            x = y;
        }
        (x.into_iter().map(|p| self.denormalize(p)).collect(), MapTape { blocks: tapes, clamped })
    }

    /// Jacobian determinant at each taped point from the recorded scales,
    /// `Π exp(s_b)` (the normalization cancels).
    pub fn taped_det(&self, tape: &MapTape<T>) -> Vec<T> {
        let lim = cst::<T>(S_CLAMP);
        let n = tape.clamped.len();
        (0..n)
            .map(|i| {
                tape.blocks
                    .iter()
                    .map(|t| t.raw_s[i].max(-lim).min(lim))
                    .fold(T::zero(), |a, b| a + b)
                    .exp()
            })
            .collect()
    }

    /// Accumulate parameter gradients given `∂L/∂(mapped point)`; returns
    /// `∂L/∂(base point)`.
    pub fn backward(&self, tape: &MapTape<T>, g_out: &[Vec3<T>], grad: &mut MapGrad<T>) -> Vec<Vec3<T>> {
        if grad.blocks.len() != self.blocks.len() {
            grad.blocks = (0..self.blocks.len()).map(|_| BlockGrad::default()).collect();
        }
        let e = self.domain.extent();
        // Denormalization scales each axis by its extent.
        let mut g: Vec<Vec3<T>> =
            g_out.iter().map(|v| [v[0] * cst(e[0]), v[1] * cst(e[1]), v[2] * cst(e[2])]).collect();
        for (b, (blk, t)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            g = blk.backward(t, &g, &mut grad.blocks[b]);
        }
        g.iter()
            .zip(&tape.clamped)
            .map(|(v, c)| {
                let mut r = [v[0] / cst(e[0]), v[1] / cst(e[1]), v[2] / cst(e[2])];
                for d in 0..3 {
                    if c[d] {
                        r[d] = T::zero();
                    }
                }
                r
            })
            .collect()
    }

    /// Visit every parameter tensor in the fixed serialization order:
    /// per block, hash table then network parameters.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = Vec::new();
        for b in &self.blocks {
            if let Conditioner::Network { encoding, mlp } = b.conditioner() {
                v.push(encoding.table());
                v.push(mlp.params());
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            if let Conditioner::Network { encoding, mlp } = b.conditioner_mut() {
                v.push(encoding.table_mut());
                v.push(mlp.params_mut());
            }
        }
        v
    }

    /// Largest displacement `|forward(p) − p|` over `points`.
    pub fn max_displacement(&self, points: &[Vec3<T>]) -> f64 {
        self.forward_batch(points)
            .iter()
            .zip(points)
            .map(|(a, b)| to_f64(crate::linalg::norm(crate::linalg::sub(*a, *b))))
            .fold(0.0, f64::max)
    }
}

impl<T: Real> MapGrad<T> {
    pub fn scale(&mut self, s: T) {
        for b in &mut self.blocks {
            b.mlp.iter_mut().for_each(|g| *g *= s);
            b.table.values_mut().for_each(|g| *g *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::det;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> MapConfig {
        MapConfig {
            blocks: 3,
            encoding: HashEncodingConfig { levels: 4, log2_table_size: 10, features: 2, base_resolution: 4, max_resolution: 32 },
            hidden_width: 16,
            hidden_layers: 2,
        }
    }

    fn domain() -> Aabb {
        Aabb::new([-1.0, 0.0, 2.0], [1.0, 3.0, 2.5])
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3<f64>> {
        let d = domain();
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = rng.gen_range(d.min[k]..d.max[k]);
                }
                p
            })
            .collect()
    }

    #[test]
    fn identity_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = OrientationPreservingMap::<f64>::identity(domain(), &small_config(), &mut rng);
        let pts = random_points(50, &mut rng);
        let y = map.forward_batch(&pts);
        for (a, b) in pts.iter().zip(&y) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        for j in map.jacobian_batch(&pts) {
            for r in 0..3 {
                for c in 0..3 {
                    let e = if r == c { 1.0 } else { 0.0 };
                    assert!((j[r][c] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_only_blocks_translate() {
        let blocks = (0..3).map(|a| CouplingBlock::constant(a, 0.0f64, 0.1 * (a + 1) as f64)).collect();
        let map = OrientationPreservingMap::new(domain(), blocks);
        let e = domain().extent();
        let p = [0.2, 1.0, 2.2];
        let q = map.forward(p);
        for k in 0..3 {
            assert!((q[k] - p[k] - 0.1 * (k + 1) as f64 * e[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_map_inverse_jacobian_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = OrientationPreservingMap::<f64>::random(domain(), &small_config(), 0.5, 0.5, &mut rng);
        let pts = random_points(500, &mut rng);
        let back = map.inverse_batch(&map.forward_batch(&pts));
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        assert!(map.max_displacement(&pts) > 1e-3);

        let jacs = map.jacobian_batch(&pts[..50]);
        let h = 1e-6;
        for (p, j) in pts[..50].iter().zip(&jacs) {
            assert!(det(j) > 0.0);
            for c in 0..3 {
                let mut a = *p;
                a[c] += h;
                let mut b = *p;
                b[c] -= h;
                let (fa, fb) = (map.forward(a), map.forward(b));
                for r in 0..3 {
                    let fd = (fa[r] - fb[r]) / (2.0 * h);
                    assert!((fd - j[r][c]).abs() < 1e-5 * (1.0 + fd.abs()), "J[{r}][{c}] {fd} vs {}", j[r][c]);
                }
            }
        }

        // Taped determinant agrees with the assembled Jacobian.
        let (_, tape) = map.map_vertices_taped(&pts[..50]);
        for (d, j) in map.taped_det(&tape).iter().zip(&jacs) {
            assert!((d - det(j)).abs() < 1e-10 * d.abs());
        }
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = OrientationPreservingMap::<f64>::random(domain(), &small_config(), 0.5, 0.5, &mut rng);
        let pts = random_points(6, &mut rng);
        let weights: Vec<Vec3<f64>> = (0..6).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let loss = |m: &OrientationPreservingMap<f64>, p: &[Vec3<f64>]| {
            m.forward_batch(p).iter().zip(&weights).map(|(a, w)| crate::linalg::dot(*a, *w)).sum::<f64>()
        };
        let (_, tape) = map.map_vertices_taped(&pts);
        let mut grad = MapGrad::default();
        let g_in = map.backward(&tape, &weights, &mut grad);
        let h = 1e-6;
        for i in 0..6 {
            for k in 0..3 {
                let mut a = pts.clone();
                a[i][k] += h;
                let mut b = pts.clone();
                b[i][k] -= h;
                let fd = (loss(&map, &a) - loss(&map, &b)) / (2.0 * h);
                assert!((fd - g_in[i][k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        for (b, bg) in grad.blocks.iter().enumerate() {
            // Network weights.
            for idx in (0..bg.mlp.len()).step_by(37) {
                let mut mp = map.clone();
                let mut mm = map.clone();
                mp.tensors_mut()[2 * b + 1][idx] += h;
                mm.tensors_mut()[2 * b + 1][idx] -= h;
                let fd = (loss(&mp, &pts) - loss(&mm, &pts)) / (2.0 * h);
                let a = bg.mlp[idx];
                assert!((fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1e-3), "block {b} mlp {idx}: {fd} vs {a}");
            }
            // Table entries touched by the points.
            let mut touched: Vec<(usize, f64)> = bg.table.iter().map(|(&i, &a)| (i, a)).collect();
            touched.sort_by_key(|e| e.0);
            for &(idx, a) in touched.iter().step_by(touched.len().div_ceil(20).max(1)) {
                let mut mp = map.clone();
                let mut mm = map.clone();
                mp.tensors_mut()[2 * b][idx] += h;
                mm.tensors_mut()[2 * b][idx] -= h;
                let fd = (loss(&mp, &pts) - loss(&mm, &pts)) / (2.0 * h);
                assert!((fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1e-2), "block {b} table {idx}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn naive_split_without_permutation_is_not_triangular() {
        // Keep x and z, transform y, without reordering: the Jacobian has the
        // shape [[1, ∂y'/∂x?, 0], [0, e^s, 0], [0, ∂y'/∂z?, 1]] once written with
        // rows as inputs; in the standard (rows = outputs) layout the coupling
        // entries land in row 1, columns 0 and 2, between the passthrough
        // coordinates, so no ordering of (x, y, z) makes it triangular.
        let s = |x: f64, z: f64| 0.3 * x - 0.2 * z;
        let t = |x: f64, z: f64| x * z;
        let f = |p: Vec3<f64>| [p[0], p[1] * s(p[0], p[2]).exp() + t(p[0], p[2]), p[2]];
        let p = [0.4, 0.7, -0.3];
        let h = 1e-6;
        let mut j = [[0.0; 3]; 3];
        for c in 0..3 {
            let mut a = p;
            a[c] += h;
            let mut b = p;
            b[c] -= h;
            let (fa, fb) = (f(a), f(b));
            for r in 0..3 {
                j[r][c] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        // Transposed (input-major) form as printed: nonzero (1,2) and (3,2).
        let jt = crate::linalg::transpose(&j);
        assert!(jt[0][1].abs() > 1e-3 && jt[2][1].abs() > 1e-3);
        let lower = jt[0][1] == 0.0 && jt[0][2] == 0.0 && jt[1][2] == 0.0;
        let upper = jt[1][0] == 0.0 && jt[2][0] == 0.0 && jt[2][1] == 0.0;
        assert!(!lower && !upper);

        // The permuted block keeps the same update triangular in its own frame.
        let b = CouplingBlock::constant(1, 0.3f64, 0.5);
        let (_, jb) = b.jacobian_batch(&[p]);
        let jh = {
            let pm = permutation_matrix::<f64>(1);
            matmul(&matmul(&pm, &jb[0]), &crate::linalg::transpose(&pm))
        };
        assert_eq!([jh[0][1], jh[0][2], jh[1][2]], [0.0, 0.0, 0.0]);
        assert!(det(&jb[0]) > 0.0);
    }
}
