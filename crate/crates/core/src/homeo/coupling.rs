//! Affine coupling block conjugated by a cyclic permutation.
//!
//! A block transforming axis `a` reorders `(x, y, z)` so that the two
//! passthrough coordinates come first and the transformed coordinate last,
//! `P·p = (p[a+1], p[a+2], p[a])` (indices mod 3). `P` is a cyclic shift and
//! therefore an even permutation. In the permuted frame the update
//! `w' = w·exp(s(u, v)) + t(u, v)` has a lower-triangular Jacobian with
//! diagonal `(1, 1, exp(s))`.

use std::collections::HashMap;

use rand::Rng;

use super::hash::{HashEncoding2D, HashEncodingConfig};
use super::mlp::{Mlp, MlpCache};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::{cst, Real};

/// Raw scale outputs are clamped to `[-S_CLAMP, S_CLAMP]` before `exp`.
pub const S_CLAMP: f64 = 10.0;

/// `P·p` for a block transforming `axis`.
#[inline]
pub fn permute<T: Copy>(axis: usize, p: [T; 3]) -> [T; 3] {
    [p[(axis + 1) % 3], p[(axis + 2) % 3], p[axis]]
}

/// `P⁻¹·q`.
#[inline]
pub fn unpermute<T: Copy + Default>(axis: usize, q: [T; 3]) -> [T; 3] {
    let mut p = [T::default(); 3];
    p[(axis + 1) % 3] = q[0];
    p[(axis + 2) % 3] = q[1];
    p[axis] = q[2];
    p
}

/// The permutation matrix `P` with `P·p = permute(axis, p)`.
pub fn permutation_matrix<T: Real>(axis: usize) -> Mat3<T> {
    let mut m = [[T::zero(); 3]; 3];
    m[0][(axis + 1) % 3] = T::one();
    m[1][(axis + 2) % 3] = T::one();
    m[2][axis] = T::one();
    m
}

/// Source of the raw `(s, t)` pair of a coupling block.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioner<T: Real> {
    /// Hash encoding of the passthrough pair followed by an MLP.
    Network { encoding: HashEncoding2D<T>, mlp: Mlp<T> },
    /// Input-independent `(s, t)`; handy for analysis and tests.
    Constant { s: T, t: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock<T: Real> {
    axis: usize,
    conditioner: Conditioner<T>,
}

/// Network layer widths for an encoding feeding `hidden` layers of `width`.
pub fn network_sizes(encoding: &HashEncodingConfig, width: usize, hidden: usize) -> Vec<usize> {
    let mut sizes = vec![encoding.output_dim()];
    sizes.extend(std::iter::repeat(width).take(hidden));
    sizes.push(2);
    sizes
}

/// Per-point values a block needs to run backward.
pub struct BlockTape<T: Real> {
    /// Block inputs in the permuted frame, `n × 3`.
    pub inputs: Vec<[T; 3]>,
    /// Raw (unclamped) `s` and `t`.
    pub raw_s: Vec<T>,
    pub t: Vec<T>,
    pub mlp: Option<MlpCache<T>>,
}

/// Per-block parameter gradient.
#[derive(Clone, Debug, Default)]
pub struct BlockGrad<T> {
    pub mlp: Vec<T>,
    pub table: HashMap<usize, T>,
}

impl<T: Real> CouplingBlock<T> {
    pub fn new(axis: usize, conditioner: Conditioner<T>) -> Self {
        assert!(axis < 3);
        Self { axis, conditioner }
    }

    pub fn constant(axis: usize, s: T, t: T) -> Self {
        Self::new(axis, Conditioner::Constant { s, t })
    }

    /// Network conditioner. `output_gain = 0` yields the identity block.
    pub fn network<R: Rng>(
        axis: usize,
        encoding: HashEncodingConfig,
        width: usize,
        hidden: usize,
        table_amplitude: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let enc = HashEncoding2D::random(encoding, table_amplitude, rng);
        let mlp = Mlp::random(network_sizes(&encoding, width, hidden), output_gain, rng);
        Self::new(axis, Conditioner::Network { encoding: enc, mlp })
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn conditioner(&self) -> &Conditioner<T> {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Conditioner<T> {
        &mut self.conditioner
    }

    pub fn n_params(&self) -> usize {
        match &self.conditioner {
            Conditioner::Network { encoding, mlp } => encoding.table().len() + mlp.params().len(),
            Conditioner::Constant { .. } => 0,
        }
    }

    /// Raw `(s, t)` for a batch of passthrough pairs, optionally with the
    /// derivatives `∂(s,t)/∂u`, `∂(s,t)/∂v`.
    fn condition(&self, pairs: &[[T; 2]], with_tangents: bool, keep_cache: bool) -> ConditionOut<T> {
        let n = pairs.len();
        match &self.conditioner {
            Conditioner::Constant { s, t } => ConditionOut {
                st: vec![[*s, *t]; n],
                d_du: vec![[T::zero(); 2]; if with_tangents { n } else { 0 }],
                d_dv: vec![[T::zero(); 2]; if with_tangents { n } else { 0 }],
                cache: None,
            },
            Conditioner::Network { encoding, mlp } => {
                let d = encoding.output_dim();
                let blocks = if with_tangents { 3 } else { 1 };
                let mut x = vec![T::zero(); blocks * n * d];
                {
                    let (vals, rest) = x.split_at_mut(n * d);
                    let (du, dv) = rest.split_at_mut(if with_tangents { n * d } else { 0 });
                    for (p, uv) in pairs.iter().enumerate() {
                        let out = &mut vals[p * d..(p + 1) * d];
                        if with_tangents {
                            encoding.encode(uv[0], uv[1], out, Some((&mut du[p * d..(p + 1) * d], &mut dv[p * d..(p + 1) * d])));
                        } else {
                            encoding.encode(uv[0], uv[1], out, None);
                        }
                    }
                }
                let cache = mlp.forward(&x, blocks * n, n);
                let o = cache.output();
                let st = (0..n).map(|p| [o[2 * p], o[2 * p + 1]]).collect();
                let (d_du, d_dv) = if with_tangents {
                    (
                        (0..n).map(|p| [o[2 * (n + p)], o[2 * (n + p) + 1]]).collect(),
                        (0..n).map(|p| [o[2 * (2 * n + p)], o[2 * (2 * n + p) + 1]]).collect(),
                    )
                } else {
                    (Vec::new(), Vec::new())
                };
                ConditionOut { st, d_du, d_dv, cache: keep_cache.then_some(cache) }
            }
        }
    }

    /// Forward map of a batch of points.
    pub fn forward_batch(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        self.forward_impl(points, false).0
    }

    /// Forward map plus the values needed by [`CouplingBlock::backward`].
    pub fn forward_taped(&self, points: &[Vec3<T>]) -> (Vec<Vec3<T>>, BlockTape<T>) {
        let (out, tape) = self.forward_impl(points, true);
        (out, tape.unwrap())
    }

    fn forward_impl(&self, points: &[Vec3<T>], tape: bool) -> (Vec<Vec3<T>>, Option<BlockTape<T>>) {
        let perm: Vec<[T; 3]> = points.iter().map(|&p| permute(self.axis, p)).collect();
        let pairs: Vec<[T; 2]> = perm.iter().map(|q| [q[0], q[1]]).collect();
        let cond = self.condition(&pairs, false, tape);
        let lim = cst::<T>(S_CLAMP);
        let out = perm
            .iter()
            .zip(&cond.st)
            .map(|(q, st)| {
                let s = st[0].max(-lim).min(lim);
                unpermute(self.axis, [q[0], q[1], q[2] * s.exp() + st[1]])
            })
            .collect();
        let tape = tape.then(|| BlockTape {
            raw_s: cond.st.iter().map(|st| st[0]).collect(),
            t: cond.st.iter().map(|st| st[1]).collect(),
            inputs: perm,
            mlp: cond.cache,
        });
        (out, tape)
    }

    /// Outputs and clamped log-scales `s`, so that `det ∂out/∂in = exp(s)`.
    pub fn forward_log_det(&self, points: &[Vec3<T>]) -> (Vec<Vec3<T>>, Vec<T>) {
        let perm: Vec<[T; 3]> = points.iter().map(|&p| permute(self.axis, p)).collect();
        let pairs: Vec<[T; 2]> = perm.iter().map(|q| [q[0], q[1]]).collect();
        let cond = self.condition(&pairs, false, false);
        let lim = cst::<T>(S_CLAMP);
        perm.iter()
            .zip(&cond.st)
            .map(|(q, st)| {
                let s = st[0].max(-lim).min(lim);
                (unpermute(self.axis, [q[0], q[1], q[2] * s.exp() + st[1]]), s)
            })
            .unzip()
    }

    /// Exact inverse of a batch of points.
    pub fn inverse_batch(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        let perm: Vec<[T; 3]> = points.iter().map(|&p| permute(self.axis, p)).collect();
        let pairs: Vec<[T; 2]> = perm.iter().map(|q| [q[0], q[1]]).collect();
        let cond = self.condition(&pairs, false, false);
        let lim = cst::<T>(S_CLAMP);
        perm.iter()
            .zip(&cond.st)
            .map(|(q, st)| {
                let s = st[0].max(-lim).min(lim);
                unpermute(self.axis, [q[0], q[1], (q[2] - st[1]) * (-s).exp()])
            })
            .collect()
    }

    /// Outputs and Jacobians `∂out/∂in` (original coordinate order) of a
    /// batch of points.
    pub fn jacobian_batch(&self, points: &[Vec3<T>]) -> (Vec<Vec3<T>>, Vec<Mat3<T>>) {
        let perm: Vec<[T; 3]> = points.iter().map(|&p| permute(self.axis, p)).collect();
        let pairs: Vec<[T; 2]> = perm.iter().map(|q| [q[0], q[1]]).collect();
        let cond = self.condition(&pairs, true, false);
        let lim = cst::<T>(S_CLAMP);
        let mut outs = Vec::with_capacity(points.len());
        let mut jacs = Vec::with_capacity(points.len());
        for (i, q) in perm.iter().enumerate() {
            let raw = cond.st[i][0];
            let inside = raw > -lim && raw < lim;
            let s = raw.max(-lim).min(lim);
            let es = s.exp();
            let ds = |d: &[T; 2]| if inside { d[0] } else { T::zero() };
            let d_u = q[2] * es * ds(&cond.d_du[i]) + cond.d_du[i][1];
            let d_v = q[2] * es * ds(&cond.d_dv[i]) + cond.d_dv[i][1];
            // Permuted-frame Jacobian, lower triangular.
            let jh = [[T::one(), T::zero(), T::zero()], [T::zero(), T::one(), T::zero()], [d_u, d_v, es]];
            outs.push(unpermute(self.axis, [q[0], q[1], q[2] * es + cond.st[i][1]]));
            jacs.push(conjugate(self.axis, &jh));
        }
        (outs, jacs)
    }

    /// Backward through one block: given `∂L/∂out` per point (original
    /// order), accumulate parameter gradients and return `∂L/∂in`.
    pub fn backward(&self, tape: &BlockTape<T>, g_out: &[Vec3<T>], grad: &mut BlockGrad<T>) -> Vec<Vec3<T>> {
        let n = tape.inputs.len();
        let lim = cst::<T>(S_CLAMP);
        let mut g_st = vec![T::zero(); 2 * n];
        let mut g_in: Vec<[T; 3]> = Vec::with_capacity(n);
        for i in 0..n {
            let g = permute(self.axis, g_out[i]);
            let q = tape.inputs[i];
            let raw = tape.raw_s[i];
            let es = raw.max(-lim).min(lim).exp();
            g_st[2 * i] = if raw > -lim && raw < lim { g[2] * q[2] * es } else { T::zero() };
            g_st[2 * i + 1] = g[2];
            g_in.push([g[0], g[1], g[2] * es]);
        }
        if let Conditioner::Network { encoding, mlp } = &self.conditioner {
            let cache = tape.mlp.as_ref().expect("tape recorded without network cache");
            if grad.mlp.len() != mlp.params().len() {
                grad.mlp = vec![T::zero(); mlp.params().len()];
            }
            let g_x = mlp.backward(cache, &g_st, &mut grad.mlp);
            let d = encoding.output_dim();
            for i in 0..n {
                let q = tape.inputs[i];
                let (gu, gv) = encoding.backward(q[0], q[1], &g_x[i * d..(i + 1) * d], &mut grad.table);
                g_in[i][0] += gu;
                g_in[i][1] += gv;
            }
        }
        g_in.into_iter().map(|g| unpermute(self.axis, g)).collect()
    }
}

struct ConditionOut<T> {
    st: Vec<[T; 2]>,
    d_du: Vec<[T; 2]>,
    d_dv: Vec<[T; 2]>,
    cache: Option<MlpCache<T>>,
}

/// `P⁻¹·J·P` for the permutation of `axis`.
pub fn conjugate<T: Real>(axis: usize, jh: &Mat3<T>) -> Mat3<T> {
    let mut j = [[T::zero(); 3]; 3];
    let idx = |k: usize| (axis + 1 + k) % 3;
    for r in 0..3 {
        for c in 0..3 {
            j[idx(r)][idx(c)] = jh[r][c];
        }
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{det, matmul};

    #[test]
    fn cyclic_permutation_for_the_y_axis() {
        let p = permutation_matrix::<f64>(1);
        assert_eq!(p, [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(crate::linalg::matvec(&p, [1.0, 2.0, 3.0]), [3.0, 1.0, 2.0]);
        assert_eq!(permute(1, [1.0, 2.0, 3.0]), [3.0, 1.0, 2.0]);
        for axis in 0..3 {
            assert_eq!(det(&permutation_matrix::<f64>(axis)), 1.0);
            assert_eq!(unpermute(axis, permute(axis, [4.0, 5.0, 6.0])), [4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn conjugation_matches_matrix_products() {
        let jh = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, -0.7, 2.0]];
        for axis in 0..3 {
            let p = permutation_matrix::<f64>(axis);
            let pinv = crate::linalg::transpose(&p);
            assert_eq!(conjugate(axis, &jh), matmul(&matmul(&pinv, &jh), &p));
        }
    }

    #[test]
    fn constant_blocks() {
        let id = CouplingBlock::constant(0, 0.0f64, 0.0);
        assert_eq!(id.forward_batch(&[[0.3, -2.0, 5.0]]), vec![[0.3, -2.0, 5.0]]);
        assert_eq!(id.inverse_batch(&[[0.3, -2.0, 5.0]]), vec![[0.3, -2.0, 5.0]]);

        let b = CouplingBlock::constant(1, 2f64.ln(), 1.0);
        let y = b.forward_batch(&[[1.0, 2.0, 3.0]])[0];
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 5.0).abs() < 1e-14 && (y[2] - 3.0).abs() < 1e-15);
        let x = b.inverse_batch(&[[1.0, 5.0, 3.0]])[0];
        assert!((x[1] - 2.0).abs() < 1e-14 && x[0] == 1.0 && x[2] == 3.0);

        let (_, j) = b.jacobian_batch(&[[0.1, 0.2, 0.3]]);
        assert!((det(&j[0]) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn scale_is_clamped() {
        let b = CouplingBlock::constant(2, 50.0f64, 0.0);
        let y = b.forward_batch(&[[0.0, 0.0, 1.0]])[0];
        assert!((y[2] - S_CLAMP.exp()).abs() < 1e-6 * S_CLAMP.exp());
        let x = b.inverse_batch(&[y])[0];
        assert!((x[2] - 1.0).abs() < 1e-12);
    }
}
