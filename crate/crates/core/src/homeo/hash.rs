//! Multiresolution 2D hash-grid encoding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{cst, Real};

const PRIMES: [u32; 2] = [1, 2_654_435_761];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEncodingConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        Self { levels: 8, log2_table_size: 19, features: 2, base_resolution: 16, max_resolution: 1024 }
    }
}

impl HashEncodingConfig {
    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Grid resolution of each level, geometrically spaced from base to max.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| ((self.base_resolution as f64) * (growth * l as f64).exp() + 1e-6).floor() as usize)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.levels * self.table_size() * self.features
    }
}

/// Learnable per-level feature tables indexed by spatially hashed grid
/// corners, bilinearly interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding2D<T: Real> {
    config: HashEncodingConfig,
    resolutions: Vec<usize>,
    /// `levels × table_size × features`, row-major.
    table: Vec<T>,
}

/// Interpolation stencil of one point at one level.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    /// Table slot (not yet multiplied by `features`) of corners 00, 10, 01, 11.
    pub slots: [usize; 4],
    pub weights: [T; 4],
    /// `d weight / du` and `d weight / dv` per corner.
    pub dweights: [[T; 4]; 2],
}

impl<T: Real> HashEncoding2D<T> {
    pub fn new(config: HashEncodingConfig, table: Vec<T>) -> Self {
        assert_eq!(table.len(), config.n_params(), "hash table size mismatch");
        let resolutions = config.resolutions();
        Self { config, resolutions, table }
    }

    /// Table entries uniform in `[-amplitude, amplitude]`.
    pub fn random<R: Rng>(config: HashEncodingConfig, amplitude: f64, rng: &mut R) -> Self {
        let table = (0..config.n_params()).map(|_| cst(rng.gen_range(-amplitude..=amplitude))).collect();
        Self::new(config, table)
    }

    pub fn config(&self) -> &HashEncodingConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn table(&self) -> &[T] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [T] {
        &mut self.table
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    #[inline]
    fn slot(&self, ix: usize, iy: usize) -> usize {
        let h = (ix as u32).wrapping_mul(PRIMES[0]) ^ (iy as u32).wrapping_mul(PRIMES[1]);
        (h as usize) & (self.config.table_size() - 1)
    }

    /// Stencil at `level` for normalized coordinates `(u, v)`; inputs outside
    /// `[0, 1]` are clamped (zero derivative along a clamped axis).
    pub fn stencil(&self, level: usize, u: T, v: T) -> Stencil<T> {
        let res = self.resolutions[level];
        let resf = cst::<T>(res as f64);
        let mut cell = [0usize; 2];
        let mut frac = [T::zero(); 2];
        let mut dfrac = [T::zero(); 2];
        for (d, &c) in [u, v].iter().enumerate() {
            let inside = c >= T::zero() && c <= T::one();
            let x = c.max(T::zero()).min(T::one()) * resf;
            let i = x.floor().to_usize().unwrap_or(0).min(res - 1);
            cell[d] = i;
            frac[d] = x - cst(i as f64);
            dfrac[d] = if inside { resf } else { T::zero() };
        }
        let one = T::one();
        let (fx, fy) = (frac[0], frac[1]);
        let weights = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
        let dweights = [
            [-(one - fy) * dfrac[0], (one - fy) * dfrac[0], -fy * dfrac[0], fy * dfrac[0]],
            [-(one - fx) * dfrac[1], -fx * dfrac[1], (one - fx) * dfrac[1], fx * dfrac[1]],
        ];
        let slots = [
            self.slot(cell[0], cell[1]),
            self.slot(cell[0] + 1, cell[1]),
            self.slot(cell[0], cell[1] + 1),
            self.slot(cell[0] + 1, cell[1] + 1),
        ];
        Stencil { slots, weights, dweights }
    }

    #[inline]
    fn entry(&self, level: usize, slot: usize, f: usize) -> T {
        self.table[(level * self.config.table_size() + slot) * self.config.features + f]
    }

    /// Encode a single point into `out` (length `levels·features`); when
    /// `tangents` is given, also write `∂out/∂u` and `∂out/∂v`.
    pub fn encode(&self, u: T, v: T, out: &mut [T], mut tangents: Option<(&mut [T], &mut [T])>) {
        let nf = self.config.features;
        for l in 0..self.config.levels {
            let st = self.stencil(l, u, v);
            for f in 0..nf {
                let vals = [
                    self.entry(l, st.slots[0], f),
                    self.entry(l, st.slots[1], f),
                    self.entry(l, st.slots[2], f),
                    self.entry(l, st.slots[3], f),
                ];
                let mut acc = T::zero();
                for c in 0..4 {
                    acc += st.weights[c] * vals[c];
                }
                out[l * nf + f] = acc;
                if let Some((du, dv)) = tangents.as_mut() {
                    let mut a = T::zero();
                    let mut b = T::zero();
                    for c in 0..4 {
                        a += st.dweights[0][c] * vals[c];
                        b += st.dweights[1][c] * vals[c];
                    }
                    du[l * nf + f] = a;
                    dv[l * nf + f] = b;
                }
            }
        }
    }

    /// Accumulate `∂L/∂table` (sparse, keyed by flat table index) and return
    /// `(∂L/∂u, ∂L/∂v)` for one point given `∂L/∂out`.
    pub fn backward(&self, u: T, v: T, g_out: &[T], g_table: &mut HashMap<usize, T>) -> (T, T) {
        let nf = self.config.features;
        let ts = self.config.table_size();
        let mut gu = T::zero();
        let mut gv = T::zero();
        for l in 0..self.config.levels {
            let st = self.stencil(l, u, v);
            for f in 0..nf {
                let g = g_out[l * nf + f];
                if g == T::zero() {
                    continue;
                }
                for c in 0..4 {
                    let idx = (l * ts + st.slots[c]) * nf + f;
                    *g_table.entry(idx).or_insert_with(T::zero) += st.weights[c] * g;
                    let val = self.table[idx];
                    gu += st.dweights[0][c] * val * g;
                    gv += st.dweights[1][c] * val * g;
                }
            }
        }
        (gu, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> HashEncodingConfig {
        HashEncodingConfig { levels: 4, log2_table_size: 10, features: 2, base_resolution: 4, max_resolution: 64 }
    }

    #[test]
    fn resolutions_are_geometric_and_hit_the_bounds() {
        let r = HashEncodingConfig::default().resolutions();
        assert_eq!(r.len(), 8);
        assert_eq!(r[0], 16);
        assert_eq!(r[7], 1024);
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(small().resolutions(), vec![4, 10, 25, 64]);
    }

    #[test]
    fn output_length_and_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = HashEncoding2D::<f64>::random(small(), 1.0, &mut rng);
        let mut out = vec![0.0; enc.output_dim()];
        enc.encode(0.3, 0.7, &mut out, None);
        assert_eq!(out.len(), 8);
        for _ in 0..100 {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            for l in 0..4 {
                let st = enc.stencil(l, u, v);
                assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                assert!(st.weights.iter().all(|&w| w >= 0.0));
                assert!(st.dweights[0].iter().sum::<f64>().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_table_encodes_constant() {
        let cfg = small();
        let enc = HashEncoding2D::new(cfg, vec![0.25f64; cfg.n_params()]);
        let mut out = vec![0.0; enc.output_dim()];
        enc.encode(0.123, 0.987, &mut out, None);
        assert!(out.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn tangents_and_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = HashEncoding2D::<f64>::random(small(), 1.0, &mut rng);
        let n = enc.output_dim();
        let g_out: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (u, v) = (0.4137, 0.6021);
        let mut out = vec![0.0; n];
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        enc.encode(u, v, &mut out, Some((&mut du, &mut dv)));
        let h = 1e-7;
        let eval = |u: f64, v: f64| {
            let mut o = vec![0.0; n];
            enc.encode(u, v, &mut o, None);
            o
        };
        let (op, om) = (eval(u + h, v), eval(u - h, v));
        for i in 0..n {
            assert!(((op[i] - om[i]) / (2.0 * h) - du[i]).abs() < 1e-6);
        }
        let mut g_table = HashMap::new();
        let (gu, gv) = enc.backward(u, v, &g_out, &mut g_table);
        let dot = |o: &[f64]| o.iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>();
        let fd_u = (dot(&eval(u + h, v)) - dot(&eval(u - h, v))) / (2.0 * h);
        let fd_v = (dot(&eval(u, v + h)) - dot(&eval(u, v - h))) / (2.0 * h);
        assert!((fd_u - gu).abs() < 1e-6 && (fd_v - gv).abs() < 1e-6);
        // Table gradient: the encoding is linear in the table.
        for (&idx, &g) in g_table.iter().take(10) {
            let mut e2 = enc.clone();
            e2.table_mut()[idx] += 1.0;
            let mut o = vec![0.0; n];
            e2.encode(u, v, &mut o, None);
            assert!((dot(&o) - dot(&out) - g).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_inputs_have_zero_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = HashEncoding2D::<f64>::random(small(), 1.0, &mut rng);
        let n = enc.output_dim();
        let (mut o, mut du, mut dv) = (vec![0.0; n], vec![1.0; n], vec![1.0; n]);
        enc.encode(1.3, -0.2, &mut o, Some((&mut du, &mut dv)));
        assert!(du.iter().chain(dv.iter()).all(|&x| x == 0.0));
        let mut o2 = vec![0.0; n];
        enc.encode(1.0, 0.0, &mut o2, None);
        assert_eq!(o, o2);
    }
}
