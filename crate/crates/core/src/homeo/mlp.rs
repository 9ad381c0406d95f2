//! Fully connected ReLU network evaluated in batches through GEMM.
//!
//! Parameters are stored flat, layer by layer: `W` (`out × in`, row-major)
//! followed by `b` (`out`). The last layer is linear.

use rand::Rng;

use crate::scalar::{cst, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct MlpCache<T> {
    /// Post-activation output of every layer, input included; each entry has
    /// `rows × width` values.
    pub activations: Vec<Vec<T>>,
    pub rows: usize,
    pub value_rows: usize,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().unwrap()
    }
}

impl<T: Real> Mlp<T> {
    pub fn n_params_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<T>) -> Self {
        assert!(sizes.len() >= 2);
        assert_eq!(params.len(), Self::n_params_for(&sizes), "mlp parameter count mismatch");
        Self { sizes, params }
    }

    /// He-uniform hidden layers; the output layer is scaled by `output_gain`
    /// (zero gives a network that outputs exactly zero).
    pub fn random<R: Rng>(sizes: Vec<usize>, output_gain: f64, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::n_params_for(&sizes));
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = (6.0 / w[0] as f64).sqrt() * if l + 1 == n_layers { output_gain } else { 1.0 };
            for _ in 0..w[0] * w[1] {
                params.push(if bound == 0.0 { T::zero() } else { cst(rng.gen_range(-bound..=bound)) });
            }
            params.extend(std::iter::repeat(T::zero()).take(w[1]));
        }
        Self { sizes, params }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.sizes.len());
        let mut o = 0;
        off.push(0);
        for w in self.sizes.windows(2) {
            o += w[0] * w[1] + w[1];
            off.push(o);
        }
        off
    }

    /// Range of the output layer's parameters.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let off = self.layer_offsets();
        let n = off.len();
        off[n - 2]..off[n - 1]
    }

    /// Forward pass over `rows` stacked input rows (`rows × in`).
    ///
    /// The first `value_rows` rows are ordinary inputs. Any further rows are
    /// treated as tangent vectors (forward-mode derivatives) of the value rows,
    /// block by block: row `k·value_rows + p` is a tangent at value row `p`.
    /// Tangent rows get no bias and reuse the ReLU mask of their value row.
    pub fn forward(&self, input: &[T], rows: usize, value_rows: usize) -> MlpCache<T> {
        assert_eq!(input.len(), rows * self.sizes[0]);
        assert!(value_rows > 0 && rows % value_rows == 0);
        let off = self.layer_offsets();
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for l in 0..n_layers {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off[l]..off[l] + din * dout];
            let b = &self.params[off[l] + din * dout..off[l + 1]];
            let x = activations.last().unwrap();
            let mut y = vec![T::zero(); rows * dout];
            // y = x · Wᵀ
            T::gemm(rows, din, dout, T::one(), x, din as isize, 1, w, 1, din as isize, T::zero(), &mut y, dout as isize, 1);
            for row in y[..value_rows * dout].chunks_exact_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(b) {
                    *o += bb;
                }
            }
            if l + 1 < n_layers {
                let (vals, tans) = y.split_at_mut(value_rows * dout);
                for t in tans.chunks_exact_mut(value_rows * dout) {
                    for (tv, &v) in t.iter_mut().zip(vals.iter()) {
                        if v <= T::zero() {
                            *tv = T::zero();
                        }
                    }
                }
                for v in vals.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            activations.push(y);
        }
        MlpCache { activations, rows, value_rows }
    }

    /// Backward pass over the value rows of `cache`. Accumulates parameter
    /// gradients into `grad` and returns `∂L/∂input` (`value_rows × in`).
    pub fn backward(&self, cache: &MlpCache<T>, g_out: &[T], grad: &mut [T]) -> Vec<T> {
        let b = cache.value_rows;
        let off = self.layer_offsets();
        let n_layers = self.sizes.len() - 1;
        assert_eq!(g_out.len(), b * self.output_dim());
        assert_eq!(grad.len(), self.params.len());
        let mut g = g_out.to_vec();
        for l in (0..n_layers).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let x = &cache.activations[l][..b * din];
            let w = &self.params[off[l]..off[l] + din * dout];
            {
                let (gw, gb) = grad[off[l]..off[l + 1]].split_at_mut(din * dout);
                // gW += gᵀ · x   (dout × din)
                T::gemm(dout, b, din, T::one(), &g, 1, dout as isize, x, din as isize, 1, T::one(), gw, din as isize, 1);
                for row in g.chunks_exact(dout) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            // g_in = g · W   (b × din)
            let mut gi = vec![T::zero(); b * din];
            T::gemm(b, dout, din, T::one(), &g, dout as isize, 1, w, din as isize, 1, T::zero(), &mut gi, din as isize, 1);
            if l > 0 {
                for (gv, &a) in gi.iter_mut().zip(x.iter()) {
                    if a <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            g = gi;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut o = 0;
        let n = m.sizes().len() - 1;
        for l in 0..n {
            let (din, dout) = (m.sizes()[l], m.sizes()[l + 1]);
            let p = m.params();
            let mut y = vec![0.0; dout];
            for j in 0..dout {
                y[j] = p[o + din * dout + j] + (0..din).map(|i| p[o + j * din + i] * a[i]).sum::<f64>();
                if l + 1 < n {
                    y[j] = y[j].max(0.0);
                }
            }
            o += din * dout + dout;
            a = y;
        }
        a
    }

    #[test]
    fn batched_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mlp::<f64>::random(vec![5, 7, 6, 2], 1.0, &mut rng);
        for p in m.params_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = m.forward(&x, 3, 3);
        for r in 0..3 {
            let n = naive(&m, &x[r * 5..r * 5 + 5]);
            assert!((n[0] - c.output()[r * 2]).abs() < 1e-12 && (n[1] - c.output()[r * 2 + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_gain_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::<f64>::random(vec![4, 8, 2], 0.0, &mut rng);
        let c = m.forward(&[0.3, -1.0, 2.0, 0.5], 1, 1);
        assert_eq!(c.output(), &[0.0, 0.0]);
    }

    #[test]
    fn tangents_and_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mlp::<f64>::random(vec![4, 16, 16, 2], 1.0, &mut rng);
        for p in m.params_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut stacked = x.clone();
        stacked.extend(&dir);
        let c = m.forward(&stacked, 2, 1);
        let h = 1e-7;
        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
        let (np, nm) = (naive(&m, &xp), naive(&m, &xm));
        for k in 0..2 {
            assert!(((np[k] - nm[k]) / (2.0 * h) - c.output()[2 + k]).abs() < 1e-6);
        }

        let g_out = [0.7, -1.3];
        let c = m.forward(&x, 1, 1);
        let mut grad = vec![0.0; m.params().len()];
        let gx = m.backward(&c, &g_out, &mut grad);
        let loss = |m: &Mlp<f64>, x: &[f64]| {
            let o = naive(m, x);
            o[0] * g_out[0] + o[1] * g_out[1]
        };
        for i in 0..4 {
            let mut a = x.clone();
            a[i] += h;
            let mut b = x.clone();
            b[i] -= h;
            assert!(((loss(&m, &a) - loss(&m, &b)) / (2.0 * h) - gx[i]).abs() < 1e-6);
        }
        for i in (0..m.params().len()).step_by(7) {
            let mut mp = m.clone();
            mp.params_mut()[i] += h;
            let mut mm = m.clone();
            mm.params_mut()[i] -= h;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
