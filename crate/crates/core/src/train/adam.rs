//! Adam with dense and sparse (touched entries only) updates.

use serde::{Deserialize, Serialize};

use crate::scalar::{cst, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Grow to `n` entries; new moments start at zero.
    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, T::zero());
        self.v.resize(n, T::zero());
    }

    fn corrections(&mut self) -> (T, T) {
        self.step += 1;
        let t = self.step as i32;
        (cst(1.0 - BETA1.powi(t)), cst(1.0 - BETA2.powi(t)))
    }

    #[inline]
    fn update(&mut self, i: usize, p: &mut T, g: T, bc1: T, bc2: T) {
        let (b1, b2) = (cst::<T>(BETA1), cst::<T>(BETA2));
        self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
        self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
        let mh = self.m[i] / bc1;
        let vh = self.v[i] / bc2;
        *p -= cst::<T>(self.lr) * mh / (vh.sqrt() + cst(EPS));
    }

    pub fn step_dense(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        let (bc1, bc2) = self.corrections();
        if self.lr == 0.0 {
            return;
        }
        for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            self.update(i, p, g, bc1, bc2);
        }
    }

    /// Update only the listed entries (indices must be distinct); the
    /// others keep their moments, as in lazy/sparse Adam.
    pub fn step_sparse(&mut self, params: &mut [T], grad: &[(usize, T)]) {
        let (bc1, bc2) = self.corrections();
        if self.lr == 0.0 {
            return;
        }
        for &(i, g) in grad {
            self.update(i, &mut params[i], g, bc1, bc2);
        }
    }
}
