//! Real spherical harmonics up to degree 3 (3DGS basis and sign convention).
//!
//! Coefficients of one vertex are stored coefficient-major: entry `k·3 + c`
//! is basis function `k` of colour channel `c`.

use crate::linalg::Vec3;
use crate::scalar::{cst, Real};

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [1.092_548_430_592_079_2, -1.092_548_430_592_079_2, 0.315_391_565_252_520_05, -1.092_548_430_592_079_2, 0.546_274_215_296_039_6];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for `degree`.
pub fn n_basis(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Floats per vertex for `degree`.
pub fn n_coeffs(degree: usize) -> usize {
    3 * n_basis(degree)
}

/// Basis values at the unit direction `d`, and optionally their gradients
/// with respect to `d` (treating its components as independent).
pub fn basis<T: Real>(degree: usize, d: Vec3<T>, out: &mut [T; 16], grad: Option<&mut [Vec3<T>; 16]>) {
    let [x, y, z] = d;
    let c = |v: f64| cst::<T>(v);
    let (two, three, four, six, eight) = (c(2.0), c(3.0), c(4.0), c(6.0), c(8.0));
    let zero = T::zero();
    out[0] = c(C0);
    let mut g = [[zero; 3]; 16];
    if degree >= 1 {
        out[1] = -c(C1) * y;
        out[2] = c(C1) * z;
        out[3] = -c(C1) * x;
        g[1] = [zero, -c(C1), zero];
        g[2] = [zero, zero, c(C1)];
        g[3] = [-c(C1), zero, zero];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = c(C2[0]) * x * y;
        out[5] = c(C2[1]) * y * z;
        out[6] = c(C2[2]) * (two * zz - xx - yy);
        out[7] = c(C2[3]) * x * z;
        out[8] = c(C2[4]) * (xx - yy);
        g[4] = [c(C2[0]) * y, c(C2[0]) * x, zero];
        g[5] = [zero, c(C2[1]) * z, c(C2[1]) * y];
        g[6] = [-two * c(C2[2]) * x, -two * c(C2[2]) * y, four * c(C2[2]) * z];
        g[7] = [c(C2[3]) * z, zero, c(C2[3]) * x];
        g[8] = [two * c(C2[4]) * x, -two * c(C2[4]) * y, zero];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[9] = c(C3[0]) * y * (three * xx - yy);
        out[10] = c(C3[1]) * x * y * z;
        out[11] = c(C3[2]) * y * (four * zz - xx - yy);
        out[12] = c(C3[3]) * z * (two * zz - three * xx - three * yy);
        out[13] = c(C3[4]) * x * (four * zz - xx - yy);
        out[14] = c(C3[5]) * z * (xx - yy);
        out[15] = c(C3[6]) * x * (xx - three * yy);
        g[9] = [c(C3[0]) * six * x * y, c(C3[0]) * (three * xx - three * yy), zero];
        g[10] = [c(C3[1]) * y * z, c(C3[1]) * x * z, c(C3[1]) * x * y];
        g[11] = [-c(C3[2]) * two * x * y, c(C3[2]) * (four * zz - xx - three * yy), c(C3[2]) * eight * y * z];
        g[12] = [-c(C3[3]) * six * x * z, -c(C3[3]) * six * y * z, c(C3[3]) * (six * zz - three * xx - three * yy)];
        g[13] = [c(C3[4]) * (four * zz - three * xx - yy), -c(C3[4]) * two * x * y, c(C3[4]) * eight * x * z];
        g[14] = [c(C3[5]) * two * x * z, -c(C3[5]) * two * y * z, c(C3[5]) * (xx - yy)];
        g[15] = [c(C3[6]) * (three * xx - three * yy), -c(C3[6]) * six * x * y, zero];
    }
    if let Some(gr) = grad {
        *gr = g;
    }
}

/// Colour (without the +0.5 shift) of one coefficient set along the
/// unnormalized direction `dir`.
pub fn eval<T: Real>(degree: usize, coeffs: &[T], dir: Vec3<T>) -> [T; 3] {
    let n = crate::linalg::norm(dir);
    let d = if n > T::zero() { crate::linalg::scale(dir, T::one() / n) } else { [T::zero(), T::zero(), T::one()] };
    let mut b = [T::zero(); 16];
    basis(degree, d, &mut b, None);
    let mut c = [T::zero(); 3];
    for k in 0..n_basis(degree) {
        for ch in 0..3 {
            c[ch] += b[k] * coeffs[3 * k + ch];
        }
    }
    c
}

/// Backward of [`eval`]: accumulates `∂L/∂coeffs` into `g_coeffs` and returns
/// `∂L/∂dir`.
pub fn eval_backward<T: Real>(degree: usize, coeffs: &[T], dir: Vec3<T>, g_color: [T; 3], g_coeffs: &mut [T]) -> Vec3<T> {
    let n = crate::linalg::norm(dir);
    if n <= T::zero() {
        return [T::zero(); 3];
    }
    let d = crate::linalg::scale(dir, T::one() / n);
    let mut b = [T::zero(); 16];
    let mut gb = [[T::zero(); 3]; 16];
    basis(degree, d, &mut b, Some(&mut gb));
    let mut g_d = [T::zero(); 3];
    for k in 0..n_basis(degree) {
        let mut s = T::zero();
        for ch in 0..3 {
            g_coeffs[3 * k + ch] += b[k] * g_color[ch];
            s += coeffs[3 * k + ch] * g_color[ch];
        }
        for a in 0..3 {
            g_d[a] += s * gb[k][a];
        }
    }
    // d = dir/|dir|  ⇒  ∂L/∂dir = (I − d dᵀ) g_d / |dir|
    let dd = crate::linalg::dot(d, g_d);
    [(g_d[0] - d[0] * dd) / n, (g_d[1] - d[1] * dd) / n, (g_d[2] - d[2] * dd) / n]
}

/// DC coefficient that encodes `rgb` (after the +0.5 shift).
pub fn rgb_to_dc<T: Real>(rgb: T) -> T {
    (rgb - cst(0.5)) / cst(C0)
}
