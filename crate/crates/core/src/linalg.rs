//! Small fixed-size vector, matrix and quaternion helpers.
//!
//! Points are `[T; 3]`, matrices row-major `[[T; 3]; 3]`, quaternions
//! `[w, x, y, z]`.

use crate::scalar::{cst, Real};

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];
pub type Quat<T> = [T; 4];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy<T: Real>(acc: &mut Vec3<T>, s: T, x: Vec3<T>) {
    acc[0] += s * x[0];
    acc[1] += s * x[1];
    acc[2] += s * x[2];
}

pub fn zero3<T: Real>() -> Vec3<T> {
    [T::zero(); 3]
}

pub fn zero_mat<T: Real>() -> Mat3<T> {
    [[T::zero(); 3]; 3]
}

pub fn identity<T: Real>() -> Mat3<T> {
    let mut m = zero_mat();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn det<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = zero_mat();
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn matmul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = zero_mat();
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn matvec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `mᵀ·v`
pub fn matvec_t<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn outer<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Mat3<T> {
    let mut m = zero_mat();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i] * b[j];
        }
    }
    m
}

pub fn mat_add<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] += b[i][j];
        }
    }
    c
}

pub fn mat_scale<T: Real>(a: &Mat3<T>, s: T) -> Mat3<T> {
    let mut c = *a;
    for row in c.iter_mut() {
        for x in row.iter_mut() {
            *x *= s;
        }
    }
    c
}

pub fn frobenius<T: Real>(a: &Mat3<T>) -> T {
    a.iter().flatten().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Inverse via the adjugate; `None` when `|det| <= tiny`.
pub fn inverse<T: Real>(m: &Mat3<T>) -> Option<Mat3<T>> {
    let d = det(m);
    if d.abs() <= T::min_positive_value() {
        return None;
    }
    let inv_d = T::one() / d;
    let mut r = zero_mat();
    r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
    r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
    r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
    r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
    r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
    r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
    r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
    r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
    r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
    Some(r)
}

/// Matrix with the given columns.
pub fn from_cols<T: Real>(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Mat3<T> {
    [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]]
}

pub fn col<T: Real>(m: &Mat3<T>, j: usize) -> Vec3<T> {
    [m[0][j], m[1][j], m[2][j]]
}

pub fn quat_norm<T: Real>(q: Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit quaternion; the zero quaternion maps to the identity.
pub fn quat_normalize<T: Real>(q: Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    if n <= T::min_positive_value() {
        return [T::one(), T::zero(), T::zero(), T::zero()];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul<T: Real>(a: Quat<T>, b: Quat<T>) -> Quat<T> {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj<T: Real>(q: Quat<T>) -> Quat<T> {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat<T: Real>(q: Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = cst::<T>(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Pull a gradient on `R = quat_to_mat(q)` back onto the (unit) quaternion
/// components.
pub fn quat_to_mat_backward<T: Real>(q: Quat<T>, g: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = q;
    let two = cst::<T>(2.0);
    let four = cst::<T>(4.0);
    let gw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - four * x * (g[1][1] + g[2][2]);
    let gy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - four * y * (g[0][0] + g[2][2]);
    let gz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - four * z * (g[0][0] + g[1][1]);
    [gw, gx, gy, gz]
}

/// Backward of `quat_normalize`: gradient on the raw quaternion given the
/// gradient on its normalized version.
pub fn quat_normalize_backward<T: Real>(raw: Quat<T>, g_unit: Quat<T>) -> Quat<T> {
    let n = quat_norm(raw);
    if n <= T::min_positive_value() {
        return [T::zero(); 4];
    }
    let u = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let d = u[0] * g_unit[0] + u[1] * g_unit[1] + u[2] * g_unit[2] + u[3] * g_unit[3];
    [
        (g_unit[0] - u[0] * d) / n,
        (g_unit[1] - u[1] * d) / n,
        (g_unit[2] - u[2] * d) / n,
        (g_unit[3] - u[3] * d) / n,
    ]
}

/// Unit quaternion of a proper rotation matrix (Shepperd's method), with
/// non-negative `w`.
pub fn mat_to_quat<T: Real>(m: &Mat3<T>) -> Quat<T> {
    let one = T::one();
    let quarter = cst::<T>(0.25);
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * cst::<T>(2.0);
        [
            quarter * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * cst::<T>(2.0);
        [
            (m[2][1] - m[1][2]) / s,
            quarter * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * cst::<T>(2.0);
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            quarter * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * cst::<T>(2.0);
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            quarter * s,
        ]
    };
    let q = quat_normalize(q);
    if q[0] < T::zero() {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as the columns of
/// the returned matrix, so `m = V·diag(λ)·Vᵀ`. Order is unspecified.
pub fn sym_eigen<T: Real>(m: &Mat3<T>) -> (Vec3<T>, Mat3<T>) {
    let mut a = *m;
    let mut v = identity::<T>();
    let scale_ref = frobenius(m);
    if scale_ref == T::zero() {
        return (zero3(), v);
    }
    for _sweep in 0..64 {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off <= T::epsilon() * scale_ref * cst::<T>(1e-3) {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == T::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (cst::<T>(2.0) * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;
            // a ← Jᵀ a J with J the Givens rotation in the (p, q) plane.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Rotation factor `R` of the polar decomposition `F = R·S` for `det F > 0`.
/// Returns `None` when `F` is singular or reflecting.
pub fn polar_rotation<T: Real>(f: &Mat3<T>) -> Option<Mat3<T>> {
    if det(f) <= T::zero() {
        return None;
    }
    let mut r = *f;
    let half = cst::<T>(0.5);
    for _ in 0..100 {
        let inv_t = transpose(&inverse(&r)?);
        let next = mat_scale(&mat_add(&r, &inv_t), half);
        let mut diff = next;
        for i in 0..3 {
            for j in 0..3 {
                diff[i][j] -= r[i][j];
            }
        }
        r = next;
        if frobenius(&diff) <= T::epsilon() * cst::<T>(16.0) {
            break;
        }
    }
    Some(r)
}
