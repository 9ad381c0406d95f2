//! Loss terms and their gradients.

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::{cst, Real};
use crate::tetmesh::{quality_gamma, quality_gamma_grad, signed_volume, signed_volume_grad, tet_points};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// Mean absolute difference and its gradient with respect to `img`.
pub fn l1<T: Real>(img: &[T], gt: &[T]) -> Result<(T, Vec<T>)> {
    check_len(img.len(), gt.len(), "l1")?;
    let n = cst::<T>(img.len().max(1) as f64);
    let mut sum = T::zero();
    let grad = img
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = a - b;
            sum += d.abs();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mask loss: mean `|M − M̂|` over pixels, with gradient.
pub fn mask<T: Real>(alpha: &[T], gt_mask: &[T]) -> Result<(T, Vec<T>)> {
    check_len(alpha.len(), gt_mask.len(), "mask")?;
    l1(alpha, gt_mask)
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable zero-padded blur of one plane. The kernel is symmetric, so this
/// operator is self-adjoint.
fn blur<T: Real>(src: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for d in -r..=r {
                let xx = x as isize + d;
                if xx >= 0 && (xx as usize) < w {
                    acc += k[(d + r) as usize] * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for d in -r..=r {
                let yy = y as isize + d;
                if yy >= 0 && (yy as usize) < h {
                    acc += k[(d + r) as usize] * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels of interleaved images with `channels`
/// channels, and its gradient with respect to `img`. Gaussian 11×11 window,
/// σ = 1.5, zero padding, C1 = 0.01², C2 = 0.03².
pub fn ssim<T: Real>(img: &[T], gt: &[T], width: usize, height: usize, channels: usize) -> Result<(T, Vec<T>)> {
    check_len(img.len(), gt.len(), "ssim")?;
    check_len(img.len(), width * height * channels, "ssim image size")?;
    let k: Vec<T> = gaussian_kernel().iter().map(|&v| cst(v)).collect();
    let n = width * height;
    let total = cst::<T>((n * channels).max(1) as f64);
    let (c1, c2, two) = (cst::<T>(C1), cst::<T>(C2), cst::<T>(2.0));
    let mut value = T::zero();
    let mut grad = vec![T::zero(); img.len()];
    for ch in 0..channels {
        let x: Vec<T> = (0..n).map(|i| img[i * channels + ch]).collect();
        let y: Vec<T> = (0..n).map(|i| gt[i * channels + ch]).collect();
        let mx = blur(&x, width, height, &k);
        let my = blur(&y, width, height, &k);
        let xx = blur(&x.iter().map(|&v| v * v).collect::<Vec<_>>(), width, height, &k);
        let yy = blur(&y.iter().map(|&v| v * v).collect::<Vec<_>>(), width, height, &k);
        let xy = blur(&x.iter().zip(&y).map(|(&a, &b)| a * b).collect::<Vec<_>>(), width, height, &k);
        let mut ga = vec![T::zero(); n];
        let mut gb = vec![T::zero(); n];
        let mut gc = vec![T::zero(); n];
        for p in 0..n {
            let (mux, muy) = (mx[p], my[p]);
            let vx = xx[p] - mux * mux;
            let vy = yy[p] - muy * muy;
            let cxy = xy[p] - mux * muy;
            let n1 = two * mux * muy + c1;
            let n2 = two * cxy + c2;
            let d1 = mux * mux + muy * muy + c1;
            let d2 = vx + vy + c2;
            let s = n1 * n2 / (d1 * d2);
            value += s;
            let ds_dmux = two * muy * n2 / (d1 * d2) - s * two * mux / d1;
            let ds_dvx = -s / d2;
            let ds_dcxy = two * n1 / (d1 * d2);
            ga[p] = ds_dmux - two * mux * ds_dvx - muy * ds_dcxy;
            gb[p] = ds_dvx;
            gc[p] = ds_dcxy;
        }
        let ba = blur(&ga, width, height, &k);
        let bb = blur(&gb, width, height, &k);
        let bc = blur(&gc, width, height, &k);
        for q in 0..n {
            grad[q * channels + ch] = (ba[q] + two * x[q] * bb[q] + y[q] * bc[q]) / total;
        }
    }
    Ok((value / total, grad))
}

/// `1 − SSIM` and its gradient.
pub fn ssim_loss<T: Real>(img: &[T], gt: &[T], width: usize, height: usize, channels: usize) -> Result<(T, Vec<T>)> {
    let (s, mut g) = ssim(img, gt, width, height, channels)?;
    g.iter_mut().for_each(|v| *v = -*v);
    Ok((T::one() - s, g))
}

/// Quality hinge `(1/K) Σ max(r − Q_k, 0)` over tets and its gradient with
/// respect to `positions`.
pub fn quality<T: Real>(positions: &[Vec3<T>], tets: &[[usize; 4]], r: T) -> (T, Vec<Vec3<T>>) {
    let k = cst::<T>(tets.len().max(1) as f64);
    let mut value = T::zero();
    let mut grad = vec![[T::zero(); 3]; positions.len()];
    for t in tets {
        let p = tet_points(positions, t);
        let q = quality_gamma(&p);
        if q < r {
            value += r - q;
            let g = quality_gamma_grad(&p);
            for i in 0..4 {
                for d in 0..3 {
                    grad[t[i]][d] -= g[i][d] / k;
                }
            }
        }
    }
    (value / k, grad)
}

/// Signed-volume penalty `(1/K) Σ max(−V_k, 0)` and its gradient.
pub fn signed_volume_penalty<T: Real>(positions: &[Vec3<T>], tets: &[[usize; 4]]) -> (T, Vec<Vec3<T>>) {
    let k = cst::<T>(tets.len().max(1) as f64);
    let mut value = T::zero();
    let mut grad = vec![[T::zero(); 3]; positions.len()];
    for t in tets {
        let p = tet_points(positions, t);
        let v = signed_volume(p[0], p[1], p[2], p[3]);
        if v < T::zero() {
            value -= v;
            let g = signed_volume_grad(&p);
            for i in 0..4 {
                for d in 0..3 {
                    grad[t[i]][d] -= g[i][d] / k;
                }
            }
        }
    }
    (value / k, grad)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`, capped at 100.
pub fn psnr<T: Real>(img: &[T], gt: &[T]) -> f64 {
    let n = img.len().max(1) as f64;
    let mse: f64 = img
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = crate::scalar::to_f64(a - b);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 1e-10 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_and_mask_examples() {
        let gt = vec![0.2f64; 12];
        let img: Vec<f64> = gt.iter().map(|v| v + 0.1).collect();
        assert!((l1(&img, &gt).unwrap().0 - 0.1).abs() < 1e-15);
        assert_eq!(l1(&gt, &gt).unwrap().0, 0.0);
        assert!(l1(&gt, &gt[..3]).is_err());
        assert_eq!(mask(&[1.0f64; 4], &[0.0; 4]).unwrap().0, 1.0);
        assert_eq!(mask(&[0.5f64, 0.5, 1.0, 1.0], &[1.0; 4]).unwrap().0, 0.25);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (128, 128);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let (l, _) = ssim_loss(&a, &a, w, h, 3).unwrap();
        assert!(l.abs() < 1e-12);
        let (l, _) = ssim_loss(&a, &b, w, h, 3).unwrap();
        assert!((l - 1.0).abs() < 0.1, "{l}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (13, 9);
        let a: Vec<f64> = (0..w * h * 2).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h * 2).map(|_| rng.gen()).collect();
        let (_, g) = ssim(&a, &b, w, h, 2).unwrap();
        let eps = 1e-6;
        for i in (0..a.len()).step_by(7) {
            let mut p = a.clone();
            p[i] += eps;
            let mut m = a.clone();
            m[i] -= eps;
            let fd = (ssim(&p, &b, w, h, 2).unwrap().0 - ssim(&m, &b, w, h, 2).unwrap().0) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-4), "{i}: {fd} vs {}", g[i]);
        }
    }

    fn regular() -> (Vec<Vec3<f64>>, Vec<[usize; 4]>) {
        (vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0]], vec![[0, 1, 2, 3]])
    }

    #[test]
    fn quality_examples_and_gradient() {
        let (p, t) = regular();
        assert_eq!(quality(&p, &t, 0.8).0, 0.0);
        // Squash the tet until Q = 0.5, then check the hinge value.
        let q_of = |s: f64| {
            let pts: Vec<Vec3<f64>> = p.iter().map(|v| [v[0], v[1], v[2] * s]).collect();
            quality_gamma(&[pts[0], pts[1], pts[2], pts[3]])
        };
        let (mut lo, mut hi) = (1e-3, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if q_of(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let pts: Vec<Vec3<f64>> = p.iter().map(|v| [v[0], v[1], v[2] * lo]).collect();
        assert!((quality(&pts, &t, 0.8).0 - 0.3).abs() < 1e-12);

        let mut x = pts.clone();
        x[0][0] += 0.13;
        x[2][1] -= 0.07;
        let (_, g) = quality(&x, &t, 0.8);
        let eps = 1e-6;
        for v in 0..4 {
            for d in 0..3 {
                let mut a = x.clone();
                a[v][d] += eps;
                let mut b = x.clone();
                b[v][d] -= eps;
                let fd = (quality(&a, &t, 0.8).0 - quality(&b, &t, 0.8).0) / (2.0 * eps);
                assert!((fd - g[v][d]).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn signed_volume_examples() {
        let (mut p, _) = regular();
        let mut tets = vec![[0, 1, 2, 3]; 10];
        assert_eq!(signed_volume_penalty(&p, &tets).0, 0.0);
        // One tet with volume −0.01 among ten.
        let v0 = signed_volume(p[0], p[1], p[2], p[3]);
        let s = (0.01 / v0).cbrt();
        p.iter_mut().for_each(|v| *v = v.map(|c| c * s));
        tets[0] = [1, 0, 2, 3];
        let (l, g) = signed_volume_penalty(&p, &tets);
        assert!((l - 0.001).abs() < 1e-15);
        // Moving along −gradient increases the offending tet's volume.
        let stepped: Vec<Vec3<f64>> =
            p.iter().zip(&g).map(|(a, b)| [a[0] - 1e-3 * b[0], a[1] - 1e-3 * b[1], a[2] - 1e-3 * b[2]]).collect();
        let before = signed_volume(p[1], p[0], p[2], p[3]);
        let after = signed_volume(stepped[1], stepped[0], stepped[2], stepped[3]);
        assert!(after > before);
    }

    #[test]
    fn psnr_cap() {
        assert_eq!(psnr(&[0.5f64; 4], &[0.5; 4]), 100.0);
        assert!((psnr(&[0.1f64; 4], &[0.0; 4]) - 20.0).abs() < 1e-9);
    }
}
