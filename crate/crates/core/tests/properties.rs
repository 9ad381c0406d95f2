use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tetfield::hierarchy::{average_quaternions, barycentric, SubdivisionForest};
use tetfield::homeo::{MapConfig, OrientationPreservingMap};
use tetfield::linalg::*;
use tetfield::reparam::covariance_to_scale_rotation;
use tetfield::tetmesh::{signed_volume, Aabb};

fn vec3() -> impl Strategy<Value = Vec3<f64>> {
    prop::array::uniform3(-2.0..2.0f64)
}

fn unit_quat() -> impl Strategy<Value = Quat<f64>> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |q| quat_norm(*q) > 0.1)
        .prop_map(quat_normalize)
}

fn max_abs_diff(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
    (0..9).map(|i| (a[i / 3][i % 3] - b[i / 3][i % 3]).abs()).fold(0.0, f64::max)
}

/// A tet with volume bounded away from zero, positively oriented.
fn tet() -> impl Strategy<Value = [Vec3<f64>; 4]> {
    prop::array::uniform4(vec3())
        .prop_filter("flat", |p| signed_volume(p[0], p[1], p[2], p[3]).abs() > 1e-2)
        .prop_map(|mut p| {
            if signed_volume(p[0], p[1], p[2], p[3]) < 0.0 {
                p.swap(2, 3);
            }
            p
        })
}

proptest! {
    #[test]
    fn swapping_two_corners_flips_the_volume(p in prop::array::uniform4(vec3()), t in vec3()) {
        let v = signed_volume(p[0], p[1], p[2], p[3]);
        prop_assert!((signed_volume(p[1], p[0], p[2], p[3]) + v).abs() < 1e-12);
        let q = p.map(|x| add(x, t));
        prop_assert!((signed_volume(q[0], q[1], q[2], q[3]) - v).abs() < 1e-11);
    }

    #[test]
    fn barycentric_coordinates_are_a_strict_partition_of_unity(raw in prop::array::uniform4(-50.0..50.0f64)) {
        let b = barycentric(&raw);
        prop_assert!(b.iter().all(|&x| x > 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn children_partition_the_parent(p in tet(), raw in prop::array::uniform4(-8.0..8.0f64)) {
        let mut forest = SubdivisionForest::<f64>::new(4, &[[0, 1, 2, 3]]);
        forest.controls_mut()[0] = raw;
        let kids = forest.subdivide(0).unwrap();
        let pos = forest.resolve_positions(&p);
        let vol = |k| {
            let c = forest.node_points(&pos, k);
            signed_volume(c[0], c[1], c[2], c[3])
        };
        let parent = vol(0);
        let b = barycentric(&raw);
        for (i, &k) in kids.iter().enumerate() {
            prop_assert!(vol(k) > 0.0);
            prop_assert!((vol(k) - b[i] * parent).abs() < 1e-12 * parent.max(1.0));
        }
    }

    #[test]
    fn covariance_factorization_round_trips(s in prop::array::uniform3(0.02..2.0f64), q in unit_quat()) {
        let r = quat_to_mat(q);
        let cov = matmul(&matmul(&r, &[[s[0] * s[0], 0.0, 0.0], [0.0, s[1] * s[1], 0.0], [0.0, 0.0, s[2] * s[2]]]), &transpose(&r));
        let (scale, rot) = covariance_to_scale_rotation(&cov).unwrap();
        prop_assert!(scale[0] >= scale[1] && scale[1] >= scale[2]);
        let r2 = quat_to_mat(rot);
        prop_assert!((det(&r2) - 1.0).abs() < 1e-10);
        let d = [[scale[0] * scale[0], 0.0, 0.0], [0.0, scale[1] * scale[1], 0.0], [0.0, 0.0, scale[2] * scale[2]]];
        let back = matmul(&matmul(&r2, &d), &transpose(&r2));
        prop_assert!(max_abs_diff(&cov, &back) < 1e-9 * frobenius(&cov).max(1.0));
    }

    #[test]
    fn polar_rotation_recovers_the_rotation(q in unit_quat(), a in prop::array::uniform3(vec3())) {
        let r = quat_to_mat(q);
        // Symmetric positive definite stretch.
        let s = mat_add(&matmul(&a, &transpose(&a)), &mat_scale(&identity(), 0.2));
        let got = polar_rotation(&matmul(&r, &s)).unwrap();
        prop_assert!(max_abs_diff(&got, &r) < 1e-8);
    }

    #[test]
    fn quaternion_average_ignores_signs(
        base in unit_quat(),
        offsets in prop::collection::vec(prop::array::uniform4(-0.2..0.2f64), 1..6),
        flips in prop::collection::vec(any::<bool>(), 6),
    ) {
        let qs: Vec<Quat<f64>> = offsets.iter().map(|o| quat_normalize([0, 1, 2, 3].map(|i| base[i] + o[i]))).collect();
        let flipped: Vec<Quat<f64>> = qs.iter().zip(&flips).map(|(q, &f)| if f { q.map(|x| -x) } else { *q }).collect();
        let a = quat_to_mat(average_quaternions(&qs));
        let b = quat_to_mat(average_quaternions(&flipped));
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn maps_invert_and_preserve_orientation(seed in any::<u64>(), amp in 0.05..0.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain = Aabb::new([-1.0; 3], [1.0; 3]);
        let map = OrientationPreservingMap::<f64>::random(domain, &MapConfig::default().with_table_log2(10), amp, amp, &mut rng);
        let pts: Vec<Vec3<f64>> = (0..200).map(|i| {
            let t = i as f64 / 200.0;
            [(7.3 * t).sin() * 0.9, (11.1 * t).cos() * 0.9, 1.8 * t - 0.9]
        }).collect();
        let back = map.inverse_batch(&map.forward_batch(&pts));
        for (p, b) in pts.iter().zip(&back) {
            prop_assert!(norm(sub(*p, *b)) < 1e-8);
        }
        prop_assert!(map.jacobian_det_batch(&pts).iter().all(|&d| d > 0.0));
    }
}
