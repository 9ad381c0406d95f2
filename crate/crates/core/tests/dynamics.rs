use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tetfield::dynamics::*;
use tetfield::homeo::MapConfig;
use tetfield::linalg::{matvec, Vec3};
use tetfield::model::Model;
use tetfield::reparam::RenderAttributes;
use tetfield::splat::Camera;
use tetfield::tetmesh::{signed_volume, Aabb};

fn model(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::grid(&Aabb::new([-0.5; 3], [0.5; 3]), [2, 2, 1], &MapConfig::default().with_table_log2(8), 1, &mut rng).unwrap();
    for k in [1, 5, 24] {
        m.subdivide(k).unwrap();
    }
    m.attrs = RenderAttributes::random(m.forest.n_render_vertices(), m.forest.n_nodes(), 1, &mut rng);
    m
}

fn camera() -> Camera {
    Camera::look_at([1.8, -2.2, 1.4], [0.0; 3], [0.0, 0.0, 1.0], 0.9, 48, 40)
}

fn volume(m: &Model<f64>, pos: &[Vec3<f64>], k: usize) -> f64 {
    let p = m.forest.node_points(pos, k);
    signed_volume(p[0], p[1], p[2], p[3])
}

#[test]
fn constant_sequence_renders_identical_frames() {
    let m = model(1);
    let rest = m.base_positions();
    let frames = playback(&m, &vec![rest.clone(); 3], &camera(), [0.2; 3]);
    assert_eq!(frames.len(), 3);
    assert!(frames.iter().all(|(o, d)| o.rgb == frames[0].0.rgb && d.inverted_leaves == 0));
    let (direct, _) = m.render(&camera(), [0.2; 3]);
    let err = direct.rgb.iter().zip(&frames[0].0.rgb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

fn lattice(dims: [usize; 3], rest: &[Vec3<f64>]) -> LatticeDeformer<f64> {
    LatticeDeformer::new(Aabb::new([-1.0; 3], [1.0; 3]), dims, rest).unwrap()
}

#[test]
fn lattice_reproduces_affine_maps() {
    let m = model(2);
    let rest = m.base_positions();
    let def = lattice([3, 2, 4], &rest);
    assert!(def.clamped.is_empty());
    let zero = vec![[0.0; 3]; def.n_controls()];
    assert_eq!(def.apply(&zero, &rest).unwrap(), rest);

    let a = [[0.1, 0.3, 0.0], [-0.2, 0.05, 0.1], [0.0, 0.2, -0.1]];
    let t = [0.4, -0.3, 0.2];
    let mut d = zero.clone();
    for k in 0..4 {
        for j in 0..2 {
            for i in 0..3 {
                let c = matvec(&a, def.control_position(i, j, k));
                d[def.control_index(i, j, k)] = [c[0] + t[0], c[1] + t[1], c[2] + t[2]];
            }
        }
    }
    let moved = def.apply(&d, &rest).unwrap();
    for (p, q) in rest.iter().zip(&moved) {
        let e = matvec(&a, *p);
        for k in 0..3 {
            assert!((q[k] - (p[k] + e[k] + t[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn leaf_volumes_sum_to_the_deformed_roots() {
    let m = model(3);
    let rest = m.base_positions();
    let def = lattice([2, 2, 2], &rest);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let d: Vec<Vec3<f64>> = (0..8).map(|_| [0, 1, 2].map(|_| rng.gen_range(-0.15..0.15))).collect();
    let base = def.apply(&d, &rest).unwrap();
    let pos = m.forest.resolve_positions(&base);
    for root in 0..m.tets.len() {
        let sum: f64 = m.forest.subtree_leaves(root).into_iter().map(|k| volume(&m, &pos, k)).sum();
        let whole = volume(&m, &pos, root);
        assert!(whole > 0.0);
        assert!((sum - whole).abs() < 1e-12 * whole.abs().max(1.0), "root {root}: {sum} vs {whole}");
    }
}

#[test]
fn keyframes_drive_the_lattice() {
    let m = model(4);
    let rest = m.base_positions();
    let push = vec![[0.0, 0.0, 0.3]; 8];
    let cfg = LatticeConfig {
        lattice: LatticeSpec { min: [-1.0; 3], max: [1.0; 3], dims: [2, 2, 2] },
        keyframes: vec![Keyframe { frame: 0, displacements: vec![[0.0; 3]; 8] }, Keyframe { frame: 4, displacements: push }],
        frames: 6,
        camera: None,
        background: [0.0; 3],
    };
    let frames = cfg.run(&rest).unwrap();
    assert_eq!(frames.len(), 6);
    assert_eq!(frames[0], rest);
    for (f, frame) in frames.iter().enumerate() {
        let dz = 0.3 * (f.min(4) as f64 / 4.0);
        assert!(frame.iter().zip(&rest).all(|(q, p)| (q[2] - p[2] - dz).abs() < 1e-12 && q[0] == p[0]));
    }
    let rendered = playback(&m, &frames, &camera(), [0.0; 3]);
    assert!(rendered.iter().all(|(_, d)| d.inverted_base == 0 && d.inverted_leaves == 0));
}

#[test]
fn simulation_holds_pins_and_reports_every_frame() {
    let m = model(5);
    let mesh = m.base_mesh().unwrap();
    let cfg: SimConfig = serde_json::from_str(r#"{"pins": {"box": {"min": [-1, -1, 0.4], "max": [1, 1, 1]}}, "frames": 5}"#).unwrap();
    let pinned = cfg.pins.select(mesh.vertices()).unwrap();
    assert_eq!(pinned.len(), 9);
    let (frames, sys) = cfg.run(&mesh).unwrap();
    assert_eq!(frames.len(), 5);
    for f in &frames {
        assert!(pinned.iter().all(|&i| f[i] == mesh.vertices()[i]));
    }
    assert!(pinned.iter().all(|&i| sys.is_pinned(i)));
    let last = frames.last().unwrap();
    assert!(last.iter().zip(mesh.vertices()).any(|(q, p)| q[2] < p[2]));
}

#[test]
fn sim_config_rejects_bad_scripts() {
    assert!(serde_json::from_str::<SimConfig>(r#"{"gravty": [0, 0, -1]}"#).is_err());
    let cfg: SimConfig = serde_json::from_str(r#"{"substeps": 0}"#).unwrap();
    assert!(cfg.validate().is_err());
    let pins = PinSelector::Indices(vec![100]);
    assert!(pins.select(&[[0.0f64; 3]; 4]).is_err());
}
