use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tetfield::checkpoint::Checkpoint;
use tetfield::dynamics::{CameraSpec, LatticeConfig, Playback, SimConfig};
use tetfield::homeo::MapConfig;
use tetfield::imageio::save_png;
use tetfield::linalg::Vec3;
use tetfield::model::Model;
use tetfield::scene::{orbit_cameras, SceneDataset};
use tetfield::splat::{render as splat_render, Camera};
use tetfield::tetgen::{read_mesh, write_ele, write_node};
use tetfield::tetmesh::{count_inverted, validate_conformal, Aabb, TetMesh};
use tetfield::train::{evaluate, synthesize_dataset, ConstraintMode, TrainConfig, TrainState};
use tetfield::{Error, QualityReport};

use crate::{
    CameraArgs, DeformArgs, EvalArgs, ExportPlyArgs, Failure, InitGridArgs, InitMeshArgs, LodArgs, MakeSceneArgs, MapArgs,
    QualityArgs, RenderArgs, SimulateArgs, TrainArgs,
};

type Res = Result<(), Failure>;

/// `STFD_SEED` if set, else `fallback`.
fn seed(fallback: u64) -> Result<u64, Failure> {
    match std::env::var("STFD_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| Failure::new("config", format!("STFD_SEED is not an unsigned integer: {s:?}"))),
        Err(_) => Ok(fallback),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Error::io(path, e).into()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Res {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn rgb(v: &Option<Vec<f64>>) -> Option<[f64; 3]> {
    v.as_ref().map(|v| [v[0], v[1], v[2]])
}

fn load(path: &Path) -> Result<Checkpoint<f64>, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn map_config(a: &MapArgs) -> Result<MapConfig, Failure> {
    if a.sh_degree > tetfield::sh::MAX_DEGREE {
        return Err(Failure::usage(format!("--sh-degree must be at most {}", tetfield::sh::MAX_DEGREE)));
    }
    if a.blocks == 0 || a.hidden_width == 0 || !(1..=24).contains(&a.table_log2) {
        return Err(Failure::usage("--blocks and --hidden-width must be positive and --table-log2 in 1..=24"));
    }
    Ok(MapConfig { blocks: a.blocks, hidden_width: a.hidden_width, hidden_layers: a.hidden_layers, ..MapConfig::default() }
        .with_table_log2(a.table_log2))
}

fn new_checkpoint(mesh: &TetMesh<f64>, a: &MapArgs, out: &Path) -> Res {
    let cfg = map_config(a)?;
    let seed = seed(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::from_mesh(mesh, &cfg, a.sh_degree, &mut rng);
    let config = TrainConfig { seed, ..TrainConfig::default() };
    Checkpoint::new(model, config).save(out)?;
    println!("vertices {} tets {} inverted {}", mesh.n_vertices(), mesh.n_tets(), count_inverted(mesh.vertices(), mesh.tets()));
    Ok(())
}

pub fn init_grid(a: InitGridArgs) -> Res {
    let res = match a.res.as_slice() {
        [r] => [*r; 3],
        [x, y, z] => [*x, *y, *z],
        _ => return Err(Failure::usage("--res takes one or three values")),
    };
    let b = &a.bbox;
    let bbox = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
    let mesh = tetfield::tetmesh::build_uniform_grid::<f64>(&bbox, res)?;
    new_checkpoint(&mesh, &a.map, &a.out)
}

pub fn init_from_mesh(a: InitMeshArgs) -> Res {
    let mesh = match read_mesh::<f64>(&a.node, &a.ele) {
        Err(Error::InvertedTet { .. }) => {
            let (pts, base) = tetfield::tetgen::parse_node(&read_text(&a.node)?, &a.node)?;
            let tets = tetfield::tetgen::parse_ele(&read_text(&a.ele)?, &a.ele, base)?;
            let n = count_inverted(&pts, &tets);
            return Err(Failure::new("inverted_tet", format!("{n} of {} tets have non-positive volume", tets.len())));
        }
        r => r?,
    };
    let report = validate_conformal(&mesh);
    if !report.violations.is_empty() {
        return Err(Error::NonConformal { bad_faces: report.violations.len() }.into());
    }
    new_checkpoint(&mesh, &a.map, &a.out)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn mesh_bounds(model: &Model<f64>) -> Aabb {
    Aabb::bounding(&model.base_positions())
}

pub fn make_scene(a: MakeSceneArgs) -> Res {
    if a.views == 0 || a.width == 0 || a.height == 0 {
        return Err(Failure::usage("--views, --width and --height must be positive"));
    }
    let ck = load(&a.ckpt)?;
    let b = mesh_bounds(&ck.model);
    let center: Vec3<f64> = std::array::from_fn(|d| 0.5 * (b.min[d] + b.max[d]));
    let r = 0.5 * tetfield::linalg::norm(b.extent());
    let radius = a.radius.unwrap_or(1.2 * r / (0.5 * a.fov_x).tan());
    let cams = orbit_cameras(a.views, center, radius, a.fov_x, a.width, a.height, a.phase);
    let data = synthesize_dataset(&ck.model, &cams, rgb(&a.background).unwrap_or([0.0; 3]));
    data.save(&a.out)?;
    println!("views {} size {}x{}", a.views, a.width, a.height);
    Ok(())
}

fn train_config(a: &TrainArgs, base: &TrainConfig) -> Result<TrainConfig, Failure> {
    let mut c = base.clone();
    if let Some(m) = &a.mode {
        c.mode = m.parse::<ConstraintMode>()?;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+;)*) => {$(
            if let Some(v) = a.$flag {
                c.$($field).+ = v;
            }
        )*};
    }
    set! {
        split_threshold => split_threshold;
        mask_threshold => mask_threshold;
        max_depth => max_depth;
        max_leaves => max_leaves;
        control_interval => control_interval;
        control_until => control_until;
        sh_warmup => sh_warmup;
        lambda_l1 => loss.l1;
        lambda_ssim => loss.ssim;
        lambda_mask => loss.mask;
        lambda_quality => loss.quality;
        lambda_sv => loss.sv;
        quality_target => loss.r;
        lr_map => lr.map;
        lr_vertices => lr.vertices;
        lr_sh => lr.sh;
        lr_opacity => lr.opacity;
        lr_final => lr_final_factor;
    }
    c.seed = seed(a.seed.unwrap_or(c.seed))?;
    if c.max_depth > tetfield::hierarchy::MAX_DEPTH {
        return Err(Failure::usage(format!("--max-depth must be at most {}", tetfield::hierarchy::MAX_DEPTH)));
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: TrainArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let mut config = train_config(&a, &ck.config)?;
    let mask_box = a.mask_box.as_ref().map(|b| Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]));
    let data = SceneDataset::<f64>::load(&a.scene, mask_box.as_ref(), rgb(&a.background))?;
    let (start, optimizer) = match (a.resume, ck.optimizer) {
        (true, Some(opt)) => (ck.iteration, Some(opt)),
        (true, None) => return Err(Failure::new("config", "--resume needs a checkpoint with optimizer state")),
        (false, _) => (0, None),
    };
    if let Some(n) = a.iters {
        config.iterations = start + n;
    }
    let mut state = match optimizer {
        Some(opt) => TrainState::resume(ck.model, config, opt, start)?,
        None => TrainState::new(ck.model, config)?,
    };
    let out = a.out.clone().unwrap_or_else(|| a.ckpt.clone());
    let metrics_path = a.metrics.clone().unwrap_or_else(|| out.with_extension("jsonl"));
    let mut metrics = create(&metrics_path)?;
    let mut last = None;
    state.run(&data, |m| {
        serde_json::to_writer(&mut metrics, m)?;
        writeln!(metrics).map_err(|e| Error::io(&metrics_path, e))?;
        if a.log_every > 0 && m.iteration % a.log_every == 0 {
            log::info!("it {} loss {:.5} psnr {:.2} leaves {} inverted {}", m.iteration, m.loss, m.psnr, m.leaves, m.inverted);
        }
        last = Some((m.psnr, m.leaves, m.inverted));
        Ok(())
    })?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    let ck = Checkpoint { iteration: state.iteration, model: state.model, config: state.config, optimizer: Some(state.optimizer) };
    ck.save(&out)?;
    let (psnr, leaves, inverted) = last.unwrap_or((f64::NAN, ck.model.forest.visible_leaves().len(), ck.model.inverted_count()));
    println!("iterations {} last_psnr {psnr:.3} leaves {leaves} inverted {inverted}", ck.iteration);
    Ok(())
}

fn camera(v: &CameraArgs, model: &Model<f64>) -> Result<(Camera, [f64; 3]), Failure> {
    let bg = rgb(&v.background);
    if let (Some(scene), Some(i)) = (&v.scene, v.camera) {
        let data = SceneDataset::<f64>::load(scene, None, bg)?;
        let view = data.views.get(i).ok_or_else(|| Failure::usage(format!("--camera {i} out of range ({} frames)", data.views.len())))?;
        return Ok((view.camera.clone(), data.background));
    }
    if v.width == 0 || v.height == 0 || !(v.fov_x > 0.0 && v.fov_x < std::f64::consts::PI) {
        return Err(Failure::usage("--width/--height must be positive and --fov-x in (0, pi)"));
    }
    let cam = match &v.pose {
        Some(p) => {
            let m: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| p[4 * r + c]));
            tetfield::scene::check_rigid(&m).map_err(|e| Failure::new("format", format!("--pose: {e}")))?;
            let f = 0.5 * v.width as f64 / (0.5 * v.fov_x).tan();
            Camera::from_c2w_opengl(&m, f, f, 0.5 * v.width as f64, 0.5 * v.height as f64, v.width, v.height)
        }
        None => {
            let mut spec = CameraSpec::framing(&mesh_bounds(model), v.width, v.height);
            spec.fov_x = v.fov_x;
            spec.camera()
        }
    };
    Ok((cam, bg.unwrap_or([0.0; 3])))
}

pub fn render(a: RenderArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let (cam, bg) = camera(&a.view, &ck.model)?;
    let (out, _) = ck.model.render(&cam, bg);
    save_png(&a.out, out.width, out.height, &out.rgb)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let data = SceneDataset::<f64>::load(&a.scene, None, None)?;
    let rows = evaluate(&ck.model, &data)?;
    let mut text = String::from("view,psnr,ssim\n");
    for (name, p, s) in &rows {
        text.push_str(&format!("{name},{p},{s}\n"));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&(String, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    text.push_str(&format!("mean,{},{}\n", mean(&|r| r.1), mean(&|r| r.2)));
    write_or_print(a.out.as_deref(), &text)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Res {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn lod(a: LodArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let (cam, bg) = camera(&a.view, &ck.model)?;
    let g = ck.model.gaussians_lod(a.level, cam.center_as())?;
    let (out, _) = splat_render(&g, &cam, bg);
    save_png(&a.out, out.width, out.height, &out.rgb)?;
    println!("level {} gaussians {}", a.level, g.len());
    Ok(())
}

pub fn quality(a: QualityArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let report = QualityReport::compute(&ck.model.base_mesh()?);
    if let Some(p) = &a.per_tet {
        report.save_csv(p)?;
    }
    let mut buf = Vec::new();
    report.write_summary_csv(&mut buf).expect("writing to memory");
    write_or_print(a.out.as_deref(), &String::from_utf8(buf).expect("ascii csv"))
}

pub fn export_ply(a: ExportPlyArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let splats = tetfield::ply::export_splats(&ck.model)?;
    tetfield::ply::write_ply(&a.out, &splats)?;
    println!("gaussians {}", splats.len());
    Ok(())
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::new("json", format!("{}: {e}", path.display())))
}

/// Render and store every frame: `frame_NNNN.png`, `frame_NNNN.node`, one
/// shared `mesh.ele` and per-frame diagnostics in `diagnostics.jsonl`.
fn write_frames(model: &Model<f64>, frames: &[Vec<Vec3<f64>>], spec: Option<&CameraSpec>, bg: [f64; 3], out: &Path) -> Res {
    mkdir(out)?;
    let cam = match spec {
        Some(s) => s.camera(),
        None => CameraSpec::framing(&mesh_bounds(model), 256, 256).camera(),
    };
    write_ele(&out.join("mesh.ele"), &model.tets)?;
    let pb = Playback::new(model);
    let diag_path = out.join("diagnostics.jsonl");
    let mut diag = create(&diag_path)?;
    let mut worst = 0;
    for (i, f) in frames.iter().enumerate() {
        let (img, d) = pb.render_frame(f, &cam, bg);
        save_png(&out.join(format!("frame_{i:04}.png")), img.width, img.height, &img.rgb)?;
        write_node(&out.join(format!("frame_{i:04}.node")), f)?;
        let line = serde_json::json!({ "frame": i, "inverted_base": d.inverted_base, "inverted_leaves": d.inverted_leaves });
        writeln!(diag, "{line}").map_err(io_err(&diag_path))?;
        worst = worst.max(d.inverted_base);
    }
    diag.flush().map_err(io_err(&diag_path))?;
    println!("frames {} max_inverted {worst}", frames.len());
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let cfg: SimConfig = json(&a.sim)?;
    let (frames, _) = cfg.run(&ck.model.base_mesh()?)?;
    write_frames(&ck.model, &frames, cfg.camera.as_ref(), cfg.background, &a.out)
}

pub fn deform(a: DeformArgs) -> Res {
    let ck = load(&a.ckpt)?;
    let cfg: LatticeConfig = json(&a.lattice)?;
    let frames = cfg.run(&ck.model.base_positions())?;
    write_frames(&ck.model, &frames, cfg.camera.as_ref(), cfg.background, &a.out)
}
