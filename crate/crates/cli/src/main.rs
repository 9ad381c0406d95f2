//! `stfd`: build, train, inspect and animate tetrahedral radiance fields.
//!
//! Failures print a single `error: <kind>: <message>` line on stderr and exit
//! with status 1 (2 for command-line usage errors).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "stfd", version, about = "Tetrahedral-mesh radiance fields")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Checkpoint with a uniform Freudenthal grid and an identity map.
    InitGrid(InitGridArgs),
    /// Checkpoint from a TetGen .node/.ele pair.
    InitFromMesh(InitMeshArgs),
    /// Render a synthetic scene (PNGs plus transforms.json) from a checkpoint.
    MakeScene(MakeSceneArgs),
    /// Optimize a checkpoint against a scene.
    Train(TrainArgs),
    /// Render one view to PNG.
    Render(RenderArgs),
    /// Per-view PSNR/SSIM as CSV.
    Eval(EvalArgs),
    /// Render the hierarchy collapsed to a level.
    Lod(LodArgs),
    /// Mesh quality statistics as CSV.
    Quality(QualityArgs),
    /// Export visible leaves as a 3DGS PLY.
    ExportPly(ExportPlyArgs),
    /// Mass-spring simulation of the base mesh, rendered per frame.
    Simulate(SimulateArgs),
    /// Lattice deformation of the base mesh, rendered per frame.
    Deform(DeformArgs),
}

#[derive(Args)]
struct MapArgs {
    /// Spherical-harmonics degree of the render attributes (0-3).
    #[arg(long, default_value_t = 3)]
    sh_degree: usize,
    /// Coupling blocks in the vertex map.
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    /// log2 of the hash table size per level.
    #[arg(long, default_value_t = 19)]
    table_log2: u32,
    #[arg(long, default_value_t = 128)]
    hidden_width: usize,
    #[arg(long, default_value_t = 2)]
    hidden_layers: usize,
    /// Seed for the map initialization (STFD_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitGridArgs {
    /// min x y z, max x y z
    #[arg(long, num_args = 6, allow_negative_numbers = true, default_values_t = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0])]
    bbox: Vec<f64>,
    /// Cells per axis (one value for all axes, or three).
    #[arg(long, num_args = 1..=3, default_values_t = [16])]
    res: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    map: MapArgs,
}

#[derive(Args)]
struct InitMeshArgs {
    #[arg(long)]
    node: PathBuf,
    #[arg(long)]
    ele: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    map: MapArgs,
}

#[derive(Args)]
struct MakeSceneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Orbit radius around the mesh centre (default: frames the mesh).
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0.8)]
    fov_x: f64,
    /// Offset of the Fibonacci orbit, for held-out views.
    #[arg(long, default_value_t = 0.0)]
    phase: f64,
    #[arg(long, num_args = 3)]
    background: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene manifest (transforms.json).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output checkpoint (default: overwrite --ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
    /// none, sv_loss, homeo, homeo_quality or frozen_vertices.
    #[arg(long)]
    mode: Option<String>,
    /// Iterations to run in this invocation.
    #[arg(long)]
    iters: Option<u64>,
    /// Metrics JSONL (default: next to the output checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from the optimizer state stored in the checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    split_threshold: Option<f64>,
    #[arg(long)]
    mask_threshold: Option<f64>,
    #[arg(long)]
    max_depth: Option<u8>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    control_interval: Option<u64>,
    #[arg(long)]
    control_until: Option<u64>,
    #[arg(long)]
    sh_warmup: Option<u64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    #[arg(long)]
    lambda_mask: Option<f64>,
    #[arg(long)]
    lambda_quality: Option<f64>,
    #[arg(long)]
    lambda_sv: Option<f64>,
    /// Quality hinge target r.
    #[arg(long)]
    quality_target: Option<f64>,
    #[arg(long)]
    lr_map: Option<f64>,
    #[arg(long)]
    lr_vertices: Option<f64>,
    #[arg(long)]
    lr_sh: Option<f64>,
    #[arg(long)]
    lr_opacity: Option<f64>,
    /// Final learning-rate fraction of the exponential decay.
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Foreground box (min xyz, max xyz) for images without alpha.
    #[arg(long, num_args = 6, allow_negative_numbers = true)]
    mask_box: Option<Vec<f64>>,
    #[arg(long, num_args = 3)]
    background: Option<Vec<f64>>,
    /// Log a progress line every N iterations (with --verbose).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

/// View selection shared by the rendering commands.
#[derive(Args)]
struct CameraArgs {
    /// Scene manifest to take the camera from.
    #[arg(long, requires = "camera")]
    scene: Option<PathBuf>,
    /// Frame index in --scene.
    #[arg(long, requires = "scene")]
    camera: Option<usize>,
    /// Camera-to-world 4x4 matrix, row-major, OpenGL convention.
    #[arg(long, num_args = 16, allow_negative_numbers = true, conflicts_with = "scene")]
    pose: Option<Vec<f64>>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 0.8)]
    fov_x: f64,
    #[arg(long, num_args = 3)]
    background: Option<Vec<f64>>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    view: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LodArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    level: usize,
    #[command(flatten)]
    view: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QualityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Summary CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-tet metrics here.
    #[arg(long)]
    per_tet: Option<PathBuf>,
}

#[derive(Args)]
struct ExportPlyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Simulation script (JSON).
    #[arg(long)]
    sim: PathBuf,
    /// Output directory for frames.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeformArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Lattice script (JSON).
    #[arg(long)]
    lattice: PathBuf,
    /// Output directory for frames.
    #[arg(long)]
    out: PathBuf,
}

/// A failure reported as `error: <kind>: <message>`.
#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    msg: String,
}

impl Failure {
    fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    fn usage(msg: impl Into<String>) -> Self {
        Self::new("usage", msg)
    }
}

impl From<tetfield::Error> for Failure {
    fn from(e: tetfield::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

fn report(f: &Failure) {
    let msg = f.msg.replace('\n', " ");
    eprintln!("error: {}: {}", f.kind, msg.trim());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report(&Failure::usage(first));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            report(&Failure::usage("--threads must be positive"));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report(&Failure::new("threads", e.to_string()));
            return ExitCode::FAILURE;
        }
    }
    let res = match cli.command {
        Command::InitGrid(a) => commands::init_grid(a),
        Command::InitFromMesh(a) => commands::init_from_mesh(a),
        Command::MakeScene(a) => commands::make_scene(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Lod(a) => commands::lod(a),
        Command::Quality(a) => commands::quality(a),
        Command::ExportPly(a) => commands::export_ply(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Deform(a) => commands::deform(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            if f.kind == "usage" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
