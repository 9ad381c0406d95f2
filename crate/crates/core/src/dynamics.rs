//! Simulation and deformation of a reconstructed mesh.
//!
//! Base vertices are driven either by an XPBD mass-spring solver over the
//! tet edges or by a trilinear lattice. [`Playback`] then resolves the render
//! leaves from the moved base mesh and re-renders with frozen attributes.
//! Each leaf's Gaussian follows the rotational part of its deformation
//! gradient; SH colours are looked up in the leaf's rest frame so
//! view-dependent appearance stays attached to the material.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    det, from_cols, identity, inverse, mat_to_quat, matmul, matvec_t, norm, polar_rotation, quat_normalize, quat_to_mat, sub,
    transpose, Mat3, Vec3,
};
use crate::model::Model;
use crate::reparam::{activate_weight, color_from_sh, tet_to_gaussian, Gaussian3D};
use crate::scalar::{cst, Real};
use crate::splat::{render, Camera, RenderOutput};
use crate::tetmesh::{count_inverted, Aabb, TetMesh};

/// Distance constraint between two particles.
#[derive(Clone, Debug, PartialEq)]
pub struct Spring<T> {
    pub a: usize,
    pub b: usize,
    pub rest: T,
    pub compliance: T,
}

#[derive(Clone, Debug)]
pub struct MassSpringSystem<T: Real> {
    pub positions: Vec<Vec3<T>>,
    pub velocities: Vec<Vec3<T>>,
    /// Zero for pinned particles.
    pub inv_mass: Vec<T>,
    pub springs: Vec<Spring<T>>,
    pub gravity: Vec3<T>,
}

/// One particle per vertex with mass `density · Σ incident volume / 4`, one
/// spring per unique edge at its current length.
pub fn build_springs<T: Real>(mesh: &TetMesh<T>, density: T, compliance: T) -> MassSpringSystem<T> {
    let mut mass = vec![T::zero(); mesh.n_vertices()];
    let quarter = cst::<T>(0.25);
    for (k, t) in mesh.tets().iter().enumerate() {
        let share = density * mesh.tet_volume(k) * quarter;
        for &v in t {
            mass[v] += share;
        }
    }
    let pos = mesh.vertices();
    let springs = mesh
        .edges()
        .into_iter()
        .map(|(a, b)| Spring { a, b, rest: norm(sub(pos[a], pos[b])), compliance })
        .collect();
    MassSpringSystem {
        positions: pos.to_vec(),
        velocities: vec![[T::zero(); 3]; pos.len()],
        inv_mass: mass.iter().map(|&m| if m > T::zero() { T::one() / m } else { T::zero() }).collect(),
        springs,
        gravity: [T::zero(); 3],
    }
}

impl<T: Real> MassSpringSystem<T> {
    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn pin(&mut self, i: usize) {
        self.inv_mass[i] = T::zero();
        self.velocities[i] = [T::zero(); 3];
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.inv_mass[i] == T::zero()
    }

    /// Total linear momentum over the free particles.
    pub fn momentum(&self) -> Vec3<T> {
        let mut p = [T::zero(); 3];
        for (v, &w) in self.velocities.iter().zip(&self.inv_mass) {
            if w > T::zero() {
                for d in 0..3 {
                    p[d] += v[d] / w;
                }
            }
        }
        p
    }

    /// One XPBD substep: gravity prediction, `iterations` Gauss-Seidel sweeps
    /// over the springs, velocities from the position change.
    pub fn xpbd_step(&mut self, dt: T, iterations: usize) {
        assert!(dt > T::zero(), "dt must be positive");
        let prev = self.positions.clone();
        for i in 0..self.positions.len() {
            if self.inv_mass[i] == T::zero() {
                continue;
            }
            for d in 0..3 {
                self.velocities[i][d] += self.gravity[d] * dt;
                self.positions[i][d] += self.velocities[i][d] * dt;
            }
        }
        let mut lambda = vec![T::zero(); self.springs.len()];
        let dt2 = dt * dt;
        for _ in 0..iterations {
            for (s, l) in self.springs.iter().zip(lambda.iter_mut()) {
                let (wa, wb) = (self.inv_mass[s.a], self.inv_mass[s.b]);
                let alpha = s.compliance / dt2;
                let denom = wa + wb + alpha;
                if denom == T::zero() {
                    continue;
                }
                let e = sub(self.positions[s.a], self.positions[s.b]);
                let len = norm(e);
                if len == T::zero() {
                    continue;
                }
                let c = len - s.rest;
                let dl = (-c - alpha * *l) / denom;
                *l += dl;
                for d in 0..3 {
                    let n = e[d] / len;
                    self.positions[s.a][d] += wa * dl * n;
                    self.positions[s.b][d] -= wb * dl * n;
                }
            }
        }
        for i in 0..self.positions.len() {
            for d in 0..3 {
                self.velocities[i][d] = (self.positions[i][d] - prev[i][d]) / dt;
            }
        }
    }

    /// Advance one frame of length `1/fps` in `substeps` substeps.
    pub fn step_frame(&mut self, fps: T, substeps: usize, iterations: usize) {
        let dt = T::one() / (fps * cst(substeps.max(1) as f64));
        for _ in 0..substeps.max(1) {
            self.xpbd_step(dt, iterations);
        }
    }
}

/// Trilinear free-form deformation over a box of `dims` control points.
#[derive(Clone, Debug)]
pub struct LatticeDeformer<T> {
    pub bbox: Aabb,
    pub dims: [usize; 3],
    cells: Vec<([usize; 3], Vec3<T>)>,
    /// Vertices that were outside the box at rest and got clamped.
    pub clamped: Vec<usize>,
}

impl<T: Real> LatticeDeformer<T> {
    pub fn new(bbox: Aabb, dims: [usize; 3], rest: &[Vec3<T>]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("lattice needs at least 2 control points per axis, got {dims:?}")));
        }
        let ext = bbox.extent();
        if ext.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::DegenerateBox { extent: ext });
        }
        let mut clamped = Vec::new();
        let cells = rest
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut cell = [0usize; 3];
                let mut local = [T::zero(); 3];
                let mut outside = false;
                for d in 0..3 {
                    let span = cst::<T>((dims[d] - 1) as f64);
                    let t = (p[d] - cst(bbox.min[d])) / cst::<T>(ext[d]) * span;
                    let c = t.floor().max(T::zero()).min(span - T::one());
                    let f = t - c;
                    let tol = cst::<T>(1e-9);
                    outside |= f < -tol || f > T::one() + tol;
                    cell[d] = c.to_usize().unwrap_or(0);
                    local[d] = f.max(T::zero()).min(T::one());
                }
                if outside {
                    clamped.push(v);
                }
                (cell, local)
            })
            .collect();
        if !clamped.is_empty() {
            log::warn!("{} vertices outside the lattice box were clamped", clamped.len());
        }
        Ok(Self { bbox, dims, cells, clamped })
    }

    pub fn n_controls(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn control_position(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        let ijk = [i, j, k];
        let ext = self.bbox.extent();
        std::array::from_fn(|d| self.bbox.min[d] + ext[d] * ijk[d] as f64 / (self.dims[d] - 1) as f64)
    }

    /// The eight `(control, weight)` pairs of vertex `v`.
    pub fn weights(&self, v: usize) -> [(usize, T); 8] {
        let (c, f) = self.cells[v];
        std::array::from_fn(|n| {
            let o = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            let mut w = T::one();
            for d in 0..3 {
                w *= if o[d] == 1 { f[d] } else { T::one() - f[d] };
            }
            (self.control_index(c[0] + o[0], c[1] + o[1], c[2] + o[2]), w)
        })
    }

    pub fn apply(&self, displacements: &[Vec3<T>], rest: &[Vec3<T>]) -> Result<Vec<Vec3<T>>> {
        apply_lattice(self, displacements, rest)
    }
}

/// Displace each rest vertex by the trilinear blend of its cell's control
/// displacements.
pub fn apply_lattice<T: Real>(deformer: &LatticeDeformer<T>, displacements: &[Vec3<T>], rest: &[Vec3<T>]) -> Result<Vec<Vec3<T>>> {
    if displacements.len() != deformer.n_controls() {
        return Err(Error::SizeMismatch(format!(
            "{} control displacements for a {:?} lattice",
            displacements.len(),
            deformer.dims
        )));
    }
    if rest.len() != deformer.cells.len() {
        return Err(Error::SizeMismatch(format!("{} rest vertices, lattice built for {}", rest.len(), deformer.cells.len())));
    }
    Ok(rest
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let mut q = *p;
            for (c, w) in deformer.weights(v) {
                for d in 0..3 {
                    q[d] += w * displacements[c][d];
                }
            }
            q
        })
        .collect())
}

/// Per-frame diagnostics of [`Playback`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub inverted_base: usize,
    /// Leaves whose deformation gradient is singular or reflecting; they
    /// keep their rest orientation.
    pub inverted_leaves: usize,
}

/// Re-renders a trained model under moved base vertices.
pub struct Playback<'a, T: Real> {
    model: &'a Model<T>,
    leaves: Vec<usize>,
    rest_inv: Vec<Option<Mat3<T>>>,
}

fn edge_matrix<T: Real>(p: &[Vec3<T>; 4]) -> Mat3<T> {
    from_cols(sub(p[1], p[0]), sub(p[2], p[0]), sub(p[3], p[0]))
}

impl<'a, T: Real> Playback<'a, T> {
    /// The model's current base positions define the rest state.
    pub fn new(model: &'a Model<T>) -> Self {
        let rest = model.geometry(false).render_pos;
        let leaves = model.forest.visible_leaves();
        let rest_inv = leaves.iter().map(|&k| inverse(&edge_matrix(&model.forest.node_points(&rest, k)))).collect();
        Self { model, leaves, rest_inv }
    }

    pub fn rest_positions(&self) -> Vec<Vec3<T>> {
        self.model.base_positions()
    }

    /// Gaussians of the visible leaves for base positions `base`, seen from
    /// `origin`.
    pub fn gaussians(&self, base: &[Vec3<T>], origin: Vec3<T>) -> (Vec<Gaussian3D<T>>, FrameDiagnostics) {
        use rayon::prelude::*;
        let model = self.model;
        let pos = model.forest.resolve_positions(base);
        let deg = model.attrs.sh_degree;
        let out: Vec<(Gaussian3D<T>, bool)> = self
            .leaves
            .par_iter()
            .zip(&self.rest_inv)
            .map(|(&k, rest_inv)| {
                let mut leaf = model.attrs.leaf_input(&model.forest, &pos, k);
                let rot = rest_inv
                    .as_ref()
                    .and_then(|dm_inv| polar_rotation(&matmul(&edge_matrix(&leaf.points), dm_inv)));
                let r = rot.unwrap_or_else(identity);
                let q = quat_to_mat(quat_normalize(leaf.rotation_raw));
                leaf.rotation_raw = mat_to_quat(&matmul(&matmul(&r, &q), &transpose(&r)));
                let mut g = tet_to_gaussian(&leaf, 0, origin);
                let local = leaf.points.map(|p| matvec_t(&r, sub(p, origin)));
                let w = leaf.weights_raw.map(activate_weight);
                g.color = color_from_sh(deg, leaf.sh, &w, [T::zero(); 3], &local);
                (g, rot.is_none())
            })
            .collect();
        let diag = FrameDiagnostics {
            inverted_base: count_inverted(base, &model.tets),
            inverted_leaves: out.iter().filter(|o| o.1).count(),
        };
        (out.into_iter().map(|o| o.0).collect(), diag)
    }

    pub fn render_frame(&self, base: &[Vec3<T>], cam: &Camera, background: [f64; 3]) -> (RenderOutput<T>, FrameDiagnostics) {
        let (g, diag) = self.gaussians(base, cam.center_as());
        if diag.inverted_base > 0 {
            log::warn!("{} inverted base tets in frame", diag.inverted_base);
        }
        (render(&g, cam, background.map(cst)).0, diag)
    }
}

/// Render a sequence of base-position frames with frozen attributes.
pub fn playback<T: Real>(
    model: &Model<T>,
    frames: &[Vec<Vec3<T>>],
    cam: &Camera,
    background: [f64; 3],
) -> Vec<(RenderOutput<T>, FrameDiagnostics)> {
    let pb = Playback::new(model);
    frames.iter().map(|f| pb.render_frame(f, cam, background)).collect()
}

/// Signed volume of a deformed leaf relative to its rest orientation.
pub fn deformation_det<T: Real>(rest: &[Vec3<T>; 4], cur: &[Vec3<T>; 4]) -> Option<T> {
    inverse(&edge_matrix(rest)).map(|dm| det(&matmul(&edge_matrix(cur), &dm)))
}

/// Camera given by eye/target/up and a horizontal field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: Vec3<f64>,
    pub target: Vec3<f64>,
    #[serde(default = "default_up")]
    pub up: Vec3<f64>,
    #[serde(default = "default_fov")]
    pub fov_x: f64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
}

fn default_up() -> Vec3<f64> {
    [0.0, 0.0, 1.0]
}
fn default_fov() -> f64 {
    0.8
}
fn default_size() -> usize {
    256
}

impl CameraSpec {
    pub fn camera(&self) -> Camera {
        Camera::look_at(self.eye, self.target, self.up, self.fov_x, self.width, self.height)
    }

    /// Three-quarter view framing `bbox`.
    pub fn framing(bbox: &Aabb, width: usize, height: usize) -> Self {
        let c: Vec3<f64> = std::array::from_fn(|d| 0.5 * (bbox.min[d] + bbox.max[d]));
        let r = 0.5 * norm(bbox.extent());
        let dist = 1.2 * r / (0.5 * default_fov()).tan();
        let dir = [0.6, -0.7, 0.4];
        let n = norm(dir);
        let eye = std::array::from_fn(|d| c[d] + dir[d] / n * dist);
        Self { eye, target: c, up: default_up(), fov_x: default_fov(), width, height }
    }
}

/// Which particles are held fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinSelector {
    #[default]
    None,
    Indices(Vec<usize>),
    Box { min: Vec3<f64>, max: Vec3<f64> },
}

impl PinSelector {
    pub fn select<T: Real>(&self, positions: &[Vec3<T>]) -> Result<Vec<usize>> {
        match self {
            PinSelector::None => Ok(Vec::new()),
            PinSelector::Indices(ix) => {
                if let Some(&bad) = ix.iter().find(|&&i| i >= positions.len()) {
                    return Err(Error::Config(format!("pinned vertex {bad} out of range ({} vertices)", positions.len())));
                }
                Ok(ix.clone())
            }
            PinSelector::Box { min, max } => {
                let b = Aabb::new(*min, *max);
                Ok((0..positions.len()).filter(|&i| b.contains(positions[i].map(|x| x.to_f64().unwrap()))).collect())
            }
        }
    }
}

fn default_gravity() -> Vec3<f64> {
    [0.0, 0.0, -9.81]
}
fn default_compliance() -> f64 {
    1e-4
}
fn default_one() -> f64 {
    1.0
}
fn default_frames() -> usize {
    60
}
fn default_fps() -> f64 {
    60.0
}
fn default_ten() -> usize {
    10
}

/// Simulation script.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub pins: PinSelector,
    #[serde(default = "default_gravity")]
    pub gravity: Vec3<f64>,
    #[serde(default = "default_compliance")]
    pub compliance: f64,
    #[serde(default = "default_one")]
    pub density: f64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_ten")]
    pub substeps: usize,
    #[serde(default = "default_ten")]
    pub iterations: usize,
    #[serde(default)]
    pub camera: Option<CameraSpec>,
    #[serde(default)]
    pub background: [f64; 3],
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || self.frames == 0 || self.substeps == 0 {
            return Err(Error::Config("fps, frames and substeps must be positive".into()));
        }
        if !(self.compliance >= 0.0) || !(self.density > 0.0) {
            return Err(Error::Config("compliance must be >= 0 and density > 0".into()));
        }
        Ok(())
    }

    /// Base positions of every frame; frame 0 is the rest state.
    pub fn run<T: Real>(&self, mesh: &TetMesh<T>) -> Result<(Vec<Vec<Vec3<T>>>, MassSpringSystem<T>)> {
        self.validate()?;
        let mut sys = build_springs(mesh, cst(self.density), cst(self.compliance));
        sys.gravity = self.gravity.map(cst);
        for i in self.pins.select(mesh.vertices())? {
            sys.pin(i);
        }
        let mut frames = vec![sys.positions.clone()];
        for _ in 1..self.frames {
            sys.step_frame(cst(self.fps), self.substeps, self.iterations);
            frames.push(sys.positions.clone());
        }
        Ok((frames, sys))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub frame: usize,
    /// One displacement per control point, x fastest.
    pub displacements: Vec<Vec3<f64>>,
}

/// Lattice deformation script. Control displacements are interpolated
/// linearly between keyframes and held outside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub lattice: LatticeSpec,
    pub keyframes: Vec<Keyframe>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub camera: Option<CameraSpec>,
    #[serde(default)]
    pub background: [f64; 3],
}

impl LatticeConfig {
    pub fn displacements_at(&self, frame: usize) -> Vec<Vec3<f64>> {
        let mut keys: Vec<&Keyframe> = self.keyframes.iter().collect();
        keys.sort_by_key(|k| k.frame);
        let after = keys.iter().position(|k| k.frame >= frame);
        match after {
            None => keys.last().unwrap().displacements.clone(),
            Some(0) => keys[0].displacements.clone(),
            Some(i) => {
                let (a, b) = (keys[i - 1], keys[i]);
                let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
                a.displacements
                    .iter()
                    .zip(&b.displacements)
                    .map(|(x, y)| std::array::from_fn(|d| x[d] + t * (y[d] - x[d])))
                    .collect()
            }
        }
    }

    /// Base positions of every frame.
    pub fn run<T: Real>(&self, rest: &[Vec3<T>]) -> Result<Vec<Vec<Vec3<T>>>> {
        if self.keyframes.is_empty() || self.frames == 0 {
            return Err(Error::Config("lattice script needs at least one keyframe and frame".into()));
        }
        let l = &self.lattice;
        let def = LatticeDeformer::new(Aabb::new(l.min, l.max), l.dims, rest)?;
        (0..self.frames)
            .map(|f| {
                let d: Vec<Vec3<T>> = self.displacements_at(f).iter().map(|x| x.map(cst)).collect();
                def.apply(&d, rest)
            })
            .collect()
    }
}
