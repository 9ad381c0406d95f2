//! The complete scene representation: base mesh, map, subdivision forest and
//! render attributes.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hierarchy::{SubdivisionForest, MAX_DEPTH};
use crate::homeo::{MapConfig, MapTape, OrientationPreservingMap};
use crate::linalg::Vec3;
use crate::reparam::{color_from_sh, gaussian_geometry, sigmoid, tet_to_gaussian, Gaussian3D, RenderAttributes};
use crate::scalar::{cst, Real};
use crate::splat::{render, Camera, RenderOutput, RenderStats};
use crate::tetmesh::{build_uniform_grid, count_inverted, Aabb, TetMesh};

/// Opacity of every leaf in a fresh model.
pub const INIT_OPACITY: f64 = 0.1;

/// Relative padding of the map domain around the base mesh.
pub const DOMAIN_PADDING: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    /// Base vertex positions before the map.
    pub vertices: Vec<Vec3<T>>,
    pub tets: Vec<[usize; 4]>,
    pub map: OrientationPreservingMap<T>,
    /// Whether base vertices go through `map` before rendering.
    pub map_enabled: bool,
    pub forest: SubdivisionForest<T>,
    pub attrs: RenderAttributes<T>,
}

/// Per-view geometry shared by rendering and the backward pass.
pub struct Geometry<T: Real> {
    pub base: Vec<Vec3<T>>,
    pub tape: Option<MapTape<T>>,
    pub render_pos: Vec<Vec3<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh model on `mesh`: identity map over the padded mesh bounds,
    /// no splits, uniform grey attributes.
    pub fn from_mesh<R: Rng>(mesh: &TetMesh<T>, map_config: &MapConfig, sh_degree: usize, rng: &mut R) -> Self {
        let domain = Aabb::bounding(mesh.vertices()).padded(DOMAIN_PADDING);
        let map = OrientationPreservingMap::identity(domain, map_config, rng);
        let forest = SubdivisionForest::new(mesh.n_vertices(), mesh.tets()).with_max_depth(MAX_DEPTH);
        let attrs = RenderAttributes::uniform(mesh.n_vertices(), mesh.n_tets(), sh_degree, INIT_OPACITY);
        Self { vertices: mesh.vertices().to_vec(), tets: mesh.tets().to_vec(), map, map_enabled: false, forest, attrs }
    }

    pub fn grid<R: Rng>(bbox: &Aabb, res: [usize; 3], map_config: &MapConfig, sh_degree: usize, rng: &mut R) -> Result<Self> {
        let mesh = build_uniform_grid(bbox, res)?;
        Ok(Self::from_mesh(&mesh, map_config, sh_degree, rng))
    }

    pub fn check(&self) -> Result<()> {
        if self.forest.n_base_vertices() != self.vertices.len() || self.forest.n_roots() != self.tets.len() {
            return Err(Error::SizeMismatch("forest does not match the base mesh".into()));
        }
        self.attrs.check_sizes(&self.forest)
    }

    /// Base positions after the map (if enabled).
    pub fn base_positions(&self) -> Vec<Vec3<T>> {
        if self.map_enabled {
            self.map.map_vertices(&self.vertices)
        } else {
            self.vertices.clone()
        }
    }

    pub fn geometry(&self, taped: bool) -> Geometry<T> {
        let (base, tape) = if self.map_enabled && taped {
            let (b, t) = self.map.map_vertices_taped(&self.vertices);
            (b, Some(t))
        } else {
            (self.base_positions(), None)
        };
        let render_pos = self.forest.resolve_positions(&base);
        Geometry { base, tape, render_pos }
    }

    /// Base mesh at its current (mapped) positions.
    pub fn base_mesh(&self) -> Result<TetMesh<T>> {
        TetMesh::new_unchecked(self.base_positions(), self.tets.clone())
    }

    pub fn inverted_count(&self) -> usize {
        count_inverted(&self.base_positions(), &self.tets)
    }

    /// Gaussians of the visible leaves for a view from `origin`, together
    /// with their node ids. Colours use SH bands up to `sh_degree` (capped at
    /// the stored degree).
    pub fn gaussians_at(&self, render_pos: &[Vec3<T>], origin: Vec3<T>, sh_degree: usize) -> (Vec<Gaussian3D<T>>, Vec<usize>) {
        let leaves = self.forest.visible_leaves();
        let deg = sh_degree.min(self.attrs.sh_degree);
        let g = leaves
            .par_iter()
            .map(|&k| tet_to_gaussian(&self.attrs.leaf_input(&self.forest, render_pos, k), deg, origin))
            .collect();
        (g, leaves)
    }

    pub fn gaussians(&self, cam: &Camera) -> (Vec<Gaussian3D<T>>, Vec<usize>) {
        let geo = self.geometry(false);
        self.gaussians_at(&geo.render_pos, cam.center_as(), self.attrs.sh_degree)
    }

    pub fn render(&self, cam: &Camera, background: [f64; 3]) -> (RenderOutput<T>, RenderStats) {
        let (g, _) = self.gaussians(cam);
        render(&g, cam, background.map(cst))
    }

    /// Gaussians of the hierarchy collapsed to `level` (see
    /// [`SubdivisionForest::collapse_to_level`]), skipping fully masked
    /// subtrees.
    pub fn gaussians_lod(&self, level: usize, origin: Vec3<T>) -> Result<Vec<Gaussian3D<T>>> {
        let geo = self.geometry(false);
        let a = &self.attrs;
        self.forest
            .collapse_to_level(level, &a.opacity, &a.rotation, &a.weights)
            .into_iter()
            .filter(|n| !self.forest.subtree_masked(n.node))
            .map(|n| {
                let p = self.forest.node_points(&geo.render_pos, n.node);
                let (mean, cov) = gaussian_geometry(&p, &n.weights, n.rotation)?;
                let sh = self.forest.node(n.node).corners.map(|c| a.vertex_sh(c));
                let color = color_from_sh(a.sh_degree, sh, &n.weights, origin, &p);
                Ok(Gaussian3D { mean, cov, color, opacity: sigmoid(n.opacity_raw) })
            })
            .collect()
    }

    /// Split a leaf and extend the attributes accordingly.
    pub fn subdivide(&mut self, k: usize) -> std::result::Result<[usize; 4], crate::hierarchy::SplitRefused> {
        let ch = self.forest.subdivide(k)?;
        self.attrs.on_split(&self.forest, k);
        Ok(ch)
    }
}
