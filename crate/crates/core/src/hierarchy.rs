//! Implicit 1-to-4 subdivision of base tets.
//!
//! Every base tet is the root of a quadtree. Splitting a leaf inserts one
//! interior control point, given in barycentric coordinates of the leaf, and
//! replaces the leaf by the four tets that connect the control point to the
//! leaf's faces. The base mesh topology never changes; only leaves render.
//!
//! Render vertices are numbered with the base vertices first, followed by one
//! control point per internal node in split order.

use crate::linalg::{quat_normalize, Quat, Vec3};
use crate::scalar::{cst, Real};

/// Maximum subdivision depth of a leaf.
pub const MAX_DEPTH: u8 = 5;

/// Floor added to the softmax of the raw control parameters.
pub const BARY_FLOOR: f64 = 1e-3;

/// Constrained barycentric coordinates from raw control parameters:
/// `(softmax(raw) + ε) / (1 + 4ε)`. Strictly positive and summing to one.
pub fn barycentric<T: Real>(raw: &[T; 4]) -> [T; 4] {
    let s = softmax(raw);
    let eps = cst::<T>(BARY_FLOOR);
    let den = T::one() + cst::<T>(4.0) * eps;
    [(s[0] + eps) / den, (s[1] + eps) / den, (s[2] + eps) / den, (s[3] + eps) / den]
}

fn softmax<T: Real>(raw: &[T; 4]) -> [T; 4] {
    let m = raw.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e = [(raw[0] - m).exp(), (raw[1] - m).exp(), (raw[2] - m).exp(), (raw[3] - m).exp()];
    let z = e[0] + e[1] + e[2] + e[3];
    [e[0] / z, e[1] / z, e[2] / z, e[3] / z]
}

/// Backward of [`barycentric`]: `∂L/∂raw` from `∂L/∂b`.
pub fn barycentric_backward<T: Real>(raw: &[T; 4], g: &[T; 4]) -> [T; 4] {
    let s = softmax(raw);
    let den = T::one() + cst::<T>(4.0 * BARY_FLOOR);
    let gs: T = (0..4).map(|i| g[i] * s[i]).fold(T::zero(), |a, b| a + b);
    let mut out = [T::zero(); 4];
    for i in 0..4 {
        out[i] = s[i] * (g[i] - gs) / den;
    }
    out
}

/// Point with barycentric coordinates `b` in the tet `p`.
pub fn blend<T: Real>(p: &[Vec3<T>; 4], b: &[T; 4]) -> Vec3<T> {
    let mut c = [T::zero(); 3];
    for i in 0..4 {
        for d in 0..3 {
            c[d] += b[i] * p[i][d];
        }
    }
    c
}

/// The four children of `corners` split at `c`: child `i` replaces corner `i`
/// by `c`, so its volume is `bᵢ·V` with the parent's orientation.
pub fn split_corners(corners: [usize; 4], c: usize) -> [[usize; 4]; 4] {
    let mut out = [corners; 4];
    for (i, ch) in out.iter_mut().enumerate() {
        ch[i] = c;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TetNode {
    pub parent: Option<usize>,
    pub children: Option<[usize; 4]>,
    pub depth: u8,
    /// Base tet this node descends from.
    pub root: usize,
    /// Render-vertex ids of the node's corners.
    pub corners: [usize; 4],
    /// Render-vertex id of the split point, for internal nodes.
    pub control_vertex: Option<usize>,
    /// Masked leaves are kept but not rendered.
    pub masked: bool,
}

impl TetNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitRefused {
    NotALeaf(usize),
    DepthCap(usize),
}

/// Quadtree forest over the base tets. Node `k < n_roots` is the root of
/// base tet `k`. Raw control parameters are stored per node (zero = centroid)
/// and only matter once the node is split.
#[derive(Clone, Debug, PartialEq)]
pub struct SubdivisionForest<T: Real> {
    n_base_vertices: usize,
    n_roots: usize,
    nodes: Vec<TetNode>,
    controls: Vec<[T; 4]>,
    /// Node owning each control vertex, in control-vertex order.
    control_owner: Vec<usize>,
    max_depth: u8,
}

/// A resolved render element: corner positions of a node.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafTet<T> {
    pub node: usize,
    pub points: [Vec3<T>; 4],
}

/// A node selected by [`SubdivisionForest::collapse_to_level`] with its
/// merged attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct LodNode<T> {
    pub node: usize,
    pub opacity_raw: T,
    pub rotation: Quat<T>,
    /// Activated corner weights.
    pub weights: [T; 4],
}

impl<T: Real> SubdivisionForest<T> {
    pub fn new(n_base_vertices: usize, tets: &[[usize; 4]]) -> Self {
        let nodes = tets
            .iter()
            .enumerate()
            .map(|(k, t)| TetNode { parent: None, children: None, depth: 0, root: k, corners: *t, control_vertex: None, masked: false })
            .collect();
        Self {
            n_base_vertices,
            n_roots: tets.len(),
            nodes,
            controls: vec![[T::zero(); 4]; tets.len()],
            control_owner: Vec::new(),
            max_depth: MAX_DEPTH,
        }
    }

    pub fn with_max_depth(mut self, d: u8) -> Self {
        self.max_depth = d;
        self
    }

    pub fn max_depth(&self) -> u8 {
        self.max_depth
    }

    pub fn n_base_vertices(&self) -> usize {
        self.n_base_vertices
    }

    pub fn n_roots(&self) -> usize {
        self.n_roots
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_render_vertices(&self) -> usize {
        self.n_base_vertices + self.control_owner.len()
    }

    pub fn n_splits(&self) -> usize {
        self.control_owner.len()
    }

    pub fn node(&self, k: usize) -> &TetNode {
        &self.nodes[k]
    }

    pub fn nodes(&self) -> &[TetNode] {
        &self.nodes
    }

    pub fn control_owner(&self) -> &[usize] {
        &self.control_owner
    }

    pub fn controls(&self) -> &[[T; 4]] {
        &self.controls
    }

    pub fn controls_mut(&mut self) -> &mut [[T; 4]] {
        &mut self.controls
    }

    pub fn set_masked(&mut self, k: usize, masked: bool) {
        self.nodes[k].masked = masked;
    }

    /// Leaf ids in arena order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].is_leaf()).collect()
    }

    /// Unmasked leaf ids in arena order.
    pub fn visible_leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].is_leaf() && !self.nodes[k].masked).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf() && n.masked).count()
    }

    /// Split leaf `k` at its control point. Returns the child ids; the new
    /// control vertex id is `n_render_vertices() - 1` afterwards.
    pub fn subdivide(&mut self, k: usize) -> Result<[usize; 4], SplitRefused> {
        let node = &self.nodes[k];
        if !node.is_leaf() {
            return Err(SplitRefused::NotALeaf(k));
        }
        if node.depth >= self.max_depth {
            return Err(SplitRefused::DepthCap(k));
        }
        let cv = self.n_render_vertices();
        let (depth, root, masked) = (node.depth + 1, node.root, node.masked);
        let first = self.nodes.len();
        for corners in split_corners(node.corners, cv) {
            self.nodes.push(TetNode { parent: Some(k), children: None, depth, root, corners, control_vertex: None, masked });
            self.controls.push([T::zero(); 4]);
        }
        let ids = [first, first + 1, first + 2, first + 3];
        self.nodes[k].children = Some(ids);
        self.nodes[k].control_vertex = Some(cv);
        self.control_owner.push(k);
        Ok(ids)
    }

    /// Internal nodes in arena order (parents before children).
    fn internal_in_order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| !self.nodes[k].is_leaf())
    }

    /// Positions of all render vertices given base-vertex positions.
    pub fn resolve_positions(&self, base: &[Vec3<T>]) -> Vec<Vec3<T>> {
        assert_eq!(base.len(), self.n_base_vertices, "base position count mismatch");
        let mut pos = base.to_vec();
        pos.resize(self.n_render_vertices(), [T::zero(); 3]);
        for k in self.internal_in_order() {
            let n = &self.nodes[k];
            let p = n.corners.map(|c| pos[c]);
            pos[n.control_vertex.unwrap()] = blend(&p, &barycentric(&self.controls[k]));
        }
        pos
    }

    /// Backward of [`Self::resolve_positions`]: folds control-vertex gradients
    /// into their corners and returns `(∂L/∂base, ∂L/∂controls)`.
    pub fn resolve_backward(&self, render_pos: &[Vec3<T>], g_render: &[Vec3<T>]) -> (Vec<Vec3<T>>, Vec<[T; 4]>) {
        let mut g = g_render.to_vec();
        let mut g_ctrl = vec![[T::zero(); 4]; self.nodes.len()];
        let internal: Vec<usize> = self.internal_in_order().collect();
        for &k in internal.iter().rev() {
            let n = &self.nodes[k];
            let gc = g[n.control_vertex.unwrap()];
            if gc == [T::zero(); 3] {
                continue;
            }
            let b = barycentric(&self.controls[k]);
            let mut gb = [T::zero(); 4];
            for i in 0..4 {
                let ci = n.corners[i];
                for d in 0..3 {
                    g[ci][d] += b[i] * gc[d];
                    gb[i] += gc[d] * render_pos[ci][d];
                }
            }
            g_ctrl[k] = barycentric_backward(&self.controls[k], &gb);
        }
        g.truncate(self.n_base_vertices);
        (g, g_ctrl)
    }

    /// Corner positions of node `k`.
    pub fn node_points(&self, render_pos: &[Vec3<T>], k: usize) -> [Vec3<T>; 4] {
        self.nodes[k].corners.map(|c| render_pos[c])
    }

    /// Leaf tets (all leaves, masked or not) in arena order.
    pub fn resolve_leaf_tets(&self, base: &[Vec3<T>]) -> Vec<LeafTet<T>> {
        let pos = self.resolve_positions(base);
        self.leaves().into_iter().map(|k| LeafTet { node: k, points: self.node_points(&pos, k) }).collect()
    }

    /// Leaves of the subtree under `k`.
    pub fn subtree_leaves(&self, k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![k];
        while let Some(n) = stack.pop() {
            match self.nodes[n].children {
                Some(c) => stack.extend(c.iter().rev()),
                None => out.push(n),
            }
        }
        out
    }

    /// Nodes at depth `min(level, leaf depth)` along every branch, in
    /// preorder per root.
    pub fn select_level(&self, level: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..self.n_roots {
            let mut stack = vec![r];
            while let Some(n) = stack.pop() {
                let node = &self.nodes[n];
                match node.children {
                    Some(c) if (node.depth as usize) < level => stack.extend(c.iter().rev()),
                    _ => out.push(n),
                }
            }
        }
        out
    }

    /// Collapse the hierarchy to `level`. Merged nodes take the maximum
    /// opacity of their children, the sign-aligned mean of the children's
    /// unit quaternions, and per corner the mean weight of the three children
    /// sharing that corner. Leaves are returned with their own attributes.
    /// Masked leaves take part in the merge; a merged node is masked only if
    /// its whole subtree is.
    pub fn collapse_to_level(
        &self,
        level: usize,
        opacity_raw: &[T],
        rotation: &[Quat<T>],
        weights: &[[T; 4]],
    ) -> Vec<LodNode<T>> {
        self.select_level(level)
            .into_iter()
            .map(|k| self.merged(k, opacity_raw, rotation, weights))
            .collect()
    }

    fn merged(&self, k: usize, opacity_raw: &[T], rotation: &[Quat<T>], weights: &[[T; 4]]) -> LodNode<T> {
        match self.nodes[k].children {
            None => LodNode {
                node: k,
                opacity_raw: opacity_raw[k],
                rotation: quat_normalize(rotation[k]),
                weights: weights[k].map(crate::reparam::activate_weight),
            },
            Some(ch) => {
                let kids: Vec<LodNode<T>> = ch.iter().map(|&c| self.merged(c, opacity_raw, rotation, weights)).collect();
                let opacity_raw = kids.iter().map(|c| c.opacity_raw).fold(T::neg_infinity(), |a, b| a.max(b));
                let rotation = average_quaternions(&kids.iter().map(|c| c.rotation).collect::<Vec<_>>());
                let third = cst::<T>(1.0 / 3.0);
                let mut w = [T::zero(); 4];
                for (j, wj) in w.iter_mut().enumerate() {
                    let s = (0..4).filter(|&i| i != j).map(|i| kids[i].weights[j]).fold(T::zero(), |a, b| a + b);
                    *wj = s * third;
                }
                LodNode { node: k, opacity_raw, rotation, weights: w }
            }
        }
    }

    /// Whether every leaf under `k` is masked.
    pub fn subtree_masked(&self, k: usize) -> bool {
        self.subtree_leaves(k).iter().all(|&l| self.nodes[l].masked)
    }

    /// Preorder structure bits per root (`true` = internal).
    pub fn preorder_bits(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for r in 0..self.n_roots {
            self.preorder(r, &mut |n| bits.push(!self.nodes[n].is_leaf()));
        }
        bits
    }

    /// Visit the subtree of `k` in preorder.
    pub fn preorder(&self, k: usize, f: &mut impl FnMut(usize)) {
        f(k);
        if let Some(c) = self.nodes[k].children {
            for n in c {
                self.preorder(n, f);
            }
        }
    }

    /// Canonical node order: roots first, then the order in which replaying
    /// the splits depth-first (per root, preorder) appends children. Returns
    /// `order[new] = old`.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_roots).collect();
        for r in 0..self.n_roots {
            self.preorder(r, &mut |n| {
                if let Some(c) = self.nodes[n].children {
                    order.extend(c);
                }
            });
        }
        order
    }

    /// Canonical control-vertex order: internal nodes in per-root preorder.
    /// Returns `order[new] = old` over control-vertex indices.
    pub fn canonical_control_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_splits());
        for r in 0..self.n_roots {
            self.preorder(r, &mut |n| {
                if let Some(cv) = self.nodes[n].control_vertex {
                    out.push(cv - self.n_base_vertices);
                }
            });
        }
        out
    }

    /// Rebuild from preorder bits, replaying the splits in canonical order so
    /// node and control-vertex ids come out canonical.
    pub fn from_preorder(
        n_base_vertices: usize,
        tets: &[[usize; 4]],
        bits: &[bool],
        max_depth: u8,
    ) -> crate::Result<Self> {
        let mut f = Self::new(n_base_vertices, tets).with_max_depth(max_depth);
        let mut it = bits.iter();
        fn walk<T: Real>(f: &mut SubdivisionForest<T>, k: usize, it: &mut std::slice::Iter<bool>) -> crate::Result<()> {
            let internal = *it.next().ok_or_else(|| crate::Error::Format("forest bitstream truncated".into()))?;
            if internal {
                let ch = f.subdivide(k).map_err(|e| crate::Error::Format(format!("invalid split in bitstream: {e:?}")))?;
                for c in ch {
                    walk(f, c, it)?;
                }
            }
            Ok(())
        }
        for r in 0..tets.len() {
            walk(&mut f, r, &mut it)?;
        }
        if it.next().is_some() {
            return Err(crate::Error::Format("trailing bits in forest bitstream".into()));
        }
        Ok(f)
    }
}

/// Normalized mean of unit quaternions after flipping each to the
/// hemisphere of the first.
pub fn average_quaternions<T: Real>(qs: &[Quat<T>]) -> Quat<T> {
    let first = qs[0];
    let mut acc = [T::zero(); 4];
    for q in qs {
        let d = first[0] * q[0] + first[1] * q[1] + first[2] * q[2] + first[3] * q[3];
        let s = if d < T::zero() { -T::one() } else { T::one() };
        for i in 0..4 {
            acc[i] += s * q[i];
        }
    }
    quat_normalize(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tetmesh::{build_uniform_grid, signed_volume, Aabb};

    fn vol(p: &[Vec3<f64>; 4]) -> f64 {
        signed_volume(p[0], p[1], p[2], p[3])
    }

    #[test]
    fn barycentric_constraint() {
        let b = barycentric(&[0.0f64; 4]);
        assert!(b.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let b = barycentric(&[100.0f64, -100.0, -100.0, -100.0]);
        assert!(b.iter().all(|&x| x > 0.0));
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(b[1] >= BARY_FLOOR / (1.0 + 4.0 * BARY_FLOOR) * 0.999);
    }

    #[test]
    fn barycentric_backward_matches_finite_differences() {
        let raw = [0.3f64, -1.2, 0.7, 0.1];
        let g = [0.5, -0.2, 1.1, 0.4];
        let a = barycentric_backward(&raw, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = raw;
            p[i] += h;
            let mut m = raw;
            m[i] -= h;
            let f = |r: &[f64; 4]| barycentric(r).iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - a[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_split_quarters_the_volume() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut f = SubdivisionForest::<f64>::new(4, &[[0, 1, 2, 3]]);
        let ch = f.subdivide(0).unwrap();
        assert_eq!(f.n_render_vertices(), 5);
        let pos = f.resolve_positions(&pts);
        for c in ch {
            assert!((vol(&f.node_points(&pos, c)) - 1.0 / 24.0).abs() < 1e-15);
        }
        assert_eq!(f.subdivide(0), Err(SplitRefused::NotALeaf(0)));
    }

    #[test]
    fn depth_cap_refuses() {
        let mut f = SubdivisionForest::<f64>::new(4, &[[0, 1, 2, 3]]).with_max_depth(2);
        let c = f.subdivide(0).unwrap();
        let g = f.subdivide(c[0]).unwrap();
        assert_eq!(f.subdivide(g[1]), Err(SplitRefused::DepthCap(g[1])));
        assert_eq!(f.leaves().len(), 1 + 3 * 2);
    }

    #[test]
    fn unsplit_forest_leaves_are_base_tets() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [2, 1, 1]).unwrap();
        let f = SubdivisionForest::new(m.n_vertices(), m.tets());
        let leaves = f.resolve_leaf_tets(m.vertices());
        assert_eq!(leaves.len(), m.n_tets());
        for (k, l) in leaves.iter().enumerate() {
            assert_eq!(l.points, m.tet_points(k));
        }
    }

    #[test]
    fn resolve_backward_matches_finite_differences() {
        let base = vec![[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.2, 1.0, 0.0], [0.1, 0.2, 1.0]];
        let mut f = SubdivisionForest::<f64>::new(4, &[[0, 1, 2, 3]]);
        let c = f.subdivide(0).unwrap();
        f.subdivide(c[2]).unwrap();
        f.controls_mut()[0] = [0.2, -0.4, 0.9, 0.0];
        f.controls_mut()[c[2]] = [-0.3, 0.5, 0.1, 0.6];
        let w: Vec<Vec3<f64>> = (0..6).map(|i| [0.3 * i as f64 - 0.5, 0.7, -0.1 * i as f64]).collect();
        let loss = |f: &SubdivisionForest<f64>, b: &[Vec3<f64>]| {
            f.resolve_positions(b).iter().zip(&w).map(|(p, q)| crate::linalg::dot(*p, *q)).sum::<f64>()
        };
        let pos = f.resolve_positions(&base);
        let (gb, gc) = f.resolve_backward(&pos, &w);
        let h = 1e-6;
        for v in 0..4 {
            for d in 0..3 {
                let mut a = base.clone();
                a[v][d] += h;
                let mut b = base.clone();
                b[v][d] -= h;
                let fd = (loss(&f, &a) - loss(&f, &b)) / (2.0 * h);
                assert!((fd - gb[v][d]).abs() < 1e-8);
            }
        }
        for &n in &[0, c[2]] {
            for i in 0..4 {
                let mut fp = f.clone();
                fp.controls_mut()[n][i] += h;
                let mut fm = f.clone();
                fm.controls_mut()[n][i] -= h;
                let fd = (loss(&fp, &base) - loss(&fm, &base)) / (2.0 * h);
                assert!((fd - gc[n][i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lod_merge_rules() {
        let mut f = SubdivisionForest::<f64>::new(4, &[[0, 1, 2, 3]]);
        let ch = f.subdivide(0).unwrap();
        let n = f.n_nodes();
        let sig_inv = |p: f64| (p / (1.0 - p)).ln();
        let mut op = vec![0.0; n];
        for (i, &c) in ch.iter().enumerate() {
            op[c] = sig_inv(0.1 * (i + 1) as f64);
        }
        let q = quat_normalize([0.9, 0.1, -0.3, 0.2]);
        let rot = vec![q; n];
        let w = vec![[1.0, 2.0, 3.0, 4.0]; n];
        let lod = f.collapse_to_level(0, &op, &rot, &w);
        assert_eq!(lod.len(), 1);
        let o = 1.0 / (1.0 + (-lod[0].opacity_raw).exp());
        assert!((o - 0.4).abs() < 1e-12);
        for i in 0..4 {
            assert!((lod[0].rotation[i] - q[i]).abs() < 1e-12);
        }
        assert_eq!(f.collapse_to_level(1, &op, &rot, &w).len(), 4);
        // Sign alignment: a flipped copy averages to the same rotation.
        let avg = average_quaternions(&[q, q.map(|x| -x), q, q]);
        for i in 0..4 {
            assert!((avg[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn preorder_round_trip_is_canonical() {
        let m = build_uniform_grid::<f64>(&Aabb::unit(), [1, 1, 1]).unwrap();
        let mut f = SubdivisionForest::<f64>::new(8, m.tets());
        let a = f.subdivide(4).unwrap();
        f.subdivide(1).unwrap();
        f.subdivide(a[3]).unwrap();
        let bits = f.preorder_bits();
        let g = SubdivisionForest::<f64>::from_preorder(8, m.tets(), &bits, MAX_DEPTH).unwrap();
        assert_eq!(g.preorder_bits(), bits);
        assert_eq!(g.canonical_order(), (0..g.n_nodes()).collect::<Vec<_>>());
        assert_eq!(g.canonical_control_order(), (0..g.n_splits()).collect::<Vec<_>>());
        // Same leaf geometry after reordering.
        let pf = f.resolve_positions(m.vertices());
        let pg = g.resolve_positions(m.vertices());
        let order = f.canonical_order();
        for (new, &old) in order.iter().enumerate() {
            if f.node(old).is_leaf() {
                assert_eq!(f.node_points(&pf, old), g.node_points(&pg, new));
            }
        }
    }
}
