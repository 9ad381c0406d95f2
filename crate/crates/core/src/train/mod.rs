//! Optimization: composite loss, Adam over all learnable groups, adaptive
//! subdivision and masking, and the constraint-mode ablations.

pub mod adam;
pub mod loss;

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homeo::MapGrad;
use crate::linalg::{Quat, Vec3};
use crate::model::Model;
use crate::reparam::{sigmoid, tet_to_gaussian_backward};
use crate::scalar::{cst, to_f64, Real};
use crate::scene::{SceneDataset, View};
use crate::splat::{prepare, render_backward_prepared, render_prepared, Camera, RenderOutput};
use crate::tetmesh::count_inverted;

pub use adam::Adam;

/// How base vertex positions may change during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Vertices are free parameters.
    None,
    /// Free vertices plus the signed-volume penalty.
    SvLoss,
    /// Vertices move only through the map.
    Homeo,
    /// Map plus the quality hinge loss.
    HomeoQuality,
    /// Vertices fixed; only attributes train.
    FrozenVertices,
}

impl ConstraintMode {
    pub const ALL: [ConstraintMode; 5] =
        [Self::None, Self::SvLoss, Self::Homeo, Self::HomeoQuality, Self::FrozenVertices];

    pub fn uses_map(self) -> bool {
        matches!(self, Self::Homeo | Self::HomeoQuality)
    }

    pub fn trains_vertices(self) -> bool {
        matches!(self, Self::None | Self::SvLoss)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SvLoss => "sv_loss",
            Self::Homeo => "homeo",
            Self::HomeoQuality => "homeo_quality",
            Self::FrozenVertices => "frozen_vertices",
        }
    }
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "sv_loss" | "sv" => Ok(Self::SvLoss),
            "homeo" => Ok(Self::Homeo),
            "homeo_quality" | "homeo+quality" => Ok(Self::HomeoQuality),
            "frozen_vertices" | "frozen" => Ok(Self::FrozenVertices),
            _ => Err(Error::Config(format!("unknown constraint mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub quality: f64,
    /// Weight of the signed-volume penalty in `sv_loss` mode.
    pub sv: f64,
    /// Quality hinge threshold.
    pub r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.8, ssim: 0.2, mask: 0.5, quality: 10.0, sv: 100.0, r: 0.8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub map: f64,
    pub sh: f64,
    pub weights: f64,
    pub opacity: f64,
    pub rotation: f64,
    pub controls: f64,
    /// Base vertices, in the modes that train them directly.
    pub vertices: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { map: 1e-3, sh: 2.5e-3, weights: 5e-3, opacity: 5e-2, rotation: 1e-3, controls: 1e-3, vertices: 1e-3 }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self { map: 0.0, sh: 0.0, weights: 0.0, opacity: 0.0, rotation: 0.0, controls: 0.0, vertices: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub split_threshold: f64,
    pub mask_threshold: f64,
    pub max_depth: u8,
    pub mode: ConstraintMode,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub seed: u64,
    /// Iterations between adaptive-control passes (0 disables them).
    pub control_interval: u64,
    /// Last iteration at which adaptive control runs.
    pub control_until: u64,
    /// Splits stop once this many leaves exist.
    pub max_leaves: usize,
    /// Iterations per additional active SH band (0 = all bands from the
    /// start).
    pub sh_warmup: u64,
    /// Learning rates decay exponentially to this fraction of their initial
    /// value at `iterations`.
    pub lr_final_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            split_threshold: 2e-4,
            mask_threshold: 0.05,
            max_depth: crate::hierarchy::MAX_DEPTH,
            mode: ConstraintMode::HomeoQuality,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            seed: 0,
            control_interval: 100,
            control_until: 15_000,
            max_leaves: 200_000,
            sh_warmup: 1000,
            lr_final_factor: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lw = &self.loss;
        let lr = &self.lr;
        let nonneg = [
            self.split_threshold,
            self.mask_threshold,
            lw.l1,
            lw.ssim,
            lw.mask,
            lw.quality,
            lw.sv,
            lw.r,
            lr.map,
            lr.sh,
            lr.weights,
            lr.opacity,
            lr.rotation,
            lr.controls,
            lr.vertices,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.lr_final_factor > 0.0 && self.lr_final_factor.is_finite()) {
            return Err(Error::Config("thresholds, loss weights and learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub quality: f64,
    pub sv: f64,
    pub psnr: f64,
}

/// Gradients of the total loss with respect to every learnable group.
#[derive(Clone, Debug)]
pub struct ModelGrad<T> {
    pub vertices: Vec<Vec3<T>>,
    pub map: MapGrad<T>,
    pub controls: Vec<[T; 4]>,
    pub sh: Vec<T>,
    pub weights: Vec<[T; 4]>,
    pub opacity: Vec<T>,
    pub rotation: Vec<Quat<T>>,
    /// `(node, ‖∂L/∂mean2d‖ in NDC)` for leaves composited in this view.
    pub screen: Vec<(usize, f64)>,
}

/// Which optional geometry losses enter the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryTerms {
    pub quality: bool,
    pub sv: bool,
}

impl GeometryTerms {
    pub fn for_mode(mode: ConstraintMode) -> Self {
        Self { quality: mode == ConstraintMode::HomeoQuality, sv: mode == ConstraintMode::SvLoss }
    }
}

/// Render `model` for `view` and evaluate the composite loss.
pub fn evaluate_loss<T: Real>(
    model: &Model<T>,
    view: &View<T>,
    background: [f64; 3],
    w: &LossWeights,
    terms: GeometryTerms,
) -> Result<(LossTerms, RenderOutput<T>)> {
    let geo = model.geometry(false);
    let (gs, _) = model.gaussians_at(&geo.render_pos, view.camera.center_as(), model.attrs.sh_degree);
    let prep = prepare(&gs, &view.camera);
    let out = render_prepared(&prep, &view.camera, background.map(cst));
    let (t, ..) = image_losses(&out, view, w)?;
    let mut t = t;
    add_geometry_losses(&mut t, &geo.base, &model.tets, w, terms, None);
    Ok((t, out))
}

type ImageLossGrads<T> = (LossTerms, Vec<T>, Vec<T>);

fn image_losses<T: Real>(out: &RenderOutput<T>, view: &View<T>, w: &LossWeights) -> Result<ImageLossGrads<T>> {
    let cam = &view.camera;
    let (l1, g1) = loss::l1(&out.rgb, &view.rgb)?;
    let (ls, gs) = loss::ssim_loss(&out.rgb, &view.rgb, cam.width, cam.height, 3)?;
    let (lm, gm) = loss::mask(&out.alpha, &view.mask)?;
    let (w1, ws, wm) = (cst::<T>(w.l1), cst::<T>(w.ssim), cst::<T>(w.mask));
    let g_rgb = g1.iter().zip(&gs).map(|(&a, &b)| w1 * a + ws * b).collect();
    let g_alpha = gm.iter().map(|&a| wm * a).collect();
    let (l1, ls, lm) = (to_f64(l1), to_f64(ls), to_f64(lm));
    let t = LossTerms {
        total: w.l1 * l1 + w.ssim * ls + w.mask * lm,
        l1,
        ssim: ls,
        mask: lm,
        quality: 0.0,
        sv: 0.0,
        psnr: loss::psnr(&out.rgb, &view.rgb),
    };
    Ok((t, g_rgb, g_alpha))
}

fn add_geometry_losses<T: Real>(
    t: &mut LossTerms,
    base: &[Vec3<T>],
    tets: &[[usize; 4]],
    w: &LossWeights,
    terms: GeometryTerms,
    mut g_base: Option<&mut [Vec3<T>]>,
) {
    let mut add = |value: T, grad: Vec<Vec3<T>>, weight: f64, slot: &mut f64| {
        *slot = to_f64(value);
        t.total += weight * *slot;
        if let Some(g) = g_base.as_deref_mut() {
            for (a, b) in g.iter_mut().zip(grad) {
                for d in 0..3 {
                    a[d] += cst::<T>(weight) * b[d];
                }
            }
        }
    };
    if terms.quality {
        let (v, g) = loss::quality(base, tets, cst(w.r));
        let mut q = 0.0;
        add(v, g, w.quality, &mut q);
        t.quality = q;
    }
    if terms.sv {
        let (v, g) = loss::signed_volume_penalty(base, tets);
        let mut s = 0.0;
        add(v, g, w.sv, &mut s);
        t.sv = s;
    }
}

/// Loss and full gradient for one view, with colours from SH bands up to
/// `sh_degree`.
pub fn loss_and_grad<T: Real>(
    model: &Model<T>,
    view: &View<T>,
    background: [f64; 3],
    w: &LossWeights,
    terms: GeometryTerms,
    sh_degree: usize,
) -> Result<(LossTerms, ModelGrad<T>)> {
    let cam: &Camera = &view.camera;
    let geo = model.geometry(true);
    if let Some(tape) = &geo.tape {
        debug_assert!(model.map.taped_det(tape).iter().all(|d| *d > T::zero()), "map Jacobian determinant must be positive");
    }
    let origin = cam.center_as::<T>();
    let deg = sh_degree.min(model.attrs.sh_degree);
    let (gs, leaves) = model.gaussians_at(&geo.render_pos, origin, deg);
    let bg = background.map(cst);
    let prep = prepare(&gs, cam);
    let out = render_prepared(&prep, cam, bg);
    let (mut terms_out, g_rgb, g_alpha) = image_losses(&out, view, w)?;
    let rg = render_backward_prepared(&prep, &gs, cam, bg, &g_rgb, &g_alpha);

    let leaf_grads: Vec<_> = leaves
        .par_iter()
        .zip(rg.gaussians.par_iter())
        .map(|(&k, g)| tet_to_gaussian_backward(&model.attrs.leaf_input(&model.forest, &geo.render_pos, k), deg, origin, g))
        .collect();

    let n_nodes = model.forest.n_nodes();
    let nc = model.attrs.n_coeffs();
    let mut g_render = vec![[T::zero(); 3]; geo.render_pos.len()];
    let mut g_sh = vec![T::zero(); model.attrs.sh.len()];
    let mut g_w = vec![[T::zero(); 4]; n_nodes];
    let mut g_o = vec![T::zero(); n_nodes];
    let mut g_q = vec![[T::zero(); 4]; n_nodes];
    let mut screen = Vec::new();
    for (i, (&k, lg)) in leaves.iter().zip(&leaf_grads).enumerate() {
        let corners = model.forest.node(k).corners;
        for c in 0..4 {
            for d in 0..3 {
                g_render[corners[c]][d] += lg.points[c][d];
            }
            let dst = &mut g_sh[corners[c] * nc..(corners[c] + 1) * nc];
            for (a, b) in dst.iter_mut().zip(&lg.sh[c][..nc]) {
                *a += *b;
            }
        }
        g_w[k] = lg.weights_raw;
        g_o[k] = lg.opacity_raw;
        g_q[k] = lg.rotation_raw;
        if rg.visible[i] {
            screen.push((k, rg.screen_grad[i]));
        }
    }
    let (mut g_base, g_ctrl) = model.forest.resolve_backward(&geo.render_pos, &g_render);
    add_geometry_losses(&mut terms_out, &geo.base, &model.tets, w, terms, Some(&mut g_base));
    let mut g_map = MapGrad::default();
    let g_vertices = match &geo.tape {
        Some(tape) => model.map.backward(tape, &g_base, &mut g_map),
        None => g_base,
    };
    Ok((
        terms_out,
        ModelGrad {
            vertices: g_vertices,
            map: g_map,
            controls: g_ctrl,
            sh: g_sh,
            weights: g_w,
            opacity: g_o,
            rotation: g_q,
            screen,
        },
    ))
}

/// Adam state for every learnable group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer<T> {
    pub vertices: Adam<T>,
    /// One per map tensor, in [`crate::homeo::OrientationPreservingMap::tensors`] order.
    pub map: Vec<Adam<T>>,
    pub controls: Adam<T>,
    pub sh: Adam<T>,
    pub weights: Adam<T>,
    pub opacity: Adam<T>,
    pub rotation: Adam<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(model: &Model<T>, lr: &LearningRates) -> Self {
        let n = model.forest.n_nodes();
        Self {
            vertices: Adam::new(lr.vertices, 3 * model.vertices.len()),
            map: model.map.tensors().iter().map(|t| Adam::new(lr.map, t.len())).collect(),
            controls: Adam::new(lr.controls, 4 * n),
            sh: Adam::new(lr.sh, model.attrs.sh.len()),
            weights: Adam::new(lr.weights, 4 * n),
            opacity: Adam::new(lr.opacity, n),
            rotation: Adam::new(lr.rotation, 4 * n),
        }
    }

    pub fn set_learning_rates(&mut self, lr: &LearningRates) {
        self.vertices.lr = lr.vertices;
        self.map.iter_mut().for_each(|a| a.lr = lr.map);
        self.controls.lr = lr.controls;
        self.sh.lr = lr.sh;
        self.weights.lr = lr.weights;
        self.opacity.lr = lr.opacity;
        self.rotation.lr = lr.rotation;
    }

    /// Grow per-node and per-vertex moments after splits.
    pub fn resize(&mut self, model: &Model<T>) {
        let n = model.forest.n_nodes();
        self.controls.resize(4 * n);
        self.sh.resize(model.attrs.sh.len());
        self.weights.resize(4 * n);
        self.opacity.resize(n);
        self.rotation.resize(4 * n);
    }

    pub fn matches(&self, model: &Model<T>) -> bool {
        let n = model.forest.n_nodes();
        self.vertices.len() == 3 * model.vertices.len()
            && self.map.len() == model.map.tensors().len()
            && self.map.iter().zip(model.map.tensors()).all(|(a, t)| a.len() == t.len())
            && self.controls.len() == 4 * n
            && self.sh.len() == model.attrs.sh.len()
            && self.weights.len() == 4 * n
            && self.opacity.len() == n
            && self.rotation.len() == 4 * n
    }

    /// Apply one update of the groups that `mode` trains.
    pub fn step(&mut self, model: &mut Model<T>, g: &ModelGrad<T>, mode: ConstraintMode) {
        if mode.trains_vertices() {
            self.vertices.step_dense(model.vertices.as_flattened_mut(), g.vertices.as_flattened());
        }
        if mode.uses_map() && !g.map.blocks.is_empty() {
            let mut tensors = model.map.tensors_mut();
            for (b, bg) in g.map.blocks.iter().enumerate() {
                let mut table: Vec<(usize, T)> = bg.table.iter().map(|(&i, &v)| (i, v)).collect();
                table.sort_unstable_by_key(|e| e.0);
                self.map[2 * b].step_sparse(tensors[2 * b], &table);
                if !bg.mlp.is_empty() {
                    self.map[2 * b + 1].step_dense(tensors[2 * b + 1], &bg.mlp);
                }
            }
            drop(tensors);
        }
        self.controls.step_dense(model.forest.controls_mut().as_flattened_mut(), g.controls.as_flattened());
        self.sh.step_dense(&mut model.attrs.sh, &g.sh);
        self.weights.step_dense(model.attrs.weights.as_flattened_mut(), g.weights.as_flattened());
        self.opacity.step_dense(&mut model.attrs.opacity, &g.opacity);
        self.rotation.step_dense(model.attrs.rotation.as_flattened_mut(), g.rotation.as_flattened());
    }
}

/// Result of one adaptive-control pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ControlReport {
    pub splits: usize,
    pub masked: usize,
    pub depth_capped: usize,
}

/// Per-iteration metrics, emitted as one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub view: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub quality: f64,
    pub sv: f64,
    pub psnr: f64,
    pub grad_norm_geometry: f64,
    pub grad_norm_attributes: f64,
    pub leaves: usize,
    pub masked: usize,
    pub inverted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlReport>,
}

fn sq_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|&x| to_f64(x) * to_f64(x)).sum()
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub optimizer: Optimizer<T>,
    pub iteration: u64,
    /// Accumulated screen-gradient magnitude per node since the last pass.
    pub grad_sum: Vec<f64>,
    /// Number of views the node was composited in since the last pass.
    pub grad_count: Vec<u32>,
}

impl<T: Real> TrainState<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.check()?;
        model.forest = model.forest.clone().with_max_depth(config.max_depth);
        model.map_enabled |= config.mode.uses_map();
        let optimizer = Optimizer::new(&model, &config.lr);
        let n = model.forest.n_nodes();
        Ok(Self { model, config, optimizer, iteration: 0, grad_sum: vec![0.0; n], grad_count: vec![0; n] })
    }

    /// Continue from saved optimizer state (learning rates follow `config`).
    pub fn resume(model: Model<T>, config: TrainConfig, mut optimizer: Optimizer<T>, iteration: u64) -> Result<Self> {
        let mut s = Self::new(model, config)?;
        if !optimizer.matches(&s.model) {
            return Err(Error::SizeMismatch("optimizer state does not match the model".into()));
        }
        optimizer.set_learning_rates(&s.config.lr);
        s.optimizer = optimizer;
        s.iteration = iteration;
        Ok(s)
    }

    /// Scheduled learning rates at `iteration`.
    pub fn learning_rates_at(&self, iteration: u64) -> LearningRates {
        let frac = (iteration as f64 / self.config.iterations.max(1) as f64).min(1.0);
        let f = self.config.lr_final_factor.powf(frac);
        let l = &self.config.lr;
        LearningRates {
            map: l.map * f,
            sh: l.sh * f,
            weights: l.weights * f,
            opacity: l.opacity * f,
            rotation: l.rotation * f,
            controls: l.controls * f,
            vertices: l.vertices * f,
        }
    }

    /// SH bands trained at the current iteration.
    pub fn active_sh_degree(&self) -> usize {
        match self.config.sh_warmup {
            0 => self.model.attrs.sh_degree,
            w => ((self.iteration / w) as usize).min(self.model.attrs.sh_degree),
        }
    }

    /// View used at `iteration`: a seeded shuffle per pass over the dataset.
    pub fn view_index(&self, iteration: u64, n_views: usize) -> usize {
        let epoch = iteration / n_views as u64;
        let mut perm: Vec<usize> = (0..n_views).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in (1..n_views).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        perm[(iteration % n_views as u64) as usize]
    }

    /// One optimization step on the next view, followed by adaptive control
    /// when due.
    pub fn step(&mut self, data: &SceneDataset<T>) -> Result<StepMetrics> {
        let vi = self.view_index(self.iteration, data.views.len());
        let mode = self.config.mode;
        let (terms, grad) = loss_and_grad(
            &self.model,
            &data.views[vi],
            data.background,
            &self.config.loss,
            GeometryTerms::for_mode(mode),
            self.active_sh_degree(),
        )?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!(
                    "view {vi}: l1={} ssim={} mask={} quality={} sv={}; leaves={} inverted={}",
                    terms.l1,
                    terms.ssim,
                    terms.mask,
                    terms.quality,
                    terms.sv,
                    self.model.forest.visible_leaves().len(),
                    self.model.inverted_count()
                ),
            });
        }
        let geo_norm = if mode.uses_map() {
            grad.map
                .blocks
                .iter()
                .map(|b| {
                    // Key order, so the metric does not depend on hash-map iteration.
                    let mut table: Vec<(usize, T)> = b.table.iter().map(|(&i, &v)| (i, v)).collect();
                    table.sort_unstable_by_key(|e| e.0);
                    sq_norm(&b.mlp) + table.iter().map(|e| to_f64(e.1).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        } else if mode.trains_vertices() {
            sq_norm(grad.vertices.as_flattened())
        } else {
            0.0
        }
        .sqrt();
        let attr_norm = (sq_norm(&grad.sh)
            + sq_norm(grad.weights.as_flattened())
            + sq_norm(&grad.opacity)
            + sq_norm(grad.rotation.as_flattened())
            + sq_norm(grad.controls.as_flattened()))
        .sqrt();
        let lr = self.learning_rates_at(self.iteration);
        self.optimizer.set_learning_rates(&lr);
        self.optimizer.step(&mut self.model, &grad, mode);
        for &(k, s) in &grad.screen {
            self.grad_sum[k] += s;
            self.grad_count[k] += 1;
        }
        self.iteration += 1;
        let it = self.iteration;
        let control = if self.config.control_interval > 0
            && it % self.config.control_interval == 0
            && it <= self.config.control_until
        {
            Some(self.adaptive_control())
        } else {
            None
        };
        let inverted = count_inverted(&self.model.base_positions(), &self.model.tets);
        Ok(StepMetrics {
            iteration: it,
            view: vi,
            loss: terms.total,
            l1: terms.l1,
            ssim: terms.ssim,
            mask: terms.mask,
            quality: terms.quality,
            sv: terms.sv,
            psnr: terms.psnr,
            grad_norm_geometry: geo_norm,
            grad_norm_attributes: attr_norm,
            leaves: self.model.forest.leaves().len(),
            masked: self.model.forest.n_masked(),
            inverted,
            control,
        })
    }

    /// Mask low-opacity leaves, split leaves whose mean screen-space gradient
    /// exceeds the threshold, and reset the statistics.
    pub fn adaptive_control(&mut self) -> ControlReport {
        let mut report = ControlReport::default();
        let eps = self.config.mask_threshold;
        let delta = self.config.split_threshold;
        let mut candidates = Vec::new();
        for k in self.model.forest.visible_leaves() {
            if to_f64(sigmoid(self.model.attrs.opacity[k])) < eps {
                self.model.forest.set_masked(k, true);
                report.masked += 1;
                continue;
            }
            if self.grad_count[k] > 0 {
                let mean = self.grad_sum[k] / self.grad_count[k] as f64;
                if mean > delta {
                    candidates.push((k, mean));
                }
            }
        }
        // Largest statistic first; ties by node id.
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut leaves = self.model.forest.leaves().len();
        for (k, _) in candidates {
            if leaves + 3 > self.config.max_leaves {
                break;
            }
            match self.model.subdivide(k) {
                Ok(_) => {
                    report.splits += 1;
                    leaves += 3;
                }
                Err(_) => report.depth_capped += 1,
            }
        }
        self.optimizer.resize(&self.model);
        let n = self.model.forest.n_nodes();
        self.grad_sum = vec![0.0; n];
        self.grad_count = vec![0; n];
        report
    }

    /// Run until `config.iterations`, passing each step's metrics to `sink`.
    pub fn run(&mut self, data: &SceneDataset<T>, mut sink: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let m = self.step(data)?;
            sink(&m)?;
        }
        Ok(())
    }
}

/// Per-view PSNR and SSIM of `model` against a dataset.
pub fn evaluate<T: Real>(model: &Model<T>, data: &SceneDataset<T>) -> Result<Vec<(String, f64, f64)>> {
    data.views
        .iter()
        .map(|v| {
            let (out, _) = model.render(&v.camera, data.background);
            let (s, _) = loss::ssim(&out.rgb, &v.rgb, v.camera.width, v.camera.height, 3)?;
            Ok((v.name.clone(), loss::psnr(&out.rgb, &v.rgb), to_f64(s)))
        })
        .collect()
}

/// Dataset rendered from `model` itself (mask = rendered alpha).
pub fn synthesize_dataset<T: Real>(model: &Model<T>, cameras: &[crate::splat::Camera], background: [f64; 3]) -> SceneDataset<T> {
    let views = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (out, _) = model.render(c, background);
            View { name: format!("view_{i}"), camera: c.clone(), rgb: out.rgb, mask: out.alpha }
        })
        .collect();
    SceneDataset { views, background }
}
