//! Per-block Gaussian optimization: adaptive-moment parameter updates,
//! densification and pruning schedules, late geometric losses, and the
//! core-region merge of independently trained blocks.

use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{logit, GaussianScene};
use crate::geom::Rect2;
use crate::losses::{
    depth_normal_loss, geometric_consistency_loss, photometric_with_grad, LossReport,
};
use crate::partition::{core_owns_position, SceneBlock};
use crate::raster::ColorMap;
use crate::render::{
    contrib_normals, contrib_weights, near_clip, render_view_backward, render_view_forward,
    OutputGrads, ParamGrads,
};
use crate::scalar::Scalar;
use crate::scene::{CameraView, SfmScene};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Divisor applied to the SH learning rate for bands above the constant one.
const SH_REST_LR_DIVISOR: f64 = 20.0;
/// Scale divisor applied to both halves of a split Gaussian.
const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig<T: Scalar> {
    pub total_iters: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_interval: usize,
    /// Iteration at which the depth-normal and multi-view consistency terms
    /// join the photometric loss.
    pub geometric_start: usize,
    pub opacity_reset_interval: usize,
    /// Skip opacity resets once the geometric terms are active, so settled
    /// surfaces are not knocked transparent again.
    pub opacity_reset_stops_at_geometric: bool,
    /// Mean positional-gradient norm above which a Gaussian densifies.
    pub grad_threshold: T,
    /// Scale fraction of the scene extent separating clones from splits.
    pub percent_dense: T,
    /// Opacities below this are pruned at each densification.
    pub prune_opacity: T,
    /// Position rate is multiplied by the scene extent and decays
    /// exponentially from `lr_position` to `lr_position_final`.
    pub lr_position: T,
    pub lr_position_final: T,
    pub lr_rotation: T,
    pub lr_scale: T,
    pub lr_opacity: T,
    /// Rate for the constant color band; higher bands use a fixed divisor.
    pub lr_sh: T,
    /// One more SH band unlocks every this many iterations.
    pub sh_unlock_interval: usize,
    pub sh_degree: usize,
    pub lambda_photo: T,
    pub lambda_n: T,
    pub lambda_geo: T,
    /// SSIM share inside the photometric term.
    pub ssim_lambda: T,
    pub geo_threshold_px: T,
    pub background: [T; 3],
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            total_iters: 50_000,
            densify_start: 500,
            densify_end: 30_000,
            densify_interval: 100,
            geometric_start: 7_000,
            opacity_reset_interval: 3_000,
            opacity_reset_stops_at_geometric: true,
            grad_threshold: T::of(5e-4),
            percent_dense: T::of(0.01),
            prune_opacity: T::of(0.005),
            lr_position: T::of(1.6e-4),
            lr_position_final: T::of(1.6e-6),
            lr_rotation: T::of(1e-3),
            lr_scale: T::of(5e-3),
            lr_opacity: T::of(0.05),
            lr_sh: T::of(2.5e-3),
            sh_unlock_interval: 1_000,
            sh_degree: 3,
            lambda_photo: T::one(),
            lambda_n: T::of(0.05),
            lambda_geo: T::of(0.05),
            ssim_lambda: T::of(0.2),
            geo_threshold_px: T::one(),
            background: [T::zero(); 3],
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.densify_start >= self.densify_end {
            return Err(Error::Config("densification must start before it ends".into()));
        }
        if self.total_iters > 0
            && (self.densify_end > self.total_iters || self.geometric_start > self.total_iters)
        {
            return Err(Error::Config(
                "densify_end and geometric_start must not exceed total_iters".into(),
            ));
        }
        if self.densify_interval == 0 || self.sh_unlock_interval == 0 {
            return Err(Error::Config("schedule intervals must be positive".into()));
        }
        if self.grad_threshold <= T::zero() || self.geo_threshold_px <= T::zero() {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Exponentially interpolated position rate, already scaled by extent.
    fn position_lr(&self, iter: usize, extent: T) -> T {
        let span = self.total_iters.max(1) as f64;
        let s = T::of((iter as f64 / span).clamp(0.0, 1.0));
        let ratio = self.lr_position_final / self.lr_position;
        self.lr_position * ratio.powf(s) * extent
    }
}

/// First and second moment buffers, one row per Gaussian, same layout as the
/// scene arrays. Rows move with their Gaussian across densification.
struct Adam<T: Scalar> {
    step: usize,
    mean_m: Vec<Vector3<T>>,
    mean_v: Vec<Vector3<T>>,
    quat_m: Vec<Vector4<T>>,
    quat_v: Vec<Vector4<T>>,
    scale_m: Vec<Vector3<T>>,
    scale_v: Vec<Vector3<T>>,
    opacity_m: Vec<T>,
    opacity_v: Vec<T>,
    sh_m: Vec<T>,
    sh_v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    fn zeros(scene: &GaussianScene<T>) -> Self {
        let n = scene.len();
        let coeffs = scene.coeff_count();
        Self {
            step: 0,
            mean_m: vec![Vector3::zeros(); n],
            mean_v: vec![Vector3::zeros(); n],
            quat_m: vec![Vector4::zeros(); n],
            quat_v: vec![Vector4::zeros(); n],
            scale_m: vec![Vector3::zeros(); n],
            scale_v: vec![Vector3::zeros(); n],
            opacity_m: vec![T::zero(); n],
            opacity_v: vec![T::zero(); n],
            sh_m: vec![T::zero(); n * coeffs * 3],
            sh_v: vec![T::zero(); n * coeffs * 3],
        }
    }

    fn step(
        &mut self,
        scene: &mut GaussianScene<T>,
        grads: &ParamGrads<T>,
        cfg: &TrainConfig<T>,
        iter: usize,
        extent: T,
    ) {
        self.step += 1;
        let b1 = T::of(ADAM_BETA1);
        let b2 = T::of(ADAM_BETA2);
        let eps = T::of(ADAM_EPS);
        let bias1 = T::one() - b1.powi(self.step as i32);
        let bias2 = T::one() - b2.powi(self.step as i32);
        let update = |param: &mut T, g: T, m: &mut T, v: &mut T, lr: T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        let lr_pos = cfg.position_lr(iter, extent);
        let coeffs = scene.coeff_count();
        for i in 0..scene.len() {
            for a in 0..3 {
                update(
                    &mut scene.means[i][a],
                    grads.means[i][a],
                    &mut self.mean_m[i][a],
                    &mut self.mean_v[i][a],
                    lr_pos,
                );
                update(
                    &mut scene.log_scales[i][a],
                    grads.log_scales[i][a],
                    &mut self.scale_m[i][a],
                    &mut self.scale_v[i][a],
                    cfg.lr_scale,
                );
            }
            for a in 0..4 {
                update(
                    &mut scene.quats[i][a],
                    grads.quats[i][a],
                    &mut self.quat_m[i][a],
                    &mut self.quat_v[i][a],
                    cfg.lr_rotation,
                );
            }
            update(
                &mut scene.opacity_logits[i],
                grads.opacity_logits[i],
                &mut self.opacity_m[i],
                &mut self.opacity_v[i],
                cfg.lr_opacity,
            );
            for c in 0..coeffs * 3 {
                let at = i * coeffs * 3 + c;
                let lr = if c < 3 { cfg.lr_sh } else { cfg.lr_sh / T::of(SH_REST_LR_DIVISOR) };
                update(&mut scene.sh[at], grads.sh[at], &mut self.sh_m[at], &mut self.sh_v[at], lr);
            }
        }
    }

    fn retain(&mut self, keep: &[bool], coeffs: usize) {
        let filter_vec3 = |v: &mut Vec<Vector3<T>>| {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        };
        filter_vec3(&mut self.mean_m);
        filter_vec3(&mut self.mean_v);
        filter_vec3(&mut self.scale_m);
        filter_vec3(&mut self.scale_v);
        let mut i = 0;
        self.quat_m.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        i = 0;
        self.quat_v.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        i = 0;
        self.opacity_m.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        i = 0;
        self.opacity_v.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        let stride = coeffs * 3;
        let filter_flat = |v: &mut Vec<T>| {
            let mut out = Vec::with_capacity(v.len());
            for (g, chunk) in v.chunks(stride).enumerate() {
                if keep[g] {
                    out.extend_from_slice(chunk);
                }
            }
            *v = out;
        };
        filter_flat(&mut self.sh_m);
        filter_flat(&mut self.sh_v);
    }

    /// Appends zeroed moment rows for freshly created Gaussians.
    fn grow_to(&mut self, n: usize, coeffs: usize) {
        self.mean_m.resize(n, Vector3::zeros());
        self.mean_v.resize(n, Vector3::zeros());
        self.quat_m.resize(n, Vector4::zeros());
        self.quat_v.resize(n, Vector4::zeros());
        self.scale_m.resize(n, Vector3::zeros());
        self.scale_v.resize(n, Vector3::zeros());
        self.opacity_m.resize(n, T::zero());
        self.opacity_v.resize(n, T::zero());
        self.sh_m.resize(n * coeffs * 3, T::zero());
        self.sh_v.resize(n * coeffs * 3, T::zero());
    }

    fn reset_opacity_moments(&mut self) {
        self.opacity_m.iter_mut().for_each(|m| *m = T::zero());
        self.opacity_v.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Running mean of positional-gradient norms since the last densification.
#[derive(Debug, Clone)]
pub struct GradStats<T: Scalar> {
    pub accum: Vec<T>,
    pub count: Vec<u32>,
}

impl<T: Scalar> GradStats<T> {
    pub fn zeros(n: usize) -> Self {
        Self { accum: vec![T::zero(); n], count: vec![0; n] }
    }

    pub fn record(&mut self, grads: &ParamGrads<T>) {
        for (i, g) in grads.means.iter().enumerate() {
            let norm = g.norm();
            if norm > T::zero() {
                self.accum[i] += norm;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> T {
        if self.count[i] == 0 {
            T::zero()
        } else {
            self.accum[i] / T::of(self.count[i] as f64)
        }
    }
}

fn gaussian_sample<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    // Box-Muller transform of two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    T::of((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

/// Clones small high-gradient Gaussians in place, splits large ones into two
/// samples of their own distribution at reduced scale, then prunes near
/// transparent ones. Optimizer moments follow their Gaussian; new rows start
/// at zero.
fn densify_and_prune<T: Scalar>(
    scene: &mut GaussianScene<T>,
    adam: &mut Adam<T>,
    stats: &GradStats<T>,
    cfg: &TrainConfig<T>,
    extent: T,
    rng: &mut ChaCha8Rng,
) {
    let n = scene.len();
    let coeffs = scene.coeff_count();
    let dense_limit = cfg.percent_dense * extent;
    let mut keep = vec![true; n];
    let mut split_parents = Vec::new();
    for i in 0..n {
        if stats.mean(i) <= cfg.grad_threshold {
            continue;
        }
        let max_scale = scene.scales(i).max();
        if max_scale < dense_limit {
            // Clone: a second copy at the same mean, nudged apart by later
            // gradients.
            scene.push_copy_of(i);
        } else {
            split_parents.push(i);
            keep.push(true);
            keep[i] = false;
        }
    }
    keep.resize(scene.len(), true);
    for &parent in &split_parents {
        let rotation = scene.rotation_matrix(parent);
        let scales = scene.scales(parent);
        let shrink = T::of(SPLIT_SCALE_DIVISOR).ln();
        for _ in 0..2 {
            let child = scene.push_copy_of(parent);
            let offset = Vector3::new(
                gaussian_sample::<T>(rng) * scales.x,
                gaussian_sample::<T>(rng) * scales.y,
                gaussian_sample::<T>(rng) * scales.z,
            );
            scene.means[child] = scene.means[parent] + rotation * offset;
            scene.log_scales[child] = scene.log_scales[parent].map(|s| s - shrink);
            keep.push(true);
        }
    }
    adam.grow_to(scene.len(), coeffs);

    let prune_floor = cfg.prune_opacity;
    for i in 0..scene.len() {
        if keep[i] && scene.opacity(i) < prune_floor {
            keep[i] = false;
        }
    }
    scene.retain(&keep);
    adam.retain(&keep, coeffs);
}

#[derive(Debug, Clone)]
pub struct BlockCheckpoint<T: Scalar> {
    pub block_id: u32,
    pub scene: GaussianScene<T>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    /// False when training aborted on a non-finite loss; the scene is then
    /// the last finite state.
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    block_id: u32,
    iteration: usize,
    loss_history: Vec<f64>,
    converged: bool,
}

impl<T: Scalar> BlockCheckpoint<T> {
    pub fn gauss_file(block_id: u32) -> String {
        format!("block_{block_id:04}.gauss")
    }

    pub fn meta_file(block_id: u32) -> String {
        format!("block_{block_id:04}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scene.write_checkpoint(&dir.join(Self::gauss_file(self.block_id)))?;
        let meta = CheckpointMeta {
            block_id: self.block_id,
            iteration: self.iteration,
            loss_history: self.loss_history.clone(),
            converged: self.converged,
        };
        let path = dir.join(Self::meta_file(self.block_id));
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::parse(&path, format!("checkpoint meta: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, block_id: u32) -> Result<Self> {
        let scene = GaussianScene::read_checkpoint(&dir.join(Self::gauss_file(block_id)))?;
        let path = dir.join(Self::meta_file(block_id));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::parse(&path, format!("checkpoint meta: {e}")))?;
        if meta.block_id != block_id {
            return Err(Error::Invalid("checkpoint meta names a different block".into()));
        }
        Ok(Self {
            block_id,
            scene,
            iteration: meta.iteration,
            loss_history: meta.loss_history,
            converged: meta.converged,
        })
    }
}

/// Nearest other camera center, the neighbor used for the two-view
/// consistency term.
fn nearest_neighbor_view<T: Scalar>(views: &[CameraView<T>], of: usize) -> usize {
    let center = views[of].center();
    let mut best = of;
    let mut best_d = T::of(f64::MAX);
    for (i, v) in views.iter().enumerate() {
        if i == of {
            continue;
        }
        let d = (v.center() - center).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Camera-spread extent: diameter of the training cameras around their
/// centroid, the length scale for learning rates and densification bounds.
fn camera_extent<T: Scalar>(views: &[CameraView<T>]) -> T {
    let centers: Vec<Vector3<T>> = views.iter().map(|v| v.center()).collect();
    let mut centroid = Vector3::zeros();
    for c in &centers {
        centroid += c;
    }
    centroid /= T::of(centers.len() as f64);
    let mut radius = T::zero();
    for c in &centers {
        radius = radius.max((c - centroid).norm());
    }
    (radius * T::of(2.0)).max(T::of(1e-3))
}

pub fn train_block<T: Scalar>(
    block: &SceneBlock<T>,
    scene_sfm: &SfmScene<T>,
    images: &[ColorMap<T>],
    cfg: &TrainConfig<T>,
) -> Result<BlockCheckpoint<T>> {
    cfg.validate()?;
    if block.view_ids.is_empty() {
        return Err(Error::Invalid("block has no views to train on".into()));
    }
    if block.point_ids.is_empty() {
        return Err(Error::Invalid("block has no points to initialize from".into()));
    }
    // view_ids carry CameraView.id values, which need not equal positions.
    let view_index: std::collections::HashMap<u32, usize> =
        scene_sfm.views.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
    let mut views = Vec::with_capacity(block.view_ids.len());
    let mut targets: Vec<&ColorMap<T>> = Vec::with_capacity(block.view_ids.len());
    for id in &block.view_ids {
        let &at = view_index
            .get(id)
            .ok_or_else(|| Error::Invalid("block references a missing view".into()))?;
        views.push(scene_sfm.views[at].clone());
        targets.push(&images[at]);
    }
    let point_index: std::collections::HashMap<u64, usize> =
        scene_sfm.points.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let mut positions = Vec::with_capacity(block.point_ids.len());
    let mut colors = Vec::with_capacity(block.point_ids.len());
    for pid in &block.point_ids {
        let &at = point_index
            .get(pid)
            .ok_or_else(|| Error::Invalid("block references a missing point".into()))?;
        positions.push(scene_sfm.points[at].position);
        colors.push(scene_sfm.points[at].color);
    }
    let extent = camera_extent(&views);
    let background = Vector3::new(cfg.background[0], cfg.background[1], cfg.background[2]);
    let mut scene = GaussianScene::init_from_points(
        &positions,
        &colors,
        extent,
        cfg.sh_degree,
        background,
    )?;
    let neighbors: Vec<usize> = (0..views.len()).map(|i| nearest_neighbor_view(&views, i)).collect();
    let t_near = near_clip(extent);

    let mut adam = Adam::zeros(&scene);
    let mut stats = GradStats::zeros(scene.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_history = Vec::with_capacity(cfg.total_iters);
    let mut last_finite = scene.clone();

    for iter in 1..=cfg.total_iters {
        scene.active_sh_degree = (iter / cfg.sh_unlock_interval).min(cfg.sh_degree);
        let view_at = rng.gen_range(0..views.len());
        let view = &views[view_at];
        let target = targets[view_at];

        let forward = render_view_forward(&scene, view, t_near);
        let (photo, mut d_color) = photometric_with_grad(
            &forward.bundle.color,
            &target.data,
            forward.bundle.width,
            forward.bundle.height,
            cfg.ssim_lambda,
        );
        let mut report = LossReport {
            photo: photo.value.to_double(),
            l1: photo.l1.to_double(),
            ssim: photo.ssim.to_double(),
            normal: 0.0,
            geo: 0.0,
            total: (cfg.lambda_photo * photo.value).to_double(),
        };
        for g in &mut d_color {
            *g *= cfg.lambda_photo;
        }
        let mut grads_out = OutputGrads {
            d_color: Some(d_color),
            d_depth: None,
            d_contrib_w: None,
            d_contrib_n: None,
        };
        let mut neighbor_grads: Option<ParamGrads<T>> = None;
        let geometric_on = iter >= cfg.geometric_start
            && (cfg.lambda_n != T::zero() || cfg.lambda_geo != T::zero());
        if geometric_on {
            let weights = contrib_weights(&forward);
            let normals = contrib_normals(&scene, view, &forward);
            let nl = depth_normal_loss(view, &forward, &weights, &normals);
            let nbr_at = neighbors[view_at];
            let nbr_forward = render_view_forward(&scene, &views[nbr_at], t_near);
            let gl = geometric_consistency_loss(
                view,
                &forward.bundle.depth,
                &views[nbr_at],
                &nbr_forward.bundle.depth,
                cfg.geo_threshold_px,
            );
            report.normal = nl.value.to_double();
            report.geo = gl.value.to_double();
            report.total += (cfg.lambda_n * nl.value + cfg.lambda_geo * gl.value).to_double();

            let mut d_depth = vec![T::zero(); forward.bundle.color.len()];
            for (d, (a, b)) in d_depth.iter_mut().zip(nl.d_depth.iter().zip(&gl.d_depth_ref)) {
                *d = cfg.lambda_n * *a + cfg.lambda_geo * *b;
            }
            grads_out.d_depth = Some(d_depth);
            grads_out.d_contrib_w =
                Some(nl.d_contrib_w.iter().map(|&w| cfg.lambda_n * w).collect());
            grads_out.d_contrib_n =
                Some(nl.d_contrib_n.iter().map(|n| n * cfg.lambda_n).collect());
            // The consistency term also differentiates through the neighbor
            // view's depth map; that needs its own adjoint pass.
            let d_nbr: Vec<T> = gl.d_depth_nbr.iter().map(|&d| cfg.lambda_geo * d).collect();
            if d_nbr.iter().any(|d| *d != T::zero()) {
                let out = OutputGrads {
                    d_depth: Some(d_nbr),
                    ..OutputGrads::default()
                };
                neighbor_grads =
                    Some(render_view_backward(&scene, &views[nbr_at], &nbr_forward, &out));
            }
        }

        if !report.total.is_finite() {
            return Ok(BlockCheckpoint {
                block_id: block.id,
                scene: last_finite,
                iteration: iter - 1,
                loss_history,
                converged: false,
            });
        }
        last_finite = scene.clone();
        loss_history.push(report.total);

        let mut grads = render_view_backward(&scene, view, &forward, &grads_out);
        if let Some(ng) = &neighbor_grads {
            grads.add(ng);
        }
        stats.record(&grads);
        adam.step(&mut scene, &grads, cfg, iter, extent);
        scene.normalize_quats();
        scene.clamp_log_scales(extent);

        if iter >= cfg.densify_start
            && iter <= cfg.densify_end
            && iter % cfg.densify_interval == 0
        {
            densify_and_prune(&mut scene, &mut adam, &stats, cfg, extent, &mut rng);
            stats = GradStats::zeros(scene.len());
        }

        if cfg.opacity_reset_interval > 0
            && iter % cfg.opacity_reset_interval == 0
            && !(cfg.opacity_reset_stops_at_geometric && iter >= cfg.geometric_start)
        {
            let max_logit = logit(T::of(0.01));
            for o in &mut scene.opacity_logits {
                *o = o.min(max_logit);
            }
            adam.reset_opacity_moments();
        }
    }

    Ok(BlockCheckpoint {
        block_id: block.id,
        scene,
        iteration: cfg.total_iters,
        loss_history,
        converged: true,
    })
}

/// Concatenates the trained blocks, keeping from each only the Gaussians
/// whose ground position its core owns. Cores tile the scene, so the result
/// has no duplicates.
pub fn merge_blocks<T: Scalar>(
    checkpoints: &[BlockCheckpoint<T>],
    blocks: &[SceneBlock<T>],
    scene_rect: &Rect2<T>,
) -> Result<GaussianScene<T>> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid("nothing to merge".into()));
    }
    for a in 0..blocks.len() {
        for b in a + 1..blocks.len() {
            let (ca, cb) = (&blocks[a].core, &blocks[b].core);
            let overlap = ca.min.x < cb.max.x
                && cb.min.x < ca.max.x
                && ca.min.y < cb.max.y
                && cb.min.y < ca.max.y;
            if overlap {
                return Err(Error::Invalid("block cores overlap; partition is inconsistent".into()));
            }
        }
    }
    let first = &checkpoints[0].scene;
    let mut merged = GaussianScene::empty(first.sh_degree, first.background);
    merged.active_sh_degree = first.active_sh_degree;
    for ckpt in checkpoints {
        let block = blocks
            .iter()
            .find(|b| b.id == ckpt.block_id)
            .ok_or_else(|| Error::Invalid("checkpoint without a matching block".into()))?;
        let mut part = ckpt.scene.clone();
        let keep: Vec<bool> = part
            .means
            .iter()
            .map(|m| core_owns_position(block, scene_rect, &Vector2::new(m.x, m.y)))
            .collect();
        part.retain(&keep);
        merged.extend_from(&part)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{partition_scene, PartitionConfig};
    use crate::synth::{generate_synthetic, SyntheticSceneSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg(iters: usize) -> TrainConfig<f64> {
        TrainConfig {
            total_iters: iters,
            densify_start: 10,
            densify_end: if iters == 0 { 50 } else { iters - 1 },
            densify_interval: 25,
            geometric_start: iters,
            opacity_reset_interval: 0,
            sh_degree: 1,
            seed: 11,
            ..Default::default()
        }
    }

    fn synth_block(
        spec: &SyntheticSceneSpec<f64>,
    ) -> (crate::synth::SyntheticScene<f64>, Vec<SceneBlock<f64>>) {
        let synth = generate_synthetic(spec).unwrap();
        let cfg = PartitionConfig { columns: 1, rows: 1, ..Default::default() };
        let blocks = partition_scene(&synth.scene, &cfg).unwrap();
        (synth, blocks)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let mut scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        let reference = scene.clone();
        let mut adam = Adam::zeros(&scene);
        let grads = ParamGrads::zeros(&scene);
        let cfg = TrainConfig::<f64>::default();
        adam.step(&mut scene, &grads, &cfg, 1, 10.0);
        assert_eq!(scene.means, reference.means);
        assert_eq!(scene.quats, reference.quats);
        assert_eq!(scene.log_scales, reference.log_scales);
        assert_eq!(scene.opacity_logits, reference.opacity_logits);
        assert_eq!(scene.sh, reference.sh);
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let spec = SyntheticSceneSpec::<f64> {
            image_size: 16,
            sparse_points: 60,
            ..Default::default()
        };
        let (synth, blocks) = synth_block(&spec);
        let mut cfg = tiny_cfg(0);
        cfg.total_iters = 0;
        cfg.geometric_start = 0;
        let ckpt = train_block(&blocks[0], &synth.scene, &synth.images, &cfg).unwrap();
        assert_eq!(ckpt.iteration, 0);
        assert!(ckpt.loss_history.is_empty());
        // The scene must be exactly the initialization from the block's own
        // points, untouched by any optimizer step.
        let by_id: std::collections::HashMap<u64, &crate::scene::SparsePoint<f64>> =
            synth.scene.points.iter().map(|p| (p.id, p)).collect();
        let positions: Vec<_> =
            blocks[0].point_ids.iter().map(|id| by_id[id].position).collect();
        assert_eq!(ckpt.scene.len(), positions.len());
        assert_eq!(ckpt.scene.means, positions);
    }

    #[test]
    fn same_seed_trains_to_identical_checkpoints() {
        let spec = SyntheticSceneSpec::<f64> {
            image_size: 16,
            sparse_points: 60,
            grid_rows: 2,
            grid_cols: 2,
            ..Default::default()
        };
        let (synth, blocks) = synth_block(&spec);
        let cfg = tiny_cfg(60);
        let a = train_block(&blocks[0], &synth.scene, &synth.images, &cfg).unwrap();
        let b = train_block(&blocks[0], &synth.scene, &synth.images, &cfg).unwrap();
        assert_eq!(a.scene.len(), b.scene.len());
        assert_eq!(a.scene.means, b.scene.means);
        assert_eq!(a.scene.sh, b.scene.sh);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn photometric_loss_decreases_on_a_textured_plane() {
        let spec = SyntheticSceneSpec::<f64> {
            image_size: 24,
            sparse_points: 200,
            grid_rows: 3,
            grid_cols: 3,
            ..Default::default()
        };
        let (synth, blocks) = synth_block(&spec);
        let mut cfg = tiny_cfg(300);
        cfg.densify_start = 100;
        cfg.densify_end = 250;
        let ckpt = train_block(&blocks[0], &synth.scene, &synth.images, &cfg).unwrap();
        assert!(ckpt.converged);
        let early = ckpt.loss_history[9];
        let late = *ckpt.loss_history.last().unwrap();
        assert!(late < early, "loss went {early} -> {late}");
    }

    #[test]
    fn densify_ignores_gaussians_below_the_gradient_threshold() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let mut scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        let mut adam = Adam::zeros(&scene);
        let stats = GradStats::zeros(scene.len());
        let cfg = TrainConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = scene.clone();
        densify_and_prune(&mut scene, &mut adam, &stats, &cfg, 10.0, &mut rng);
        assert_eq!(scene.len(), before.len());
        assert_eq!(scene.means, before.means);
    }

    #[test]
    fn small_high_gradient_gaussian_is_cloned_in_place() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let mut scene =
            GaussianScene::init_from_points(&positions, &colors, 1000.0, 1, Vector3::zeros())
                .unwrap();
        let mut adam = Adam::zeros(&scene);
        let mut stats = GradStats::zeros(scene.len());
        stats.accum[0] = 1.0;
        stats.count[0] = 1;
        let cfg = TrainConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mean0 = scene.means[0];
        // dense limit = percent_dense * 1000 = 10, well above the unit
        // nearest-neighbor scale, so the high-gradient Gaussian clones.
        densify_and_prune(&mut scene, &mut adam, &stats, &cfg, 1000.0, &mut rng);
        assert_eq!(scene.len(), 3);
        assert_eq!(scene.means[2], mean0);
        assert_eq!(adam.mean_m.len(), 3);
    }

    #[test]
    fn large_high_gradient_gaussian_splits_into_two_smaller_ones() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let mut scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        // Make the first Gaussian larger than percent_dense * extent.
        scene.log_scales[0] = Vector3::new(0.5f64.ln(), 0.5f64.ln(), 0.5f64.ln());
        let parent_scale = scene.scales(0);
        let mut adam = Adam::zeros(&scene);
        let mut stats = GradStats::zeros(scene.len());
        stats.accum[0] = 1.0;
        stats.count[0] = 1;
        let cfg = TrainConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        densify_and_prune(&mut scene, &mut adam, &stats, &cfg, 10.0, &mut rng);
        // Parent removed, two children appended after the untouched second.
        assert_eq!(scene.len(), 3);
        for child in 1..3 {
            let s = scene.scales(child);
            assert_abs_diff_eq!(s.x, parent_scale.x / SPLIT_SCALE_DIVISOR, epsilon = 1e-12);
        }
        assert_eq!(adam.opacity_m.len(), 3);
    }

    #[test]
    fn transparent_gaussians_are_pruned() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let mut scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        scene.opacity_logits[1] = logit(0.001);
        let mut adam = Adam::zeros(&scene);
        let stats = GradStats::zeros(scene.len());
        let cfg = TrainConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        densify_and_prune(&mut scene, &mut adam, &stats, &cfg, 10.0, &mut rng);
        assert_eq!(scene.len(), 1);
        assert_eq!(adam.sh_m.len(), scene.coeff_count() * 3);
    }

    #[test]
    fn merge_keeps_only_core_owned_gaussians() {
        let mk_block = |id: u32, x0: f64, x1: f64| SceneBlock {
            id,
            core: Rect2::new(Vector2::new(x0, 0.0), Vector2::new(x1, 10.0)),
            expanded: Rect2::new(Vector2::new(x0 - 1.0, -1.0), Vector2::new(x1 + 1.0, 11.0)),
            view_ids: vec![],
            point_ids: vec![],
        };
        let blocks = vec![mk_block(0, 0.0, 5.0), mk_block(1, 5.0, 10.0)];
        let scene_rect = Rect2::new(Vector2::new(0.0, 0.0), Vector2::new(10.0, 10.0));
        let mk_ckpt = |id: u32, core_x: f64, margin_x: f64| {
            let positions =
                vec![Vector3::new(core_x, 5.0, 0.0), Vector3::new(margin_x, 5.0, 0.0)];
            let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
            BlockCheckpoint {
                block_id: id,
                scene: GaussianScene::init_from_points(
                    &positions,
                    &colors,
                    10.0,
                    1,
                    Vector3::zeros(),
                )
                .unwrap(),
                iteration: 1,
                loss_history: vec![],
                converged: true,
            }
        };
        // Each block holds one Gaussian in its own core and one in the
        // neighbor's territory picked up through the expansion margin.
        let ckpts = vec![mk_ckpt(0, 2.0, 6.0), mk_ckpt(1, 8.0, 3.0)];
        let merged = merge_blocks(&ckpts, &blocks, &scene_rect).unwrap();
        assert_eq!(merged.len(), 2);
        let xs: Vec<f64> = merged.means.iter().map(|m| m.x).collect();
        assert!(xs.contains(&2.0) && xs.contains(&8.0));
    }

    #[test]
    fn shared_edge_gaussian_belongs_to_the_left_block() {
        let mk_block = |id: u32, x0: f64, x1: f64| SceneBlock {
            id,
            core: Rect2::new(Vector2::new(x0, 0.0), Vector2::new(x1, 10.0)),
            expanded: Rect2::new(Vector2::new(x0, 0.0), Vector2::new(x1, 10.0)),
            view_ids: vec![],
            point_ids: vec![],
        };
        let blocks = vec![mk_block(0, 0.0, 5.0), mk_block(1, 5.0, 10.0)];
        let scene_rect = Rect2::new(Vector2::new(0.0, 0.0), Vector2::new(10.0, 10.0));
        let positions = vec![Vector3::new(5.0, 5.0, 0.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5)];
        let scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        let mk = |id: u32| BlockCheckpoint {
            block_id: id,
            scene: scene.clone(),
            iteration: 0,
            loss_history: vec![],
            converged: true,
        };
        let merged = merge_blocks(&[mk(0), mk(1)], &blocks, &scene_rect).unwrap();
        // The x = 5 Gaussian sits on the shared edge: half-open cores give
        // it to block 1 ([5, 10)), once.
        assert_eq!(merged.len(), 1);
    }

    #[test]
    fn single_block_merge_is_the_identity() {
        let block = SceneBlock {
            id: 0,
            core: Rect2::new(Vector2::new(-10.0, -10.0), Vector2::new(10.0, 10.0)),
            expanded: Rect2::new(Vector2::new(-12.0, -12.0), Vector2::new(12.0, 12.0)),
            view_ids: vec![],
            point_ids: vec![],
        };
        let scene_rect = block.core;
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(3.0, -2.0, 1.0)];
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); 2];
        let scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 1, Vector3::zeros())
                .unwrap();
        let ckpt = BlockCheckpoint {
            block_id: 0,
            scene: scene.clone(),
            iteration: 0,
            loss_history: vec![],
            converged: true,
        };
        let merged = merge_blocks(&[ckpt], &[block], &scene_rect).unwrap();
        assert_eq!(merged.len(), scene.len());
        assert_eq!(merged.means, scene.means);
    }

    #[test]
    fn checkpoints_round_trip_through_disk() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0)];
        let colors = vec![Vector3::new(0.2, 0.4, 0.6); 2];
        let scene =
            GaussianScene::init_from_points(&positions, &colors, 10.0, 2, Vector3::zeros())
                .unwrap();
        let ckpt = BlockCheckpoint {
            block_id: 3,
            scene,
            iteration: 120,
            loss_history: vec![0.5, 0.4, 0.3],
            converged: true,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let loaded = BlockCheckpoint::<f64>::load(dir.path(), 3).unwrap();
        assert_eq!(loaded.iteration, 120);
        assert_eq!(loaded.loss_history, ckpt.loss_history);
        assert_eq!(loaded.scene.means, ckpt.scene.means);
        assert_eq!(loaded.scene.sh, ckpt.scene.sh);
    }
}
