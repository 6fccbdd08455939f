//! Ray-based splat renderer. Each Gaussian is intersected along the pixel ray
//! at the point of peak density, contributions are alpha-blended front to
//! back, and the whole pass has an analytic adjoint so training can recover
//! gradients for every Gaussian parameter.
//!
//! Ray directions keep unit length along the camera z axis, so the blend
//! parameter `t` of a contribution equals its camera-space depth.

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::gaussians::{sh, GaussianScene};
use crate::raster::DepthMap;
use crate::scalar::Scalar;
use crate::scene::CameraView;

/// Contributions below this alpha are dropped entirely. Together with the
/// Mahalanobis bound below this makes sphere culling lossless: alpha can only
/// reach 1/255 inside the 99% ellipsoid because opacity never exceeds one.
pub const ALPHA_CONTRIB_FLOOR: f64 = 1.0 / 255.0;
/// Upper clamp on a single contribution's alpha.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Blending stops once the remaining transmittance drops below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// sqrt of the 0.99 quantile of a chi-square with three degrees of freedom.
pub const MAHALANOBIS_99: f64 = 3.368_214_175_219_496;
/// Contributions closer than this fraction of the scene extent are clipped.
pub const NEAR_CLIP_RATIO: f64 = 1e-4;

/// Screen-space tile size used to bin Gaussians before per-pixel work.
const TILE: usize = 16;

pub fn near_clip<T: Scalar>(scene_extent: T) -> T {
    scene_extent * T::of(NEAR_CLIP_RATIO)
}

/// Per-view precomputed state for one Gaussian. `m` maps world offsets into
/// the unit-Gaussian frame: `m = S^-1 R^T`, so the squared density exponent at
/// world point p is `|m (p - mean)|^2`.
#[derive(Debug, Clone)]
pub struct PreparedGaussian<T: Scalar> {
    pub id: u32,
    pub mean: Vector3<T>,
    pub m: Matrix3<T>,
    pub opacity: T,
    /// View-dependent color, evaluated once per view from the camera center.
    pub color: Vector3<T>,
    /// World-space radius of the sphere enclosing the 99% ellipsoid.
    pub radius: T,
}

fn inverse_frame<T: Scalar>(rotation: &Matrix3<T>, scales: &Vector3<T>) -> Matrix3<T> {
    let mut m = rotation.transpose();
    for a in 0..3 {
        let row = m.row(a) / scales[a];
        m.set_row(a, &row);
    }
    m
}

pub fn prepare_one<T: Scalar>(
    scene: &GaussianScene<T>,
    i: usize,
    camera_center: &Vector3<T>,
) -> PreparedGaussian<T> {
    let mean = scene.means[i];
    let to_mean = mean - camera_center;
    let dist = to_mean.norm();
    let dir = if dist > T::of(1e-12) { to_mean / dist } else { Vector3::z() };
    let scales = scene.scales(i);
    PreparedGaussian {
        id: i as u32,
        mean,
        m: inverse_frame(&scene.rotation_matrix(i), &scales),
        opacity: scene.opacity(i),
        color: scene.color(i, &dir),
        radius: T::of(MAHALANOBIS_99) * scales.amax(),
    }
}

/// Prepares every Gaussian whose 99% sphere intersects the view frustum,
/// in ascending id order.
pub fn prepare_gaussians<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    t_near: T,
) -> Vec<PreparedGaussian<T>> {
    let center = view.center();
    // Inward-pointing side plane normals in camera space. A camera-space
    // point c is inside the horizontal extent iff 0 <= u <= width, i.e.
    // fx c.x + cx c.z >= 0 and -fx c.x + (width - cx) c.z >= 0.
    let w = T::of(view.width as f64);
    let h = T::of(view.height as f64);
    let planes = [
        Vector3::new(view.fx, T::zero(), view.cx),
        Vector3::new(-view.fx, T::zero(), w - view.cx),
        Vector3::new(T::zero(), view.fy, view.cy),
        Vector3::new(T::zero(), -view.fy, h - view.cy),
    ]
    .map(|n| n.normalize());

    let mut out = Vec::new();
    for i in 0..scene.len() {
        let c = view.world_to_camera(&scene.means[i]);
        let radius = T::of(MAHALANOBIS_99) * scene.scales(i).amax();
        if c.z + radius <= t_near {
            continue;
        }
        if planes.iter().any(|n| n.dot(&c) < -radius) {
            continue;
        }
        out.push(prepare_one(scene, i, &center));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianHit<T: Scalar> {
    /// Ray parameter of peak density; equals camera depth for pixel rays.
    pub t: T,
    /// Squared Mahalanobis distance from the Gaussian center at the peak.
    pub q: T,
    /// Opacity times the density falloff, clamped to [0, 0.99].
    pub alpha: T,
}

/// Peak-density intersection of a ray with one Gaussian. The peak lies where
/// the quadratic `|o_g + t r_g|^2` is minimal.
pub fn intersect_gaussian<T: Scalar>(
    prep: &PreparedGaussian<T>,
    origin: &Vector3<T>,
    dir: &Vector3<T>,
) -> GaussianHit<T> {
    let o_g = prep.m * (origin - prep.mean);
    let r_g = prep.m * dir;
    let rho = r_g.dot(&r_g);
    let t = -o_g.dot(&r_g) / rho;
    let u = o_g + r_g * t;
    let q = u.dot(&u);
    let alpha = (prep.opacity * (-q * T::of(0.5)).exp()).min(T::of(ALPHA_CLAMP));
    GaussianHit { t, q, alpha }
}

/// Unit normal of the Gaussian's level-set surface against the ray: the
/// density gradient direction `Sigma^-1 r`, flipped to face the ray origin.
/// `Sigma^-1 = m^T m`, and `r^T Sigma^-1 r > 0` makes the flip a plain sign.
pub fn gaussian_normal<T: Scalar>(prep: &PreparedGaussian<T>, dir: &Vector3<T>) -> Vector3<T> {
    let v = prep.m.transpose() * (prep.m * dir);
    -v / v.norm()
}

/// One recorded blend contribution of a pixel.
#[derive(Debug, Clone, Copy)]
pub struct Contrib<T: Scalar> {
    pub id: u32,
    pub t: T,
    pub alpha: T,
}

#[derive(Debug, Clone)]
pub struct RayRender<T: Scalar> {
    pub color: Vector3<T>,
    /// Depth of the median contribution (first to push accumulated blend
    /// weight past one half); NaN when the weight never gets there.
    pub depth: T,
    /// Accumulated opacity, one minus the final transmittance.
    pub alpha: T,
    /// Blend-weighted Gaussian normal, unit length or zero.
    pub normal: Vector3<T>,
    pub contribs: Vec<Contrib<T>>,
}

fn shade_pixel<T: Scalar, I: Iterator<Item = usize>>(
    prepared: &[PreparedGaussian<T>],
    candidates: I,
    origin: &Vector3<T>,
    dir: &Vector3<T>,
    t_near: T,
    background: &Vector3<T>,
) -> RayRender<T> {
    let floor = T::of(ALPHA_CONTRIB_FLOOR);
    let mut hits: Vec<(usize, T, T)> = Vec::new();
    for idx in candidates {
        let hit = intersect_gaussian(&prepared[idx], origin, dir);
        if hit.t > t_near && hit.alpha >= floor {
            hits.push((idx, hit.t, hit.alpha));
        }
    }
    hits.sort_unstable_by(|a, b| {
        a.1.partial_cmp(&b.1).unwrap().then_with(|| prepared[a.0].id.cmp(&prepared[b.0].id))
    });

    let mut color = Vector3::zeros();
    let mut normal = Vector3::zeros();
    let mut transmittance = T::one();
    let mut cumulative = T::zero();
    let mut depth = T::of(f64::NAN);
    let half = T::of(0.5);
    let t_floor = T::of(TRANSMITTANCE_FLOOR);
    let mut contribs = Vec::with_capacity(hits.len());
    for (idx, t, alpha) in hits {
        let prep = &prepared[idx];
        let w = alpha * transmittance;
        color += prep.color * w;
        normal += gaussian_normal(prep, dir) * w;
        cumulative += w;
        if !depth.is_finite() && cumulative > half {
            depth = t;
        }
        contribs.push(Contrib { id: prep.id, t, alpha });
        transmittance *= T::one() - alpha;
        if transmittance < t_floor {
            break;
        }
    }
    color += background * transmittance;
    let n = normal.norm();
    if n > T::of(1e-12) {
        normal /= n;
    } else {
        normal = Vector3::zeros();
    }
    RayRender { color, depth, alpha: T::one() - transmittance, normal, contribs }
}

/// Blends every prepared Gaussian along one ray, front to back.
pub fn render_ray<T: Scalar>(
    prepared: &[PreparedGaussian<T>],
    origin: &Vector3<T>,
    dir: &Vector3<T>,
    t_near: T,
    background: &Vector3<T>,
) -> RayRender<T> {
    shade_pixel(prepared, 0..prepared.len(), origin, dir, t_near, background)
}

#[derive(Debug, Clone)]
pub struct RenderBundle<T: Scalar> {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in [0, 1] (before any display clamping).
    pub color: Vec<Vector3<T>>,
    pub depth: DepthMap<T>,
    /// Row-major blended unit normals, zero where nothing rendered.
    pub normal: Vec<Vector3<T>>,
    /// Row-major accumulated opacity.
    pub alpha: Vec<T>,
}

/// Forward render with enough per-pixel state kept to run the adjoint pass:
/// a flat, offset-indexed list of (id, t, alpha) blend contributions.
#[derive(Debug, Clone)]
pub struct ViewForward<T: Scalar> {
    pub bundle: RenderBundle<T>,
    /// offsets[p]..offsets[p + 1] indexes the contributions of pixel p.
    pub offsets: Vec<u32>,
    pub ids: Vec<u32>,
    pub t: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Scalar> ViewForward<T> {
    pub fn n_contribs(&self) -> usize {
        self.ids.len()
    }

    pub fn pixel_range(&self, pixel: usize) -> std::ops::Range<usize> {
        self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize
    }

    /// Pixel index of every contribution, derived from the offsets.
    pub fn pixel_of_contrib(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.n_contribs()];
        for p in 0..self.offsets.len() - 1 {
            for c in self.pixel_range(p) {
                out[c] = p as u32;
            }
        }
        out
    }
}

/// Bins prepared Gaussians into screen tiles. A Gaussian lands in every tile
/// its 99% sphere can project into; bounds come from the corners of the
/// axis-aligned camera-space box around the sphere, which contains it.
fn bin_into_tiles<T: Scalar>(
    prepared: &[PreparedGaussian<T>],
    view: &CameraView<T>,
    t_near: T,
) -> (Vec<Vec<u32>>, usize, usize) {
    let tiles_x = (view.width as usize).div_ceil(TILE);
    let tiles_y = (view.height as usize).div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let (w, h) = (view.width as f64, view.height as f64);
    for (idx, prep) in prepared.iter().enumerate() {
        let c = view.world_to_camera(&prep.mean);
        let r = prep.radius;
        let z_lo = (c.z - r).max(t_near);
        let z_hi = c.z + r;
        let span = |center: T, f: T, principal: T| -> (f64, f64) {
            let lo_num = center - r;
            let hi_num = center + r;
            let lo = (f * lo_num / z_lo).min(f * lo_num / z_hi) + principal;
            let hi = (f * hi_num / z_lo).max(f * hi_num / z_hi) + principal;
            (lo.to_double(), hi.to_double())
        };
        let (u_lo, u_hi) = span(c.x, view.fx, view.cx);
        let (v_lo, v_hi) = span(c.y, view.fy, view.cy);
        if u_hi < 0.0 || v_hi < 0.0 || u_lo > w || v_lo > h {
            continue;
        }
        let tx0 = (u_lo.max(0.0) as usize) / TILE;
        let tx1 = ((u_hi.min(w - 1e-9).max(0.0)) as usize) / TILE;
        let ty0 = (v_lo.max(0.0) as usize) / TILE;
        let ty1 = ((v_hi.min(h - 1e-9).max(0.0)) as usize) / TILE;
        for ty in ty0..=ty1.min(tiles_y - 1) {
            for tx in tx0..=tx1.min(tiles_x - 1) {
                tiles[ty * tiles_x + tx].push(idx as u32);
            }
        }
    }
    (tiles, tiles_x, tiles_y)
}

pub fn render_view_forward<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    t_near: T,
) -> ViewForward<T> {
    let prepared = prepare_gaussians(scene, view, t_near);
    let (tiles, tiles_x, _) = bin_into_tiles(&prepared, view, t_near);
    let width = view.width as usize;
    let height = view.height as usize;
    let background = scene.background;

    let rows: Vec<Vec<RayRender<T>>> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut shaded = Vec::with_capacity(width);
            for col in 0..width {
                let tile = &tiles[(row / TILE) * tiles_x + col / TILE];
                let (origin, dir) = view.pixel_ray(row, col);
                shaded.push(shade_pixel(
                    &prepared,
                    tile.iter().map(|&i| i as usize),
                    &origin,
                    &dir,
                    t_near,
                    &background,
                ));
            }
            shaded
        })
        .collect();

    let mut bundle = RenderBundle {
        width,
        height,
        color: Vec::with_capacity(width * height),
        depth: DepthMap::new(width, height),
        normal: Vec::with_capacity(width * height),
        alpha: Vec::with_capacity(width * height),
    };
    let total: usize = rows.iter().flatten().map(|px| px.contribs.len()).sum();
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut ids = Vec::with_capacity(total);
    let mut t = Vec::with_capacity(total);
    let mut alpha = Vec::with_capacity(total);
    offsets.push(0u32);
    for (row, shaded) in rows.iter().enumerate() {
        for (col, px) in shaded.iter().enumerate() {
            bundle.color.push(px.color);
            bundle.normal.push(px.normal);
            bundle.alpha.push(px.alpha);
            if px.depth.is_finite() {
                bundle.depth.set(row, col, px.depth);
            }
            for c in &px.contribs {
                ids.push(c.id);
                t.push(c.t);
                alpha.push(c.alpha);
            }
            offsets.push(ids.len() as u32);
        }
    }
    ViewForward { bundle, offsets, ids, t, alpha }
}

pub fn render_view<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    t_near: T,
) -> RenderBundle<T> {
    render_view_forward(scene, view, t_near).bundle
}

/// Blend weight of every recorded contribution, recomputed from the stored
/// alphas: `w_k = alpha_k * prod_{j<k} (1 - alpha_j)` within each pixel.
pub fn contrib_weights<T: Scalar>(forward: &ViewForward<T>) -> Vec<T> {
    let mut out = vec![T::zero(); forward.n_contribs()];
    for p in 0..forward.offsets.len() - 1 {
        let mut transmittance = T::one();
        for c in forward.pixel_range(p) {
            out[c] = forward.alpha[c] * transmittance;
            transmittance *= T::one() - forward.alpha[c];
        }
    }
    out
}

/// World-space surface normal of every recorded contribution.
pub fn contrib_normals<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    forward: &ViewForward<T>,
) -> Vec<Vector3<T>> {
    let width = forward.bundle.width;
    let frames: Vec<Matrix3<T>> = (0..scene.len())
        .map(|i| inverse_frame(&scene.rotation_matrix(i), &scene.scales(i)))
        .collect();
    let pixels = forward.pixel_of_contrib();
    (0..forward.n_contribs())
        .into_par_iter()
        .map(|c| {
            let p = pixels[c] as usize;
            let (_, dir) = view.pixel_ray(p / width, p % width);
            let m = &frames[forward.ids[c] as usize];
            let v = m.transpose() * (m * dir);
            -v / v.norm()
        })
        .collect()
}

/// Gradients of a scalar loss with respect to the renderer outputs. Every
/// field is optional; omitted ones contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T: Scalar> {
    /// Per pixel, d loss / d color.
    pub d_color: Option<Vec<Vector3<T>>>,
    /// Per pixel, d loss / d median depth; ignored where depth is invalid.
    pub d_depth: Option<Vec<T>>,
    /// Per recorded contribution, d loss / d blend weight.
    pub d_contrib_w: Option<Vec<T>>,
    /// Per recorded contribution, d loss / d surface normal.
    pub d_contrib_n: Option<Vec<Vector3<T>>>,
}

/// Dense per-Gaussian parameter gradients, laid out like the scene arrays.
#[derive(Debug, Clone)]
pub struct ParamGrads<T: Scalar> {
    pub means: Vec<Vector3<T>>,
    pub quats: Vec<Vector4<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub opacity_logits: Vec<T>,
    pub sh: Vec<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros(scene: &GaussianScene<T>) -> Self {
        let n = scene.len();
        Self {
            means: vec![Vector3::zeros(); n],
            quats: vec![Vector4::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![T::zero(); n],
            sh: vec![T::zero(); scene.sh.len()],
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += *b;
        }
        for (a, b) in self.quats.iter_mut().zip(&other.quats) {
            *a += *b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += *b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *a += *b;
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += *b;
        }
    }
}

/// Derivative of the rotation matrix with respect to each unit quaternion
/// component (w, x, y, z), matching `quat_to_rotation`.
fn rotation_jacobian<T: Scalar>(q: &Vector4<T>) -> [Matrix3<T>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::of(2.0);
    let zero = T::zero();
    let dw = Matrix3::new(zero, -z, y, z, zero, -x, -y, x, zero) * two;
    let dx = Matrix3::new(zero, y, z, y, -x - x, -w, z, w, -x - x) * two;
    let dy = Matrix3::new(-y - y, x, w, x, zero, z, -w, z, -y - y) * two;
    let dz = Matrix3::new(-z - z, -w, x, w, -z - z, y, x, y, zero) * two;
    [dw, dx, dy, dz]
}

struct PixelGrads<T: Scalar> {
    alpha: Vec<T>,
    color: Vec<Vector3<T>>,
    t: Vec<T>,
    normal: Vec<Vector3<T>>,
}

/// Per-contribution adjoints of the blend: walks each pixel's list backwards
/// keeping suffix sums, so the cost stays linear in the contribution count.
fn blend_backward<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    forward: &ViewForward<T>,
    grads: &OutputGrads<T>,
) -> PixelGrads<T> {
    let n = forward.n_contribs();
    let width = forward.bundle.width;
    let height = forward.bundle.height;
    let center = view.center();
    let half = T::of(0.5);

    // View-dependent colors for every Gaussian that appears in some pixel.
    let mut appears = vec![false; scene.len()];
    for &id in &forward.ids {
        appears[id as usize] = true;
    }
    let colors: Vec<Vector3<T>> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            if appears[i] {
                let to_mean = scene.means[i] - center;
                let dist = to_mean.norm();
                let dir = if dist > T::of(1e-12) { to_mean / dist } else { Vector3::z() };
                scene.color(i, &dir)
            } else {
                Vector3::zeros()
            }
        })
        .collect();

    // Rows hold contiguous contribution ranges, so parallelism goes per row.
    let row_results: Vec<PixelGrads<T>> = (0..height)
        .into_par_iter()
        .map(|row| {
            let lo = forward.offsets[row * width] as usize;
            let hi = forward.offsets[(row + 1) * width] as usize;
            let mut out = PixelGrads {
                alpha: vec![T::zero(); hi - lo],
                color: vec![Vector3::zeros(); hi - lo],
                t: vec![T::zero(); hi - lo],
                normal: vec![Vector3::zeros(); hi - lo],
            };
            for col in 0..width {
                let p = row * width + col;
                let range = forward.pixel_range(p);
                if range.is_empty() {
                    continue;
                }
                let g_color = grads.d_color.as_ref().map_or_else(Vector3::zeros, |g| g[p]);
                let g_depth = grads
                    .d_depth
                    .as_ref()
                    .map_or_else(T::zero, |g| if forward.bundle.depth.data[p].is_finite() { g[p] } else { T::zero() });

                // Forward sweep: transmittance before each contribution and
                // the median index.
                let count = range.len();
                let base = range.start;
                let mut trans = vec![T::one(); count];
                let mut cumulative = T::zero();
                let mut median = usize::MAX;
                for k in 0..count {
                    let a = forward.alpha[base + k];
                    if k + 1 < count {
                        trans[k + 1] = trans[k] * (T::one() - a);
                    }
                    cumulative += a * trans[k];
                    if median == usize::MAX && cumulative > half {
                        median = k;
                    }
                }
                let trans_final = trans[count - 1] * (T::one() - forward.alpha[base + count - 1]);

                // Reverse sweep with suffix sums. `suffix_c` is the blended
                // color from k+1 on including background; `suffix_w` the
                // weighted external weight-gradients from k+1 on.
                let mut suffix_c = scene.background * trans_final;
                let mut suffix_w = T::zero();
                for k in (0..count).rev() {
                    let ci = base + k;
                    let a = forward.alpha[ci];
                    let w = a * trans[k];
                    let c = colors[forward.ids[ci] as usize];
                    let gw_ext = grads.d_contrib_w.as_ref().map_or_else(T::zero, |g| g[ci]);
                    let one_minus = T::one() - a;
                    let mut g_alpha = g_color.dot(&(c * trans[k] - suffix_c / one_minus));
                    g_alpha += gw_ext * trans[k] - suffix_w / one_minus;
                    out.alpha[ci - lo] = g_alpha;
                    out.color[ci - lo] = g_color * w;
                    if k == median {
                        out.t[ci - lo] = g_depth;
                    }
                    if let Some(gn) = &grads.d_contrib_n {
                        out.normal[ci - lo] = gn[ci];
                    }
                    suffix_c += c * w;
                    suffix_w += gw_ext * w;
                }
            }
            out
        })
        .collect();

    let mut out = PixelGrads {
        alpha: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
    };
    for row in row_results {
        out.alpha.extend(row.alpha);
        out.color.extend(row.color);
        out.t.extend(row.t);
        out.normal.extend(row.normal);
    }
    out
}

/// Pulls renderer-output gradients back to the Gaussian parameters.
///
/// The peak ray parameter `t*` minimizes the density exponent, so the
/// exponent's own dependence on `t` contributes no gradient at `t*` and the
/// chain through the intersection geometry stays short.
pub fn render_view_backward<T: Scalar>(
    scene: &GaussianScene<T>,
    view: &CameraView<T>,
    forward: &ViewForward<T>,
    grads: &OutputGrads<T>,
) -> ParamGrads<T> {
    let pixel_grads = blend_backward(scene, view, forward, grads);
    let pixels = forward.pixel_of_contrib();
    let width = forward.bundle.width;
    let center = view.center();

    // Contributions grouped per Gaussian, in recording order.
    let mut per_gaussian: Vec<Vec<u32>> = vec![Vec::new(); scene.len()];
    for (ci, &id) in forward.ids.iter().enumerate() {
        per_gaussian[id as usize].push(ci as u32);
    }

    let alpha_clamp = T::of(ALPHA_CLAMP);
    let rows: Vec<(Vector3<T>, Vector4<T>, Vector3<T>, T, Vec<T>)> = (0..scene.len())
        .into_par_iter()
        .map(|g| {
            let coeffs = scene.coeff_count();
            let mut g_sh = vec![T::zero(); coeffs * 3];
            let contribs = &per_gaussian[g];
            if contribs.is_empty() {
                return (Vector3::zeros(), Vector4::zeros(), Vector3::zeros(), T::zero(), g_sh);
            }
            let mean = scene.means[g];
            let rotation = scene.rotation_matrix(g);
            let scales = scene.scales(g);
            let m = inverse_frame(&rotation, &scales);
            let sigma = scene.opacity(g);
            let inv_s2 =
                Vector3::new(T::one() / (scales.x * scales.x), T::one() / (scales.y * scales.y), T::one() / (scales.z * scales.z));

            let mut g_mean = Vector3::zeros();
            let mut g_ls = Vector3::zeros();
            let mut g_logit = T::zero();
            let mut g_rot = Matrix3::zeros();
            let mut g_color_total = Vector3::zeros();

            for &ci in contribs {
                let ci = ci as usize;
                let p = pixels[ci] as usize;
                let (origin, dir) = view.pixel_ray(p / width, p % width);
                let o_g = m * (origin - mean);
                let r_g = m * dir;
                let rho = r_g.dot(&r_g);
                let t = -o_g.dot(&r_g) / rho;
                let u = o_g + r_g * t;
                let q = u.dot(&u);
                let falloff = (-q * T::of(0.5)).exp();
                let alpha_raw = sigma * falloff;

                let mut g_og = Vector3::zeros();
                let mut g_rg = Vector3::zeros();

                let g_alpha = pixel_grads.alpha[ci];
                if alpha_raw <= alpha_clamp {
                    g_logit += g_alpha * falloff * sigma * (T::one() - sigma);
                    let g_q = -g_alpha * alpha_raw * T::of(0.5);
                    g_og += u * (g_q + g_q);
                    g_rg += u * ((g_q + g_q) * t);
                }
                let g_t = pixel_grads.t[ci];
                if g_t != T::zero() {
                    g_og -= r_g * (g_t / rho);
                    g_rg -= (u + r_g * t) * (g_t / rho);
                }

                // Geometry chains: o_g = m (origin - mean), r_g = m dir, and
                // row a of m is column a of R over s_a.
                g_mean -= m.transpose() * g_og;
                let d = origin - mean;
                for a in 0..3 {
                    g_ls[a] -= g_og[a] * o_g[a] + g_rg[a] * r_g[a];
                    for row in 0..3 {
                        g_rot[(row, a)] += (d[row] * g_og[a] + dir[row] * g_rg[a]) / scales[a];
                    }
                }

                // Normal chain: n = -v / |v| with v = Sigma^-1 dir.
                let gn = pixel_grads.normal[ci];
                if gn != Vector3::zeros() {
                    let v = m.transpose() * r_g;
                    let v_norm = v.norm();
                    let v_hat = v / v_norm;
                    let g_v = -(gn - v_hat * v_hat.dot(&gn)) / v_norm;
                    let y = rotation.transpose() * dir;
                    let rt_gv = rotation.transpose() * g_v;
                    for a in 0..3 {
                        g_ls[a] += rt_gv[a] * (-T::of(2.0) * y[a] * inv_s2[a]);
                        for row in 0..3 {
                            g_rot[(row, a)] +=
                                (g_v[row] * y[a] + dir[row] * rt_gv[a]) * inv_s2[a];
                        }
                    }
                }

                g_color_total += pixel_grads.color[ci];
            }

            // Color chain, once per Gaussian: the view direction from the
            // camera center is shared by every contribution.
            if g_color_total != Vector3::zeros() {
                let to_mean = mean - center;
                let dist = to_mean.norm();
                if dist > T::of(1e-12) {
                    let dir = to_mean / dist;
                    let (basis, basis_grad) =
                        sh::basis_with_gradient(scene.active_sh_degree, &dir);
                    let sh_vals = scene.sh_slice(g);
                    // Channels clamped at zero pass no gradient.
                    let mut masked = g_color_total;
                    let offset = T::of(0.5);
                    for ch in 0..3 {
                        let mut val = offset;
                        for c in 0..coeffs {
                            val += basis[c] * sh_vals[c * 3 + ch];
                        }
                        if val < T::zero() {
                            masked[ch] = T::zero();
                        }
                    }
                    let mut g_dir = Vector3::zeros();
                    for c in 0..sh::coeff_count(scene.active_sh_degree).min(coeffs) {
                        for ch in 0..3 {
                            g_sh[c * 3 + ch] += basis[c] * masked[ch];
                        }
                        let weight = masked.x * sh_vals[c * 3]
                            + masked.y * sh_vals[c * 3 + 1]
                            + masked.z * sh_vals[c * 3 + 2];
                        g_dir += basis_grad[c] * weight;
                    }
                    g_mean += (g_dir - dir * dir.dot(&g_dir)) / dist;
                }
            }

            // Quaternion chain. Stored quats are unit length, and the
            // conversion renormalizes, so raw-component gradients are the
            // tangent projection of the unit-sphere gradient.
            let quat = scene.quats[g];
            let jac = rotation_jacobian(&quat);
            let mut g_quat = Vector4::zeros();
            for k in 0..4 {
                g_quat[k] = (jac[k].component_mul(&g_rot)).sum();
            }
            g_quat -= quat * quat.dot(&g_quat);

            (g_mean, g_quat, g_ls, g_logit, g_sh)
        })
        .collect();

    let mut out = ParamGrads::zeros(scene);
    let coeffs = scene.coeff_count();
    for (g, (mean, quat, ls, logit, sh)) in rows.into_iter().enumerate() {
        out.means[g] = mean;
        out.quats[g] = quat;
        out.log_scales[g] = ls;
        out.opacity_logits[g] = logit;
        out.sh[g * coeffs * 3..(g + 1) * coeffs * 3].copy_from_slice(&sh);
    }
    out
}
