//! Training losses and their analytic gradients: a photometric term mixing
//! mean absolute error with structural similarity, a depth-normal consistency
//! term tying splat normals to normals implied by the rendered depth, and a
//! cross-view reprojection term tying depth maps of neighboring views
//! together.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::raster::DepthMap;
use crate::render::ViewForward;
use crate::scalar::Scalar;
use crate::scene::CameraView;

/// Side length of the structural-similarity window.
const SSIM_WINDOW: usize = 11;
/// Standard deviation of the window's Gaussian weighting.
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gauss_kernel<T: Scalar>() -> [T; SSIM_WINDOW] {
    let mut k = [T::zero(); SSIM_WINDOW];
    let mut sum = 0.0;
    let c = (SSIM_WINDOW / 2) as f64;
    let mut raw = [0.0f64; SSIM_WINDOW];
    for (i, r) in raw.iter_mut().enumerate() {
        let d = i as f64 - c;
        *r = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *r;
    }
    for i in 0..SSIM_WINDOW {
        k[i] = T::of(raw[i] / sum);
    }
    k
}

/// Horizontal valid convolution: output width shrinks by the window size.
fn conv_h<T: Scalar>(img: &[T], width: usize, height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let out_w = width - SSIM_WINDOW + 1;
    let mut out = vec![T::zero(); out_w * height];
    for r in 0..height {
        for c in 0..out_w {
            let mut s = T::zero();
            for (i, &ki) in k.iter().enumerate() {
                s += ki * img[r * width + c + i];
            }
            out[r * out_w + c] = s;
        }
    }
    out
}

fn conv_v<T: Scalar>(img: &[T], width: usize, height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let out_h = height - SSIM_WINDOW + 1;
    let mut out = vec![T::zero(); width * out_h];
    for r in 0..out_h {
        for c in 0..width {
            let mut s = T::zero();
            for (i, &ki) in k.iter().enumerate() {
                s += ki * img[(r + i) * width + c];
            }
            out[r * width + c] = s;
        }
    }
    out
}

fn conv_valid<T: Scalar>(img: &[T], width: usize, height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    conv_v(&conv_h(img, width, height, k), width - SSIM_WINDOW + 1, height, k)
}

/// Adjoint of `conv_h`: scatters window fields back onto full image width.
fn spread_h<T: Scalar>(f: &[T], f_width: usize, height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let out_w = f_width + SSIM_WINDOW - 1;
    let mut out = vec![T::zero(); out_w * height];
    for r in 0..height {
        for w in 0..f_width {
            let v = f[r * f_width + w];
            for (i, &ki) in k.iter().enumerate() {
                out[r * out_w + w + i] += ki * v;
            }
        }
    }
    out
}

fn spread_v<T: Scalar>(f: &[T], width: usize, f_height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let out_h = f_height + SSIM_WINDOW - 1;
    let mut out = vec![T::zero(); width * out_h];
    for r in 0..f_height {
        for c in 0..width {
            let v = f[r * width + c];
            for (i, &ki) in k.iter().enumerate() {
                out[(r + i) * width + c] += ki * v;
            }
        }
    }
    out
}

fn spread_full<T: Scalar>(f: &[T], f_width: usize, f_height: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    spread_v(&spread_h(f, f_width, f_height, k), f_width + SSIM_WINDOW - 1, f_height, k)
}

struct ChannelSsim<T: Scalar> {
    sum: T,
    windows: usize,
    grad: Vec<T>,
}

/// Mean structural similarity of one channel over all fully-interior windows,
/// plus its gradient with respect to the first image. The gradient is left
/// unnormalized; the caller divides by the window count.
fn ssim_channel<T: Scalar>(
    x: &[T],
    y: &[T],
    width: usize,
    height: usize,
    k: &[T; SSIM_WINDOW],
    with_grad: bool,
) -> ChannelSsim<T> {
    let vw = width - SSIM_WINDOW + 1;
    let vh = height - SSIM_WINDOW + 1;
    let n = vw * vh;
    let mu_x = conv_valid(x, width, height, k);
    let mu_y = conv_valid(y, width, height, k);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let m_xx = conv_valid(&xx, width, height, k);
    let m_yy = conv_valid(&yy, width, height, k);
    let m_xy = conv_valid(&xy, width, height, k);

    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let two = T::of(2.0);
    let mut sum = T::zero();
    // Window fields for the adjoint pass; see the gather identity below.
    let mut f0 = vec![T::zero(); n];
    let mut f_v = vec![T::zero(); n];
    let mut f_xy = vec![T::zero(); n];
    for w in 0..n {
        let ux = mu_x[w];
        let uy = mu_y[w];
        let vx = m_xx[w] - ux * ux;
        let vy = m_yy[w] - uy * uy;
        let vxy = m_xy[w] - ux * uy;
        let a1 = two * ux * uy + c1;
        let a2 = two * vxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if with_grad {
            let d_ux = two * uy * a2 / (b1 * b2) - two * ux * s / b1;
            let d_vx = -s / b2;
            let d_vxy = two * a1 / (b1 * b2);
            // d ssim / d x_p = sum over windows of
            //   G * [d_ux + 2 (x_p - ux) d_vx + (y_p - uy) d_vxy],
            // split into parts constant per window and parts linear in x, y.
            f0[w] = d_ux - two * ux * d_vx - uy * d_vxy;
            f_v[w] = d_vx;
            f_xy[w] = d_vxy;
        }
    }

    let grad = if with_grad {
        let g0 = spread_full(&f0, vw, vh, k);
        let gv = spread_full(&f_v, vw, vh, k);
        let gxy = spread_full(&f_xy, vw, vh, k);
        (0..width * height)
            .map(|p| g0[p] + two * x[p] * gv[p] + y[p] * gxy[p])
            .collect()
    } else {
        Vec::new()
    };
    ChannelSsim { sum, windows: n, grad }
}

fn channel_plane<T: Scalar>(img: &[Vector3<T>], ch: usize) -> Vec<T> {
    img.iter().map(|v| v[ch]).collect()
}

/// Mean structural similarity of two RGB images over channels and windows.
/// Images smaller than the window have no valid windows and score one.
pub fn ssim_mean<T: Scalar>(x: &[Vector3<T>], y: &[Vector3<T>], width: usize, height: usize) -> T {
    ssim_mean_with_grad_impl(x, y, width, height, false).0
}

/// Mean structural similarity and its per-pixel gradient w.r.t. `x`.
pub fn ssim_mean_with_grad<T: Scalar>(
    x: &[Vector3<T>],
    y: &[Vector3<T>],
    width: usize,
    height: usize,
) -> (T, Vec<Vector3<T>>) {
    ssim_mean_with_grad_impl(x, y, width, height, true)
}

fn ssim_mean_with_grad_impl<T: Scalar>(
    x: &[Vector3<T>],
    y: &[Vector3<T>],
    width: usize,
    height: usize,
    with_grad: bool,
) -> (T, Vec<Vector3<T>>) {
    assert_eq!(x.len(), width * height);
    assert_eq!(y.len(), width * height);
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return (T::one(), vec![Vector3::zeros(); if with_grad { x.len() } else { 0 }]);
    }
    let k = gauss_kernel::<T>();
    let per_channel: Vec<ChannelSsim<T>> = (0..3usize)
        .into_par_iter()
        .map(|ch| {
            ssim_channel(&channel_plane(x, ch), &channel_plane(y, ch), width, height, &k, with_grad)
        })
        .collect();
    let total = T::of((per_channel[0].windows * 3) as f64);
    let mean = per_channel.iter().fold(T::zero(), |acc, c| acc + c.sum) / total;
    let grad = if with_grad {
        (0..x.len())
            .map(|p| {
                Vector3::new(
                    per_channel[0].grad[p] / total,
                    per_channel[1].grad[p] / total,
                    per_channel[2].grad[p] / total,
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    (mean, grad)
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhotometricParts<T> {
    pub l1: T,
    pub ssim: T,
    pub value: T,
}

/// Photometric loss `(1 - lambda) L1 + lambda (1 - ssim)` and its gradient
/// with respect to the rendered image. L1 is the mean absolute error over
/// pixels and channels.
pub fn photometric_with_grad<T: Scalar>(
    render: &[Vector3<T>],
    target: &[Vector3<T>],
    width: usize,
    height: usize,
    lambda: T,
) -> (PhotometricParts<T>, Vec<Vector3<T>>) {
    assert_eq!(render.len(), width * height);
    assert_eq!(target.len(), width * height);
    let m = T::of((render.len() * 3) as f64);
    let mut l1 = T::zero();
    for (r, t) in render.iter().zip(target) {
        let d = r - t;
        l1 += d.x.abs() + d.y.abs() + d.z.abs();
    }
    l1 /= m;
    let (ssim, ssim_grad) = ssim_mean_with_grad(render, target, width, height);
    let value = (T::one() - lambda) * l1 + lambda * (T::one() - ssim);

    let grad = render
        .iter()
        .zip(target)
        .zip(ssim_grad)
        .map(|((r, t), gs)| {
            let mut g = Vector3::zeros();
            for ch in 0..3 {
                let d = r[ch] - t[ch];
                let sign = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g[ch] = (T::one() - lambda) * sign / m - lambda * gs[ch];
            }
            g
        })
        .collect();
    (PhotometricParts { l1, ssim, value }, grad)
}

/// Camera-space surface normals implied by a depth map, from central
/// differences of back-projected points. Border pixels and pixels next to an
/// invalid depth get no normal.
#[derive(Debug, Clone)]
pub struct DepthNormals<T: Scalar> {
    pub normals: Vec<Vector3<T>>,
    pub valid: Vec<bool>,
}

/// Camera-frame ray direction of a pixel center, z component one.
fn pixel_dir<T: Scalar>(view: &CameraView<T>, row: usize, col: usize) -> Vector3<T> {
    let u = T::of(col as f64 + 0.5);
    let v = T::of(row as f64 + 0.5);
    Vector3::new((u - view.cx) / view.fx, (v - view.cy) / view.fy, T::one())
}

struct StencilTaps<T: Scalar> {
    a: Vector3<T>,
    b: Vector3<T>,
    cross: Vector3<T>,
    sign: T,
}

fn stencil<T: Scalar>(depth: &DepthMap<T>, view: &CameraView<T>, row: usize, col: usize) -> Option<StencilTaps<T>> {
    if row == 0 || col == 0 || row + 1 >= depth.height || col + 1 >= depth.width {
        return None;
    }
    let d_l = depth.get(row, col - 1);
    let d_r = depth.get(row, col + 1);
    let d_u = depth.get(row - 1, col);
    let d_d = depth.get(row + 1, col);
    let d_c = depth.get(row, col);
    if !(d_l.is_finite() && d_r.is_finite() && d_u.is_finite() && d_d.is_finite() && d_c.is_finite())
    {
        return None;
    }
    let p_l = pixel_dir(view, row, col - 1) * d_l;
    let p_r = pixel_dir(view, row, col + 1) * d_r;
    let p_u = pixel_dir(view, row - 1, col) * d_u;
    let p_d = pixel_dir(view, row + 1, col) * d_d;
    let a = p_r - p_l;
    let b = p_d - p_u;
    let cross = a.cross(&b);
    if cross.norm() < T::of(1e-12) {
        return None;
    }
    // Default orientation faces the camera for a fronto-parallel surface;
    // flip when the surface is seen from behind.
    let center = pixel_dir(view, row, col) * d_c;
    let sign = if (-cross).dot(&center) <= T::zero() { T::one() } else { -T::one() };
    Some(StencilTaps { a, b, cross, sign })
}

pub fn normals_from_depth<T: Scalar>(depth: &DepthMap<T>, view: &CameraView<T>) -> DepthNormals<T> {
    let mut normals = vec![Vector3::zeros(); depth.width * depth.height];
    let mut valid = vec![false; depth.width * depth.height];
    for row in 0..depth.height {
        for col in 0..depth.width {
            if let Some(s) = stencil(depth, view, row, col) {
                normals[row * depth.width + col] = -s.cross * s.sign / s.cross.norm();
                valid[row * depth.width + col] = true;
            }
        }
    }
    DepthNormals { normals, valid }
}

#[derive(Debug, Clone)]
pub struct NormalLossGrads<T: Scalar> {
    pub value: T,
    /// Number of pixels with a usable depth-derived normal.
    pub valid: usize,
    pub d_contrib_w: Vec<T>,
    pub d_contrib_n: Vec<Vector3<T>>,
    pub d_depth: Vec<T>,
}

/// Depth-normal consistency: per valid pixel, the blend-weighted misalignment
/// `sum_i w_i (1 - n_i . N)` between splat normals and the normal implied by
/// the rendered depth, averaged over valid pixels. Gradients flow into the
/// blend weights, the splat normals, and the four stencil depths behind `N`.
pub fn depth_normal_loss<T: Scalar>(
    view: &CameraView<T>,
    forward: &ViewForward<T>,
    weights: &[T],
    normals: &[Vector3<T>],
) -> NormalLossGrads<T> {
    let depth = &forward.bundle.depth;
    let width = depth.width;
    let derived = normals_from_depth(depth, view);
    let valid_count = derived.valid.iter().filter(|&&v| v).count();
    let mut out = NormalLossGrads {
        value: T::zero(),
        valid: valid_count,
        d_contrib_w: vec![T::zero(); forward.n_contribs()],
        d_contrib_n: vec![Vector3::zeros(); forward.n_contribs()],
        d_depth: vec![T::zero(); width * depth.height],
    };
    if valid_count == 0 {
        return out;
    }
    let inv_v = T::one() / T::of(valid_count as f64);
    let rot = view.rotation.matrix();

    for row in 0..depth.height {
        for col in 0..width {
            let p = row * width + col;
            if !derived.valid[p] {
                continue;
            }
            // The derived normal lives in the camera frame; splat normals are
            // world-space, so rotate the derived one out to world.
            let n_cam = derived.normals[p];
            let n_world = rot.transpose() * n_cam;
            let mut g_n_world = Vector3::zeros();
            for ci in forward.pixel_range(p) {
                let misalign = T::one() - normals[ci].dot(&n_world);
                out.value += weights[ci] * misalign * inv_v;
                out.d_contrib_w[ci] = misalign * inv_v;
                out.d_contrib_n[ci] = -n_world * (weights[ci] * inv_v);
                g_n_world -= normals[ci] * (weights[ci] * inv_v);
            }
            // Chain back through the normalized cross product to the four
            // stencil depths.
            let g_n_cam = rot * g_n_world;
            let s = stencil(depth, view, row, col).expect("valid pixel has a stencil");
            let c_norm = s.cross.norm();
            let c_hat = s.cross / c_norm;
            let g_dir = -(g_n_cam - c_hat * c_hat.dot(&g_n_cam)) * (s.sign / c_norm);
            let g_a = s.b.cross(&g_dir);
            let g_b = g_dir.cross(&s.a);
            out.d_depth[p - 1] -= g_a.dot(&pixel_dir(view, row, col - 1));
            out.d_depth[p + 1] += g_a.dot(&pixel_dir(view, row, col + 1));
            out.d_depth[p - width] -= g_b.dot(&pixel_dir(view, row - 1, col));
            out.d_depth[p + width] += g_b.dot(&pixel_dir(view, row + 1, col));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GeoLossGrads<T: Scalar> {
    pub value: T,
    /// Pixels whose round trip stayed within the threshold.
    pub valid: usize,
    pub d_depth_ref: Vec<T>,
    pub d_depth_nbr: Vec<T>,
}

/// Projection of a world point plus the Jacobian of its pixel coordinates
/// with respect to the world point. None when the point sits behind the view.
fn project_with_jac<T: Scalar>(
    view: &CameraView<T>,
    world: &Vector3<T>,
) -> Option<(Vector2<T>, T, [Vector3<T>; 2])> {
    let cam = view.world_to_camera(world);
    if cam.z <= T::zero() {
        return None;
    }
    let inv_z = T::one() / cam.z;
    let u = view.fx * cam.x * inv_z + view.cx;
    let v = view.fy * cam.y * inv_z + view.cy;
    // Rows of d(u, v)/d cam, pulled back to world through the rotation.
    let du_cam = Vector3::new(view.fx * inv_z, T::zero(), -view.fx * cam.x * inv_z * inv_z);
    let dv_cam = Vector3::new(T::zero(), view.fy * inv_z, -view.fy * cam.y * inv_z * inv_z);
    let rot = view.rotation.matrix();
    Some((Vector2::new(u, v), cam.z, [rot.transpose() * du_cam, rot.transpose() * dv_cam]))
}

/// Back-projects continuous pixel coordinates at a given depth to world.
fn backproject<T: Scalar>(view: &CameraView<T>, u: T, v: T, depth: T) -> Vector3<T> {
    let dir_cam = Vector3::new((u - view.cx) / view.fx, (v - view.cy) / view.fy, T::one());
    view.rotation.matrix().transpose() * (dir_cam * depth - view.translation)
}

/// Cross-view depth consistency. Every valid reference pixel is lifted to
/// world, looked up in the neighbor's depth map, lifted again and reprojected
/// back; the loss is the mean reprojection distance in pixels over pixels
/// whose distance lands in (0, threshold]. The selection mask is treated as
/// fixed: gradients flow only through the distances of selected pixels.
pub fn geometric_consistency_loss<T: Scalar>(
    ref_view: &CameraView<T>,
    ref_depth: &DepthMap<T>,
    nbr_view: &CameraView<T>,
    nbr_depth: &DepthMap<T>,
    threshold_px: T,
) -> GeoLossGrads<T> {
    let mut out = GeoLossGrads {
        value: T::zero(),
        valid: 0,
        d_depth_ref: vec![T::zero(); ref_depth.width * ref_depth.height],
        d_depth_nbr: vec![T::zero(); nbr_depth.width * nbr_depth.height],
    };
    struct Term<T: Scalar> {
        dist: T,
        d_ref: (usize, T),
        d_taps: [(usize, T); 4],
    }
    let mut terms: Vec<Term<T>> = Vec::new();
    for row in 0..ref_depth.height {
        for col in 0..ref_depth.width {
            let d_ref = ref_depth.get(row, col);
            if !d_ref.is_finite() {
                continue;
            }
            let u_p = T::of(col as f64 + 0.5);
            let v_p = T::of(row as f64 + 0.5);
            let k_ref = Vector3::new(
                (u_p - ref_view.cx) / ref_view.fx,
                (v_p - ref_view.cy) / ref_view.fy,
                T::one(),
            );
            let x = backproject(ref_view, u_p, v_p, d_ref);
            let Some((uv_n, _, jac_n)) = project_with_jac(nbr_view, &x) else {
                continue;
            };
            let Some(sample) = nbr_depth.sample_bilinear(uv_n.x, uv_n.y) else {
                continue;
            };
            let x_back = backproject(nbr_view, uv_n.x, uv_n.y, sample.value);
            let Some((uv_r, _, jac_r)) = project_with_jac(ref_view, &x_back) else {
                continue;
            };
            let delta = Vector2::new(uv_r.x - u_p, uv_r.y - v_p);
            let dist = delta.norm();
            if dist <= T::zero() || dist > threshold_px {
                continue;
            }

            // d dist / d delta, then back through the second projection.
            let g_delta = delta / dist;
            let g_x_back = jac_r[0] * g_delta.x + jac_r[1] * g_delta.y;
            // x_back = R_n^T (kappa(u', v') d' - t_n).
            let rot_n = nbr_view.rotation.matrix();
            let kappa_n = Vector3::new(
                (uv_n.x - nbr_view.cx) / nbr_view.fx,
                (uv_n.y - nbr_view.cy) / nbr_view.fy,
                T::one(),
            );
            let g_cam = rot_n * g_x_back;
            let g_dprime = g_cam.dot(&kappa_n) + T::zero();
            let g_uprime_direct = g_cam.x * sample.value / nbr_view.fx;
            let g_vprime_direct = g_cam.y * sample.value / nbr_view.fy;
            // d' also moves with (u', v') across the depth map surface.
            let g_uprime = g_uprime_direct + g_dprime * sample.ddu;
            let g_vprime = g_vprime_direct + g_dprime * sample.ddv;
            // Back through the first projection to the reference depth.
            let g_x = jac_n[0] * g_uprime + jac_n[1] * g_vprime;
            let rot_r = ref_view.rotation.matrix();
            let d_ref_grad = (rot_r * g_x).dot(&k_ref);

            let mut taps = [(0usize, T::zero()); 4];
            for (i, (idx, w)) in sample.taps.iter().enumerate() {
                taps[i] = (*idx, g_dprime * *w);
            }
            terms.push(Term {
                dist,
                d_ref: (row * ref_depth.width + col, d_ref_grad),
                d_taps: taps,
            });
        }
    }

    out.valid = terms.len();
    if terms.is_empty() {
        return out;
    }
    let inv_v = T::one() / T::of(terms.len() as f64);
    for term in terms {
        out.value += term.dist * inv_v;
        out.d_depth_ref[term.d_ref.0] += term.d_ref.1 * inv_v;
        for (idx, g) in term.d_taps {
            out.d_depth_nbr[idx] += g * inv_v;
        }
    }
    out
}

/// Scalar summary of one training step's losses.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossReport<T> {
    pub photo: T,
    pub l1: T,
    pub ssim: T,
    pub normal: T,
    pub geo: T,
    pub total: T,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{logit, GaussianScene};
    use crate::render::{contrib_normals, contrib_weights, render_view_forward};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::{Matrix3, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
            })
            .collect()
    }

    #[test]
    fn ssim_of_identical_images_is_one_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 16 * 16);
        let (s, g) = ssim_mean_with_grad(&img, &img.clone(), 16, 16);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        for v in g {
            assert!(v.norm() < 1e-9);
        }
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        // A period-two checkerboard against its negative: means match but the
        // structure is exactly opposite, driving similarity toward minus one.
        let n = 16;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let v = if (r + c) % 2 == 0 { 0.9 } else { 0.1 };
                a.push(Vector3::new(v, v, v));
                b.push(Vector3::new(1.0 - v, 1.0 - v, 1.0 - v));
            }
        }
        let s = ssim_mean(&a, &b, n, n);
        assert!(s < -0.9, "ssim {s}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = 14;
        let h = 13;
        let mut x = random_image(&mut rng, w * h);
        let y = random_image(&mut rng, w * h);
        let (_, g) = ssim_mean_with_grad(&x, &y, w, h);
        let eps = 1e-6;
        for _ in 0..40 {
            let p = rng.gen_range(0..w * h);
            let ch = rng.gen_range(0..3);
            x[p][ch] += eps;
            let up = ssim_mean(&x, &y, w, h);
            x[p][ch] -= 2.0 * eps;
            let down = ssim_mean(&x, &y, w, h);
            x[p][ch] += eps;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(fd, g[p][ch], epsilon = 1e-6);
        }
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let w = 13;
        let h = 12;
        let mut x = random_image(&mut rng, w * h);
        let y = random_image(&mut rng, w * h);
        let lambda = 0.2;
        let (_, g) = photometric_with_grad(&x, &y, w, h, lambda);
        let eps = 1e-6;
        for _ in 0..40 {
            let p = rng.gen_range(0..w * h);
            let ch = rng.gen_range(0..3);
            x[p][ch] += eps;
            let up = photometric_with_grad(&x, &y, w, h, lambda).0.value;
            x[p][ch] -= 2.0 * eps;
            let down = photometric_with_grad(&x, &y, w, h, lambda).0.value;
            x[p][ch] += eps;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(fd, g[p][ch], epsilon = 1e-6);
        }
    }

    #[test]
    fn photometric_components_on_known_offset() {
        // Uniform offset of 0.1 on a flat image: L1 is exactly 0.1 and the
        // structural term sees identical (zero) variance structure.
        let w = 16;
        let x = vec![Vector3::new(0.5, 0.5, 0.5); w * w];
        let y = vec![Vector3::new(0.4, 0.4, 0.4); w * w];
        let (parts, _) = photometric_with_grad(&x, &y, w, w, 0.2);
        assert_abs_diff_eq!(parts.l1, 0.1, epsilon = 1e-12);
        assert!(parts.ssim > 0.5, "flat images stay structurally similar");
    }

    fn test_view(size: u32) -> CameraView<f64> {
        CameraView {
            id: 0,
            width: size,
            height: size,
            fx: size as f64 * 2.0,
            fy: size as f64 * 2.0,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            rotation: nalgebra::Rotation3::identity(),
            translation: Vector3::zeros(),
            image_name: String::new(),
        }
    }

    #[test]
    fn fronto_parallel_depth_gives_camera_facing_normal() {
        let view = test_view(16);
        let mut depth = DepthMap::new(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                depth.set(r, c, 5.0);
            }
        }
        let n = normals_from_depth(&depth, &view);
        for r in 1..15 {
            for c in 1..15 {
                assert!(n.valid[r * 16 + c]);
                assert_relative_eq!(
                    n.normals[r * 16 + c],
                    Vector3::new(0.0, 0.0, -1.0),
                    epsilon = 1e-10
                );
            }
        }
        // Borders have no full stencil.
        assert!(!n.valid[0]);
    }

    #[test]
    fn slanted_plane_depth_gives_tilted_normal() {
        // Camera-space plane z = z0 + x. Along a pixel ray, x = z (u - cx)/fx
        // so depth solves z (1 - (u - cx)/fx) = z0. The camera-facing normal
        // is (1, 0, -1)/sqrt(2).
        let view = test_view(16);
        let z0 = 5.0;
        let mut depth = DepthMap::new(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                let u = c as f64 + 0.5;
                let s = (u - view.cx) / view.fx;
                depth.set(r, c, z0 / (1.0 - s));
            }
        }
        let n = normals_from_depth(&depth, &view);
        let expect = Vector3::new(1.0, 0.0, -1.0) / 2.0f64.sqrt();
        for r in 1..15 {
            for c in 1..15 {
                assert!(n.valid[r * 16 + c]);
                assert_relative_eq!(n.normals[r * 16 + c], expect, epsilon = 1e-9);
            }
        }
    }

    fn nadir_view(center: Vector3<f64>, size: u32, focal: f64) -> CameraView<f64> {
        let rotation = nalgebra::Rotation3::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, //
            0.0, 0.0, -1.0,
        ));
        let translation = -(rotation * center);
        CameraView {
            id: 0,
            width: size,
            height: size,
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            rotation,
            translation,
            image_name: String::new(),
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene<f64> {
        let mut scene = GaussianScene::empty(0, Vector3::new(0.1, 0.1, 0.1));
        for _ in 0..n {
            scene.means.push(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
            ));
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            scene.quats.push(q / q.norm());
            scene.log_scales.push(Vector3::new(
                rng.gen_range(-1.0..0.0),
                rng.gen_range(-1.0..0.0),
                rng.gen_range(-1.0..0.0),
            ));
            scene.opacity_logits.push(logit(rng.gen_range(0.4..0.8)));
            scene.sh.extend_from_slice(&[0.3, 0.2, 0.1]);
        }
        scene
    }

    #[test]
    fn depth_normal_loss_weight_and_normal_grads_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = random_scene(&mut rng, 12);
        let view = nadir_view(Vector3::new(0.0, 0.0, 6.0), 16, 20.0);
        let fwd = render_view_forward(&scene, &view, 1e-3);
        let w = contrib_weights(&fwd);
        let n = contrib_normals(&scene, &view, &fwd);
        let loss = depth_normal_loss(&view, &fwd, &w, &n);
        assert!(loss.valid > 0);
        // The loss is linear in each weight: the gradient is exact for any
        // step size.
        let mut w2 = w.clone();
        let ci = fwd.pixel_range(fwd.offsets.len() / 2 - 1).start;
        let step = 0.25;
        w2[ci] += step;
        let loss2 = depth_normal_loss(&view, &fwd, &w2, &n);
        assert_abs_diff_eq!(loss2.value - loss.value, loss.d_contrib_w[ci] * step, epsilon = 1e-12);
    }

    #[test]
    fn depth_normal_loss_depth_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let scene = random_scene(&mut rng, 15);
        let view = nadir_view(Vector3::new(0.0, 0.0, 6.0), 16, 20.0);
        let mut fwd = render_view_forward(&scene, &view, 1e-3);
        // Fill every pixel's depth so all interior stencils are usable and
        // perturbations cannot flip validity.
        for p in 0..fwd.bundle.depth.data.len() {
            if !fwd.bundle.depth.data[p].is_finite() {
                fwd.bundle.depth.data[p] = 6.0;
            }
            fwd.bundle.depth.data[p] += rng.gen_range(-0.05..0.05);
        }
        let w = contrib_weights(&fwd);
        let n = contrib_normals(&scene, &view, &fwd);
        let loss = depth_normal_loss(&view, &fwd, &w, &n);
        assert!(loss.valid > 0);
        let eps = 1e-6;
        for _ in 0..30 {
            let p = rng.gen_range(0..16 * 16);
            fwd.bundle.depth.data[p] += eps;
            let up = depth_normal_loss(&view, &fwd, &w, &n).value;
            fwd.bundle.depth.data[p] -= 2.0 * eps;
            let down = depth_normal_loss(&view, &fwd, &w, &n).value;
            fwd.bundle.depth.data[p] += eps;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(fd, loss.d_depth[p], epsilon = 1e-5);
        }
    }

    fn plane_depth(view: &CameraView<f64>, plane_z: f64) -> DepthMap<f64> {
        // Exact ray-plane depth for a horizontal plane in world space.
        let mut depth = DepthMap::new(view.width as usize, view.height as usize);
        for r in 0..view.height as usize {
            for c in 0..view.width as usize {
                let (origin, dir) = view.pixel_ray(r, c);
                let t = (plane_z - origin.z) / dir.z;
                depth.set(r, c, t);
            }
        }
        depth
    }

    #[test]
    fn exact_two_view_depths_have_zero_geometric_loss() {
        let a = nadir_view(Vector3::new(0.0, 0.0, 8.0), 24, 30.0);
        let mut b = nadir_view(Vector3::new(1.0, 0.3, 8.0), 24, 30.0);
        b.id = 1;
        let da = plane_depth(&a, 0.0);
        let db = plane_depth(&b, 0.0);
        let loss = geometric_consistency_loss(&a, &da, &b, &db, 1.0);
        // Round trips land back on the source pixel up to rounding, so the
        // mean distance is at the floating-point noise floor.
        assert!(loss.value < 1e-9, "geometric loss {}", loss.value);
    }

    #[test]
    fn geometric_loss_gradients_match_finite_differences() {
        let a = nadir_view(Vector3::new(0.0, 0.0, 8.0), 16, 20.0);
        let mut b = nadir_view(Vector3::new(0.6, 0.2, 8.0), 16, 20.0);
        b.id = 1;
        let mut da = plane_depth(&a, 0.0);
        let mut db = plane_depth(&b, 0.0);
        // Smooth bumps keep distances strictly inside (0, threshold) so the
        // selection mask is stable under small perturbations.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 0..da.data.len() {
            da.data[p] += 0.01 * ((p % 7) as f64 - 3.0) / 7.0;
            db.data[p] += 0.01 * ((p % 5) as f64 - 2.0) / 5.0;
        }
        let loss = geometric_consistency_loss(&a, &da, &b, &db, 5.0);
        assert!(loss.valid > 20, "expected many valid pixels, got {}", loss.valid);

        let eps = 1e-7;
        for _ in 0..25 {
            let p = rng.gen_range(0..da.data.len());
            da.data[p] += eps;
            let up = geometric_consistency_loss(&a, &da, &b, &db, 5.0).value;
            da.data[p] -= 2.0 * eps;
            let down = geometric_consistency_loss(&a, &da, &b, &db, 5.0).value;
            da.data[p] += eps;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(fd, loss.d_depth_ref[p], epsilon = 1e-4);
        }
        for _ in 0..25 {
            let p = rng.gen_range(0..db.data.len());
            db.data[p] += eps;
            let up = geometric_consistency_loss(&a, &da, &b, &db, 5.0).value;
            db.data[p] -= 2.0 * eps;
            let down = geometric_consistency_loss(&a, &da, &b, &db, 5.0).value;
            db.data[p] += eps;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(fd, loss.d_depth_nbr[p], epsilon = 1e-4);
        }
    }
}
