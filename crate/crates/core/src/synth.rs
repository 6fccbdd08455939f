//! Procedural test scenes with exact ground truth: a textured ground plane,
//! axis-aligned buildings, a nadir camera grid, ray-cast depth maps, sparse
//! points with observation tracks, and a reference surface cloud.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Aabb3;
use crate::raster::{ColorMap, DepthMap};
use crate::scalar::Scalar;
use crate::scene::{self, CameraView, SfmScene, SparsePoint};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec<T: Scalar> {
    pub center_x: T,
    pub center_y: T,
    pub size_x: T,
    pub size_y: T,
    pub height: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec<T: Scalar> {
    /// Side length of the square ground plane, centered on the origin.
    pub ground_size: T,
    pub boxes: Vec<BoxSpec<T>>,
    pub texture_seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub altitude: T,
    /// Footprint overlap between neighboring cameras, percent of footprint.
    pub overlap_pct: T,
    pub image_size: u32,
    pub focal_px: T,
    /// Target sparse-point count before visibility filtering.
    pub sparse_points: usize,
    /// Standard deviation of additive image noise.
    pub image_noise: T,
    /// Standard deviation of jitter on stored sparse-point positions.
    pub point_noise: T,
    /// Sample spacing of the reference surface cloud; zero picks a default
    /// tied to the ground size.
    pub gt_cloud_spacing: T,
}

impl<T: Scalar> Default for SyntheticSceneSpec<T> {
    fn default() -> Self {
        Self {
            ground_size: T::of(40.0),
            boxes: Vec::new(),
            texture_seed: 7,
            grid_rows: 3,
            grid_cols: 3,
            altitude: T::of(30.0),
            overlap_pct: T::of(60.0),
            image_size: 64,
            focal_px: T::of(64.0),
            sparse_points: 400,
            image_noise: T::zero(),
            point_noise: T::zero(),
            gt_cloud_spacing: T::zero(),
        }
    }
}

impl<T: Scalar> SyntheticSceneSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.ground_size <= T::zero() || self.altitude <= T::zero() {
            return Err(Error::Config("ground size and altitude must be positive".into()));
        }
        if self.overlap_pct < T::zero() || self.overlap_pct > T::of(95.0) {
            return Err(Error::Config("overlap must lie in [0, 95] percent".into()));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("camera grid needs at least one row and column".into()));
        }
        if self.image_size < 8 || self.focal_px <= T::zero() {
            return Err(Error::Config("degenerate camera intrinsics".into()));
        }
        for b in &self.boxes {
            if b.size_x <= T::zero() || b.size_y <= T::zero() || b.height <= T::zero() {
                return Err(Error::Config("box dimensions must be positive".into()));
            }
            if b.height >= self.altitude {
                return Err(Error::Config("boxes must stay below the cameras".into()));
            }
        }
        Ok(())
    }

    fn box_bounds(&self) -> Vec<Aabb3<T>> {
        self.boxes
            .iter()
            .map(|b| {
                let half_x = b.size_x / T::of(2.0);
                let half_y = b.size_y / T::of(2.0);
                Aabb3::new(
                    Vector3::new(b.center_x - half_x, b.center_y - half_y, T::zero()),
                    Vector3::new(b.center_x + half_x, b.center_y + half_y, b.height),
                )
            })
            .collect()
    }

    fn cloud_spacing(&self) -> T {
        if self.gt_cloud_spacing > T::zero() {
            self.gt_cloud_spacing
        } else {
            self.ground_size / T::of(160.0)
        }
    }
}

pub struct SyntheticScene<T: Scalar> {
    pub scene: SfmScene<T>,
    pub images: Vec<ColorMap<T>>,
    pub gt_depths: Vec<DepthMap<T>>,
    pub gt_cloud: Vec<Vector3<T>>,
}

/// Integer-lattice value noise in [0, 1]: hashed corners blended with a
/// smoothstep, two octaves. Pure in its inputs, so every view shades a
/// surface point identically.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
        let mut h = seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15);
        h ^= (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
        h ^= h >> 31;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
    fn octave(seed: u64, x: f64, y: f64) -> f64 {
        let (ix, iy) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - x.floor(), y - y.floor());
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let a = lattice(seed, ix, iy);
        let b = lattice(seed, ix + 1, iy);
        let c = lattice(seed, ix, iy + 1);
        let d = lattice(seed, ix + 1, iy + 1);
        (a * (1.0 - sx) + b * sx) * (1.0 - sy) + (c * (1.0 - sx) + d * sx) * sy
    }
    (octave(seed, x, y) * 2.0 + octave(seed.wrapping_add(1), x * 3.7, y * 3.7)) / 3.0
}

fn box_palette(seed: u64, count: usize) -> Vec<Vector3<f64>> {
    // Hue-rotated palette; saturation and value fixed so neighbors stay
    // distinguishable.
    (0..count)
        .map(|i| {
            let hue = ((seed % 360) as f64 / 360.0 + i as f64 * 0.381_966) % 1.0;
            let h6 = hue * 6.0;
            let sector = h6.floor() as i64 % 6;
            let f = h6 - h6.floor();
            let (v, p, q, t) = (0.85, 0.85 * 0.35, 0.85 * (1.0 - 0.65 * f), 0.85 * (0.35 + 0.65 * f));
            match sector {
                0 => Vector3::new(v, t, p),
                1 => Vector3::new(q, v, p),
                2 => Vector3::new(p, v, t),
                3 => Vector3::new(p, q, v),
                4 => Vector3::new(t, p, v),
                _ => Vector3::new(v, p, q),
            }
        })
        .collect()
}

/// First surface along the ray: the ground plane at z = 0 or a box, whichever
/// is nearer. The parameter shares the caller's ray scaling.
fn raycast<T: Scalar>(
    origin: &Vector3<T>,
    dir: &Vector3<T>,
    boxes: &[Aabb3<T>],
) -> Option<(T, i32)> {
    let mut best: Option<(T, i32)> = None;
    if dir.z < T::zero() {
        let t = -origin.z / dir.z;
        if t > T::zero() {
            best = Some((t, -1));
        }
    }
    for (k, b) in boxes.iter().enumerate() {
        if let Some(t) = b.ray_entry(origin, dir) {
            if t > T::zero() && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, k as i32));
            }
        }
    }
    best
}

fn surface_color<T: Scalar>(
    spec: &SyntheticSceneSpec<T>,
    palette: &[Vector3<f64>],
    point: &Vector3<T>,
    surface: i32,
) -> Vector3<T> {
    let (x, y, z) = (point.x.to_double(), point.y.to_double(), point.z.to_double());
    if surface < 0 {
        // Ground: mid-tone texture with enough contrast for photometric
        // gradients everywhere.
        let n = value_noise(spec.texture_seed, x * 0.8, y * 0.8);
        let m = value_noise(spec.texture_seed ^ 0xa5a5, x * 2.9, y * 2.9);
        Vector3::new(
            T::of(0.25 + 0.5 * n),
            T::of(0.3 + 0.45 * m),
            T::of(0.2 + 0.4 * (1.0 - n)),
        )
    } else {
        let base = palette[surface as usize % palette.len()];
        let n = value_noise(spec.texture_seed ^ 0x0b0b, (x + z) * 1.7, (y - z) * 1.7);
        Vector3::new(
            T::of(base.x * (0.6 + 0.4 * n)),
            T::of(base.y * (0.6 + 0.4 * n)),
            T::of(base.z * (0.6 + 0.4 * n)),
        )
    }
}

fn nadir_pose<T: Scalar>(center: Vector3<T>) -> (Rotation3<T>, Vector3<T>) {
    // Camera +z looks straight down, +x stays east; this keeps projections
    // axis-aligned with the ground for easy hand checks.
    let rotation = Rotation3::from_matrix_unchecked(Matrix3::new(
        T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        -T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        -T::one(),
    ));
    let translation = -(rotation * center);
    (rotation, translation)
}

pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSceneSpec<T>) -> Result<SyntheticScene<T>> {
    spec.validate()?;
    let boxes = spec.box_bounds();
    let palette = box_palette(spec.texture_seed, spec.boxes.len().max(1));

    // Camera grid centered over the ground, spaced by the unoverlapped share
    // of each footprint.
    let footprint = T::of(spec.image_size as f64) / spec.focal_px * spec.altitude;
    let spacing = footprint * (T::one() - spec.overlap_pct / T::of(100.0));
    let mut views = Vec::new();
    for r in 0..spec.grid_rows {
        for c in 0..spec.grid_cols {
            let cx = (T::of(c as f64) - T::of((spec.grid_cols - 1) as f64) / T::of(2.0)) * spacing;
            let cy = (T::of(r as f64) - T::of((spec.grid_rows - 1) as f64) / T::of(2.0)) * spacing;
            let (rotation, translation) = nadir_pose(Vector3::new(cx, cy, spec.altitude));
            let id = (r * spec.grid_cols + c) as u32;
            views.push(CameraView {
                id,
                width: spec.image_size,
                height: spec.image_size,
                fx: spec.focal_px,
                fy: spec.focal_px,
                cx: T::of(spec.image_size as f64 / 2.0),
                cy: T::of(spec.image_size as f64 / 2.0),
                rotation,
                translation,
                image_name: format!("view_{id:04}.png"),
            });
        }
    }

    // Exact depths and shaded images, one ray per pixel center. Ray
    // directions carry unit camera depth, so the parameter is z-depth.
    let size = spec.image_size as usize;
    let rendered: Vec<(DepthMap<T>, ColorMap<T>)> = views
        .par_iter()
        .map(|view| {
            let mut depth = DepthMap::new(size, size);
            let mut image = ColorMap::new(size, size);
            for row in 0..size {
                for col in 0..size {
                    let (origin, dir) = view.pixel_ray(row, col);
                    if let Some((t, surface)) = raycast(&origin, &dir, &boxes) {
                        depth.set(row, col, t);
                        let p = origin + dir * t;
                        image.data[row * size + col] = surface_color(spec, &palette, &p, surface);
                    }
                }
            }
            (depth, image)
        })
        .collect();
    let mut gt_depths = Vec::with_capacity(views.len());
    let mut images = Vec::with_capacity(views.len());
    for (d, i) in rendered {
        gt_depths.push(d);
        images.push(i);
    }
    if spec.image_noise > T::zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ 0x1ae);
        for image in &mut images {
            for px in &mut image.data {
                for ch in 0..3 {
                    let noise = T::of(rng.gen_range(-1.0..1.0)) * spec.image_noise;
                    px[ch] = (px[ch] + noise).clamp(T::zero(), T::one());
                }
            }
        }
    }

    // Sparse points: visible surface samples with their observing views.
    // A sample is kept when at least two cameras see it unoccluded.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ 0x5eed);
    let half = spec.ground_size.to_double() / 2.0;
    let mut points = Vec::new();
    for _ in 0..spec.sparse_points {
        let x = T::of(rng.gen_range(-half..half));
        let y = T::of(rng.gen_range(-half..half));
        // Drop the sample onto whatever surface is topmost there.
        let probe = Vector3::new(x, y, spec.altitude * T::of(2.0));
        let down = Vector3::new(T::zero(), T::zero(), -T::one());
        let Some((t, surface)) = raycast(&probe, &down, &boxes) else {
            continue;
        };
        let mut p = probe + down * t;
        // Sides of boxes only appear via downward probes at their roof
        // edges; bias a fraction of box hits onto a side wall for coverage.
        if surface >= 0 && rng.gen_bool(0.35) {
            let b = &boxes[surface as usize];
            let z = T::of(rng.gen_range(0.05..0.95)) * (b.max.z - b.min.z);
            match rng.gen_range(0..4) {
                0 => p = Vector3::new(b.min.x, p.y, z),
                1 => p = Vector3::new(b.max.x, p.y, z),
                2 => p = Vector3::new(p.x, b.min.y, z),
                _ => p = Vector3::new(p.x, b.max.y, z),
            }
        }
        let mut track = Vec::new();
        for view in &views {
            let Some(proj) = view.project(&p) else { continue };
            if !view.contains(proj.u, proj.v) {
                continue;
            }
            let origin = view.center();
            let dir = (p - origin) / proj.depth;
            let visible = match raycast(&origin, &dir, &boxes) {
                Some((t_scene, _)) => t_scene >= proj.depth - T::of(1e-6),
                None => false,
            };
            if visible {
                track.push(view.id);
            }
        }
        if track.len() < 2 {
            continue;
        }
        let color = surface_color(spec, &palette, &p, surface);
        let mut position = p;
        if spec.point_noise > T::zero() {
            for a in 0..3 {
                position[a] += T::of(rng.gen_range(-1.0..1.0)) * spec.point_noise;
            }
        }
        points.push(SparsePoint { id: points.len() as u64 + 1, position, color, track });
    }

    // Reference cloud: regular samples of every reconstructable surface,
    // skipping ground hidden under buildings.
    let spacing_gt = spec.cloud_spacing();
    let step = spacing_gt.to_double();
    let mut gt_cloud = Vec::new();
    let n_ground = (spec.ground_size.to_double() / step).floor() as i64;
    for iy in 0..n_ground {
        for ix in 0..n_ground {
            let x = -half + (ix as f64 + 0.5) * step;
            let y = -half + (iy as f64 + 0.5) * step;
            let p = Vector3::new(T::of(x), T::of(y), T::zero());
            let covered = boxes.iter().any(|b| {
                p.x >= b.min.x && p.x <= b.max.x && p.y >= b.min.y && p.y <= b.max.y
            });
            if !covered {
                gt_cloud.push(p);
            }
        }
    }
    for b in &boxes {
        let (sx, sy, sz) = (
            (b.max.x - b.min.x).to_double(),
            (b.max.y - b.min.y).to_double(),
            (b.max.z - b.min.z).to_double(),
        );
        let (nx, ny, nz) = (
            (sx / step).ceil().max(1.0) as i64,
            (sy / step).ceil().max(1.0) as i64,
            (sz / step).ceil().max(1.0) as i64,
        );
        for iy in 0..ny {
            for ix in 0..nx {
                let x = b.min.x + T::of((ix as f64 + 0.5) / nx as f64 * sx);
                let y = b.min.y + T::of((iy as f64 + 0.5) / ny as f64 * sy);
                gt_cloud.push(Vector3::new(x, y, b.max.z));
            }
        }
        for iz in 0..nz {
            let z = b.min.z + T::of((iz as f64 + 0.5) / nz as f64 * sz);
            for ix in 0..nx {
                let x = b.min.x + T::of((ix as f64 + 0.5) / nx as f64 * sx);
                gt_cloud.push(Vector3::new(x, b.min.y, z));
                gt_cloud.push(Vector3::new(x, b.max.y, z));
            }
            for iy in 0..ny {
                let y = b.min.y + T::of((iy as f64 + 0.5) / ny as f64 * sy);
                gt_cloud.push(Vector3::new(b.min.x, y, z));
                gt_cloud.push(Vector3::new(b.max.x, y, z));
            }
        }
    }

    let scene = SfmScene {
        views,
        points,
        images_dir: String::new(),
        alignment: crate::geom::RigidTransform::identity(),
    };
    Ok(SyntheticScene { scene, images, gt_depths, gt_cloud })
}

/// Persists a generated scene as a sparse model in text form, PNG images,
/// float-grid depth maps, and a reference cloud, laid out the way the
/// pipeline importer expects.
pub fn write_synthetic<T: Scalar>(out: &Path, synth: &SyntheticScene<T>) -> Result<()> {
    let images_dir = out.join("images");
    let sparse_dir = out.join("sparse");
    let depth_dir = out.join("gt_depth");
    for dir in [&images_dir, &sparse_dir, &depth_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut scene = synth.scene.clone();
    scene.images_dir = images_dir.to_string_lossy().into_owned();
    scene::write_sparse_model_text(&scene, &sparse_dir)?;
    for (view, image) in scene.views.iter().zip(&synth.images) {
        image.save_png(&images_dir.join(&view.image_name))?;
    }
    for (view, depth) in scene.views.iter().zip(&synth.gt_depths) {
        depth.write_to(&depth_dir.join(format!("view_{:04}.fgrid", view.id)))?;
    }
    crate::mesh::write_point_cloud_ply(&synth.gt_cloud, None, &out.join("gt_cloud.ply"), true)?;
    Ok(())
}
