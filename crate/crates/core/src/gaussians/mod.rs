//! The optimizable scene representation: anisotropic 3D Gaussians with
//! per-primitive rotation, log-scale, opacity logit, and spherical-harmonic
//! color.
//!
//! Storage is structure-of-arrays. Rotations are raw wxyz quaternions kept at
//! unit norm (renormalized after every optimizer step); scales live in log
//! space and are clamped so `exp(log_scale)` stays inside
//! `(SCALE_FLOOR, scene_extent)`.

pub mod sh;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::KdTree3;

/// Lower bound for `exp(log_scale)`.
pub const SCALE_FLOOR: f64 = 1e-7;
/// Opacity assigned to freshly initialized primitives.
pub const INIT_OPACITY: f64 = 0.1;

const CKPT_MAGIC: &[u8; 8] = b"ASGAUSS\0";
const CKPT_VERSION: u32 = 1;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Rotation matrix of a raw (not necessarily unit) wxyz quaternion,
/// normalizing first.
pub fn quat_to_rotation<T: Scalar>(q: &Vector4<T>) -> Matrix3<T> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let two = T::of(2.0);
    Matrix3::new(
        T::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        T::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        T::one() - two * (x * x + y * y),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene<T: Scalar> {
    pub means: Vec<Vector3<T>>,
    /// Raw wxyz quaternions, unit norm.
    pub quats: Vec<Vector4<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub opacity_logits: Vec<T>,
    /// Flat SH coefficients, `[gaussian][coeff][channel]`.
    pub sh: Vec<T>,
    /// Allocated SH band limit.
    pub sh_degree: usize,
    /// Band limit currently used for rendering (unlocked during training).
    pub active_sh_degree: usize,
    pub background: Vector3<T>,
}

impl<T: Scalar> GaussianScene<T> {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn coeff_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn empty(sh_degree: usize, background: Vector3<T>) -> Self {
        Self {
            means: Vec::new(),
            quats: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_degree,
            active_sh_degree: 0,
            background,
        }
    }

    /// One Gaussian per sparse point: position at the point, isotropic scale
    /// from the mean distance to the 3 nearest neighbors, opacity 0.1,
    /// identity rotation, DC color from the point color.
    pub fn init_from_points(
        positions: &[Vector3<T>],
        colors: &[Vector3<T>],
        scene_extent: T,
        sh_degree: usize,
        background: Vector3<T>,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("cannot initialize Gaussians from an empty point set".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Invalid("point and color counts differ".into()));
        }
        if sh_degree > sh::MAX_DEGREE {
            return Err(Error::Invalid(format!("sh degree {sh_degree} exceeds {}", sh::MAX_DEGREE)));
        }
        let n = positions.len();
        let tree = KdTree3::build(positions.to_vec());
        let n_coeffs = sh::coeff_count(sh_degree);
        let mut scene = Self {
            means: positions.to_vec(),
            quats: vec![Vector4::new(T::one(), T::zero(), T::zero(), T::zero()); n],
            log_scales: Vec::with_capacity(n),
            opacity_logits: vec![logit(T::of(INIT_OPACITY)); n],
            sh: vec![T::zero(); n * n_coeffs * 3],
            sh_degree,
            active_sh_degree: 0,
            background,
        };
        let fallback = scene_extent * T::of(0.1);
        for (i, p) in positions.iter().enumerate() {
            let neighbors = tree.k_nearest(p, 3, Some(i as u32));
            let scale = if neighbors.is_empty() {
                fallback
            } else {
                let sum: T = neighbors.iter().map(|(_, d2)| d2.sqrt()).fold(T::zero(), |a, b| a + b);
                sum / T::of(neighbors.len() as f64)
            };
            let clamped = scale
                .max(T::of(SCALE_FLOOR) * T::of(10.0))
                .min(scene_extent * T::of(0.99));
            scene.log_scales.push(Vector3::repeat(clamped.ln()));
        }
        for (i, c) in colors.iter().enumerate() {
            for ch in 0..3 {
                scene.sh[(i * n_coeffs) * 3 + ch] = sh::channel_to_dc(c[ch]);
            }
        }
        Ok(scene)
    }

    #[inline]
    pub fn rotation_matrix(&self, i: usize) -> Matrix3<T> {
        quat_to_rotation(&self.quats[i])
    }

    #[inline]
    pub fn scales(&self, i: usize) -> Vector3<T> {
        self.log_scales[i].map(|s| s.exp())
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    /// `R S S^T R^T` with `S = diag(exp(log_scale))`.
    pub fn covariance(&self, i: usize) -> Matrix3<T> {
        let r = self.rotation_matrix(i);
        let s = self.scales(i);
        let rs = Matrix3::from_columns(&[
            r.column(0) * s.x,
            r.column(1) * s.y,
            r.column(2) * s.z,
        ]);
        rs * rs.transpose()
    }

    /// Per-coefficient RGB slice of Gaussian `i`.
    #[inline]
    pub fn sh_slice(&self, i: usize) -> &[T] {
        let n = self.coeff_count() * 3;
        &self.sh[i * n..(i + 1) * n]
    }

    /// View-dependent color toward unit direction `dir`, clamped to be
    /// non-negative after the 0.5 offset.
    pub fn color(&self, i: usize, dir: &Vector3<T>) -> Vector3<T> {
        let b = sh::basis(self.active_sh_degree, dir);
        let coeffs = self.sh_slice(i);
        let mut c = Vector3::repeat(T::of(0.5));
        for k in 0..sh::coeff_count(self.active_sh_degree) {
            for ch in 0..3 {
                c[ch] += b[k] * coeffs[k * 3 + ch];
            }
        }
        c.map(|v| v.max(T::zero()))
    }

    /// Restores the unit-quaternion invariant after an optimizer update.
    pub fn normalize_quats(&mut self) {
        for q in &mut self.quats {
            let n = q.norm();
            if n > T::zero() {
                *q /= n;
            } else {
                *q = Vector4::new(T::one(), T::zero(), T::zero(), T::zero());
            }
        }
    }

    /// Clamps `exp(log_scale)` into `(SCALE_FLOOR, scene_extent)`.
    pub fn clamp_log_scales(&mut self, scene_extent: T) {
        let lo = T::of(SCALE_FLOOR).ln() + T::of(1e-6);
        let hi = scene_extent.ln() - T::of(1e-6);
        for s in &mut self.log_scales {
            *s = s.map(|v| v.clamp(lo, hi));
        }
    }

    /// Drops all primitives whose flag is false.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let n_coeffs = self.coeff_count();
        let mut write = 0usize;
        for read in 0..self.len() {
            if keep[read] {
                self.means[write] = self.means[read];
                self.quats[write] = self.quats[read];
                self.log_scales[write] = self.log_scales[read];
                self.opacity_logits[write] = self.opacity_logits[read];
                let (dst, src) = (write * n_coeffs * 3, read * n_coeffs * 3);
                for k in 0..n_coeffs * 3 {
                    self.sh[dst + k] = self.sh[src + k];
                }
                write += 1;
            }
        }
        self.means.truncate(write);
        self.quats.truncate(write);
        self.log_scales.truncate(write);
        self.opacity_logits.truncate(write);
        self.sh.truncate(write * n_coeffs * 3);
    }

    /// Appends a copy of primitive `src`, returning the new index.
    pub fn push_copy_of(&mut self, src: usize) -> usize {
        let n_coeffs = self.coeff_count();
        self.means.push(self.means[src]);
        self.quats.push(self.quats[src]);
        self.log_scales.push(self.log_scales[src]);
        self.opacity_logits.push(self.opacity_logits[src]);
        let start = src * n_coeffs * 3;
        for k in 0..n_coeffs * 3 {
            self.sh.push(self.sh[start + k]);
        }
        self.len() - 1
    }

    /// Appends all primitives of `other` (same sh_degree required).
    pub fn extend_from(&mut self, other: &Self) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::Invalid("cannot merge scenes with different sh degrees".into()));
        }
        self.means.extend_from_slice(&other.means);
        self.quats.extend_from_slice(&other.quats);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut go = || -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            w.write_u32::<LittleEndian>(CKPT_VERSION)?;
            w.write_u32::<LittleEndian>(self.sh_degree as u32)?;
            w.write_u32::<LittleEndian>(self.active_sh_degree as u32)?;
            for c in 0..3 {
                w.write_f64::<LittleEndian>(self.background[c].to_double())?;
            }
            w.write_u64::<LittleEndian>(self.len() as u64)?;
            for m in &self.means {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(m[c].to_double())?;
                }
            }
            for q in &self.quats {
                for c in 0..4 {
                    w.write_f64::<LittleEndian>(q[c].to_double())?;
                }
            }
            for s in &self.log_scales {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(s[c].to_double())?;
                }
            }
            for o in &self.opacity_logits {
                w.write_f64::<LittleEndian>(o.to_double())?;
            }
            for v in &self.sh {
                w.write_f64::<LittleEndian>(v.to_double())?;
            }
            Ok(())
        };
        go().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::parse(path, "not a Gaussian checkpoint"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != CKPT_VERSION {
            return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
        }
        let f64_of = |r: &mut BufReader<File>| -> Result<T> {
            Ok(T::of(r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?))
        };
        let sh_degree = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let active = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        if sh_degree > sh::MAX_DEGREE || active > sh_degree {
            return Err(Error::parse(path, "invalid sh degrees in checkpoint"));
        }
        let mut background = Vector3::zeros();
        for c in 0..3 {
            background[c] = f64_of(&mut r)?;
        }
        let n = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let n_coeffs = sh::coeff_count(sh_degree);
        let mut scene = Self {
            means: Vec::with_capacity(n),
            quats: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            sh: Vec::with_capacity(n * n_coeffs * 3),
            sh_degree,
            active_sh_degree: active,
            background,
        };
        for _ in 0..n {
            let mut v = Vector3::zeros();
            for c in 0..3 {
                v[c] = f64_of(&mut r)?;
            }
            scene.means.push(v);
        }
        for _ in 0..n {
            let mut v = Vector4::zeros();
            for c in 0..4 {
                v[c] = f64_of(&mut r)?;
            }
            scene.quats.push(v);
        }
        for _ in 0..n {
            let mut v = Vector3::zeros();
            for c in 0..3 {
                v[c] = f64_of(&mut r)?;
            }
            scene.log_scales.push(v);
        }
        for _ in 0..n {
            scene.opacity_logits.push(f64_of(&mut r)?);
        }
        for _ in 0..n * n_coeffs * 3 {
            scene.sh.push(f64_of(&mut r)?);
        }
        Ok(scene)
    }
}
