//! Small geometric primitives shared across the pipeline: rigid transforms,
//! ground-plane rectangles, axis-aligned boxes, and plane fitting.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Proper rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    pub rotation: Rotation3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<T>, translation: Vector3<T>) -> Self {
        Self { rotation, translation }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `self âˆ˜ other`, applying `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    /// Parses 16 whitespace-separated numbers (row-major 4x4). The last row
    /// must be `0 0 0 1` and the upper-left block a rotation.
    pub fn parse_matrix_text(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("bad transform entry: {e}")))?;
        if nums.len() != 16 {
            return Err(Error::Invalid(format!(
                "rigid transform needs 16 numbers, got {}",
                nums.len()
            )));
        }
        let bottom = &nums[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid("transform last row must be 0 0 0 1".into()));
        }
        let m = Matrix3::from_fn(|r, c| T::of(nums[r * 4 + c]));
        let rt = m.transpose() * m;
        let drift = (rt - Matrix3::identity()).norm().to_double();
        if drift > 1e-6 || m.determinant().to_double() < 0.0 {
            return Err(Error::Invalid("transform rotation block is not a rotation".into()));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(m),
            translation: Vector3::new(T::of(nums[3]), T::of(nums[7]), T::of(nums[11])),
        })
    }

    pub fn to_matrix_text(&self) -> String {
        let r = self.rotation.matrix();
        let t = &self.translation;
        let mut out = String::new();
        for row in 0..3 {
            out.push_str(&format!(
                "{:.17} {:.17} {:.17} {:.17}\n",
                r[(row, 0)].to_double(),
                r[(row, 1)].to_double(),
                r[(row, 2)].to_double(),
                t[row].to_double()
            ));
        }
        out.push_str("0 0 0 1\n");
        out
    }
}

/// Axis-aligned rectangle in the ground plane (x, y after alignment).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect2<T: Scalar> {
    pub min: Vector2<T>,
    pub max: Vector2<T>,
}

impl<T: Scalar> Rect2<T> {
    pub fn new(min: Vector2<T>, max: Vector2<T>) -> Self {
        Self { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector2<T>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut rect = Self { min: first, max: first };
        for p in it {
            rect.min.x = rect.min.x.min(p.x);
            rect.min.y = rect.min.y.min(p.y);
            rect.max.x = rect.max.x.max(p.x);
            rect.max.y = rect.max.y.max(p.y);
        }
        Some(rect)
    }

    #[inline]
    pub fn width(&self) -> T {
        self.max.x - self.min.x
    }

    #[inline]
    pub fn height(&self) -> T {
        self.max.y - self.min.y
    }

    /// Lower-left inclusive, upper-right exclusive.
    #[inline]
    pub fn contains_half_open(&self, p: &Vector2<T>) -> bool {
        p.x >= self.min.x && p.x < self.max.x && p.y >= self.min.y && p.y < self.max.y
    }

    /// Closed containment on all edges.
    #[inline]
    pub fn contains_closed(&self, p: &Vector2<T>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Grows each side outward by `ratio` times the extent along that axis.
    pub fn dilate(&self, ratio: T) -> Self {
        let dx = self.width() * ratio;
        let dy = self.height() * ratio;
        Self {
            min: Vector2::new(self.min.x - dx, self.min.y - dy),
            max: Vector2::new(self.max.x + dx, self.max.y + dy),
        }
    }
}

/// Axis-aligned box in world space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb3<T: Scalar> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Scalar> Aabb3<T> {
    pub fn new(min: Vector3<T>, max: Vector3<T>) -> Self {
        Self { min, max }
    }

    /// Slab test. Returns the entry parameter of the first hit with `t > 0`,
    /// where `t` is in units of the (possibly non-unit) direction.
    pub fn ray_entry(&self, origin: &Vector3<T>, dir: &Vector3<T>) -> Option<T> {
        let mut t_enter = T::of(f64::NEG_INFINITY);
        let mut t_exit = T::of(f64::INFINITY);
        for axis in 0..3 {
            let d = dir[axis];
            if d == T::zero() {
                if origin[axis] < self.min[axis] || origin[axis] > self.max[axis] {
                    return None;
                }
                continue;
            }
            let mut t0 = (self.min[axis] - origin[axis]) / d;
            let mut t1 = (self.max[axis] - origin[axis]) / d;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
            if t_enter > t_exit {
                return None;
            }
        }
        (t_enter > T::zero()).then_some(t_enter)
    }

    /// Euclidean distance from `p` to the box surface. Points inside the box
    /// report the distance to the nearest face.
    pub fn surface_distance(&self, p: &Vector3<T>) -> T {
        let mut outside = Vector3::zeros();
        let mut inside_margin = T::of(f64::INFINITY);
        for axis in 0..3 {
            let below = self.min[axis] - p[axis];
            let above = p[axis] - self.max[axis];
            if below > T::zero() {
                outside[axis] = below;
            } else if above > T::zero() {
                outside[axis] = above;
            } else {
                inside_margin = inside_margin.min((-below).min(-above));
            }
        }
        let d_out = outside.norm();
        if d_out > T::zero() {
            d_out
        } else {
            inside_margin
        }
    }
}

/// Unit normal of the least-squares plane through `points`.
///
/// Fails when fewer than three points are given or the points are collinear
/// (the two smallest scatter eigenvalues are indistinguishable from zero).
pub fn fit_plane_normal<T: Scalar>(points: &[Vector3<T>]) -> Result<Unit<Vector3<T>>> {
    if points.len() < 3 {
        return Err(Error::Invalid(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = T::of(points.len() as f64);
    let centroid = points.iter().sum::<Vector3<T>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // Ascending order of eigenvalues by index lookup.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let smallest = eig.eigenvalues[order[0]].max(T::zero());
    let middle = eig.eigenvalues[order[1]];
    let largest = eig.eigenvalues[order[2]];
    let tol = largest * T::of(1e-9);
    if middle <= tol {
        return Err(Error::Invalid("plane fit is degenerate: points are collinear".into()));
    }
    let _ = smallest;
    Ok(Unit::new_normalize(eig.eigenvectors.column(order[0]).into_owned()))
}
