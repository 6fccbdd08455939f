//! Sparse structure-from-motion scenes: posed pinhole views, tracked 3D
//! points, and the world alignment applied on load.
//!
//! Conventions used everywhere downstream:
//! - poses are world-to-camera, `p_cam = R p_world + t`;
//! - the camera looks along +z in its own frame, depth is camera-frame z;
//! - pixel `(row, col)` has its center at image coordinates
//!   `(col + 0.5, row + 0.5)`;
//! - after alignment the vertical axis is +z and the ground plane is x-y.

mod colmap;
mod store;

pub use colmap::{load_sparse_model, write_sparse_model_binary, write_sparse_model_text};
pub use store::{read_scene, write_scene};

use nalgebra::{Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geom::{fit_plane_normal, RigidTransform};
use crate::scalar::Scalar;

/// Posed pinhole view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView<T: Scalar> {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation.
    pub rotation: Rotation3<T>,
    /// World-to-camera translation.
    pub translation: Vector3<T>,
    /// Image file name, relative to the scene's image directory.
    pub image_name: String,
}

/// A 3D point projected into a view: image coordinates plus camera-frame z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

impl<T: Scalar> CameraView<T> {
    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Projects a world point; `None` when it lies at or behind the camera.
    pub fn project(&self, p: &Vector3<T>) -> Option<Projection<T>> {
        let cam = self.world_to_camera(p);
        if cam.z <= T::zero() {
            return None;
        }
        Some(Projection {
            u: self.fx * cam.x / cam.z + self.cx,
            v: self.fy * cam.y / cam.z + self.cy,
            depth: cam.z,
        })
    }

    #[inline]
    pub fn contains(&self, u: T, v: T) -> bool {
        u >= T::zero() && u < T::of(self.width as f64) && v >= T::zero() && v < T::of(self.height as f64)
    }

    /// World-space ray through arbitrary image coordinates. The direction has
    /// unit z in the camera frame, so the ray parameter equals depth.
    pub fn ray_through(&self, u: T, v: T) -> (Vector3<T>, Vector3<T>) {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one());
        (self.center(), self.rotation.inverse() * dir_cam)
    }

    /// World-space ray through the center of pixel `(row, col)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vector3<T>, Vector3<T>) {
        self.ray_through(T::of(col as f64 + 0.5), T::of(row as f64 + 0.5))
    }

    /// Rigidly remaps the pose so that projections of transformed points are
    /// unchanged.
    pub fn apply_transform(&mut self, t: &RigidTransform<T>) {
        let rot_inv = t.rotation.inverse();
        self.rotation *= rot_inv;
        self.translation -= self.rotation * t.translation;
    }
}

/// Tracked sparse point.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint<T: Scalar> {
    pub id: u64,
    pub position: Vector3<T>,
    /// RGB in [0, 1].
    pub color: Vector3<T>,
    /// Ids of views observing this point.
    pub track: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmScene<T: Scalar> {
    pub views: Vec<CameraView<T>>,
    pub points: Vec<SparsePoint<T>>,
    /// Directory holding the images referenced by the views.
    pub images_dir: String,
    /// World transform already applied to views and points.
    pub alignment: RigidTransform<T>,
}

impl<T: Scalar> Default for SfmScene<T> {
    fn default() -> Self {
        Self {
            views: Vec::new(),
            points: Vec::new(),
            images_dir: String::new(),
            alignment: RigidTransform::identity(),
        }
    }
}

impl<T: Scalar> SfmScene<T> {
    pub fn view(&self, id: u32) -> Option<&CameraView<T>> {
        self.views.iter().find(|v| v.id == id)
    }

    /// Ground-plane coordinates of every camera center, in view order.
    pub fn camera_ground_positions(&self) -> Vec<Vector2<T>> {
        self.views.iter().map(|v| v.center().xy()).collect()
    }

    /// Largest distance from the camera-center centroid to any camera,
    /// the scale used for learning rates and density control.
    pub fn camera_extent(&self) -> T {
        if self.views.is_empty() {
            return T::one();
        }
        let centers: Vec<Vector3<T>> = self.views.iter().map(|v| v.center()).collect();
        let centroid = centers.iter().sum::<Vector3<T>>() / T::of(centers.len() as f64);
        let max_d = centers
            .iter()
            .map(|c| (c - centroid).norm())
            .fold(T::zero(), |a, b| a.max(b));
        if max_d > T::zero() {
            max_d * T::of(1.1)
        } else {
            T::one()
        }
    }

    /// Applies a rigid world transform to views and points and records it.
    pub fn apply_transform(&mut self, t: &RigidTransform<T>) {
        for view in &mut self.views {
            view.apply_transform(t);
        }
        for point in &mut self.points {
            point.position = t.apply(&point.position);
        }
        self.alignment = t.compose(&self.alignment);
    }

    /// Every track entry must name an existing view.
    pub fn validate_tracks(&self) -> Result<()> {
        let ids: std::collections::HashSet<u32> = self.views.iter().map(|v| v.id).collect();
        for p in &self.points {
            for &img in &p.track {
                if !ids.contains(&img) {
                    return Err(Error::Invalid(format!(
                        "point {} tracks unknown image id {img}",
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rotation that maps the best-fit plane normal of the camera centers to the
/// vertical (+z) axis. Aerial captures fly in a roughly constant-altitude
/// plane, so this levels the scene without ground-truth markers.
pub fn estimate_manhattan_alignment<T: Scalar>(scene: &SfmScene<T>) -> Result<RigidTransform<T>> {
    let centers: Vec<Vector3<T>> = scene.views.iter().map(|v| v.center()).collect();
    let normal = fit_plane_normal(&centers)
        .map_err(|e| Error::Invalid(format!("manhattan alignment: {e}")))?;
    let mut n = normal.into_inner();
    if n.z < T::zero() {
        n = -n;
    }
    let rotation =
        Rotation3::rotation_between(&n, &Vector3::z()).unwrap_or_else(Rotation3::identity);
    Ok(RigidTransform::new(rotation, Vector3::zeros()))
}
