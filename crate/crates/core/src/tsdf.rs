//! Truncated signed distance fusion of depth maps on a regular voxel grid,
//! and isosurface extraction with the classic 256-case cube lookup tables.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::raster::DepthMap;
use crate::scalar::Scalar;
use crate::scene::CameraView;

/// Signed distances divided by the truncation length, so stored values live
/// in [-1, 1]. Values sit on grid points; cubes span adjacent points.
#[derive(Debug, Clone)]
pub struct TsdfVolume<T: Scalar> {
    pub origin: Vector3<T>,
    pub voxel: T,
    /// Grid points per axis.
    pub dims: [usize; 3],
    pub trunc: T,
    pub tsdf: Vec<T>,
    pub weight: Vec<T>,
}

impl<T: Scalar> TsdfVolume<T> {
    pub fn new(origin: Vector3<T>, voxel: T, dims: [usize; 3], trunc: T) -> Result<Self> {
        if voxel <= T::zero() {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if trunc < voxel * T::of(2.0) {
            return Err(Error::Config(
                "truncation must be at least two voxels to bracket the surface".into(),
            ));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Config("volume needs at least two grid points per axis".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self { origin, voxel, dims, trunc, tsdf: vec![T::zero(); n], weight: vec![T::zero(); n] })
    }

    /// Grid covering the box with the given voxel size, padded by one
    /// truncation length on every side so surfaces at the box boundary stay
    /// bracketed.
    pub fn from_bounds(min: Vector3<T>, max: Vector3<T>, voxel: T, trunc: T) -> Result<Self> {
        let origin = min - Vector3::new(trunc, trunc, trunc);
        let padded = max + Vector3::new(trunc, trunc, trunc);
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let span = (padded[a] - origin[a]) / voxel;
            dims[a] = span.to_double().ceil() as usize + 1;
        }
        Self::new(origin, voxel, dims, trunc)
    }

    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<T> {
        self.origin
            + Vector3::new(
                T::of(i as f64) * self.voxel,
                T::of(j as f64) * self.voxel,
                T::of(k as f64) * self.voxel,
            )
    }

    /// Folds one depth map into the volume. Each grid point projects to its
    /// nearest pixel; the signed distance along the ray is the map's depth
    /// minus the point's camera depth, truncated in front and skipped when
    /// the point is more than one truncation behind the surface. Updates are
    /// a running average with unit weight per view.
    pub fn integrate_depth(&mut self, view: &CameraView<T>, depth: &DepthMap<T>) {
        let slab = self.dims[0] * self.dims[1];
        let origin = self.origin;
        let voxel = self.voxel;
        let dims = self.dims;
        let trunc = self.trunc;
        let one = T::one();
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, (tsdf, weight))| {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let p = origin
                            + Vector3::new(
                                T::of(i as f64) * voxel,
                                T::of(j as f64) * voxel,
                                T::of(k as f64) * voxel,
                            );
                        let Some(proj) = view.project(&p) else {
                            continue;
                        };
                        let col = proj.u.to_double().floor();
                        let row = proj.v.to_double().floor();
                        if col < 0.0
                            || row < 0.0
                            || col >= depth.width as f64
                            || row >= depth.height as f64
                        {
                            continue;
                        }
                        let d = depth.get(row as usize, col as usize);
                        if !d.is_finite() {
                            continue;
                        }
                        let sdf = d - proj.depth;
                        if sdf < -trunc {
                            continue;
                        }
                        let value = (sdf / trunc).min(one);
                        let at = j * dims[0] + i;
                        let w = weight[at];
                        tsdf[at] = (tsdf[at] * w + value) / (w + one);
                        weight[at] = w + one;
                    }
                }
            });
    }

    /// Extracts the zero isosurface. Only cubes whose eight corners all
    /// carry observations produce geometry; vertices on shared edges are
    /// emitted once, numbered in encounter order.
    pub fn extract_mesh(&self) -> TriangleMesh<T> {
        let [nx, ny, nz] = self.dims;
        let mut mesh = TriangleMesh::new();
        // Key: (lowest grid-point index of the edge, axis).
        let mut edge_cache: HashMap<(usize, u8), u32> = HashMap::new();

        // Corner offsets in table order, then each table edge as its lowest
        // corner plus the axis it runs along.
        const CORNERS: [(usize, usize, usize); 8] = [
            (0, 0, 0),
            (1, 0, 0),
            (1, 1, 0),
            (0, 1, 0),
            (0, 0, 1),
            (1, 0, 1),
            (1, 1, 1),
            (0, 1, 1),
        ];
        const EDGES: [(usize, usize); 12] = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 0),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 4),
            (0, 4),
            (1, 5),
            (2, 6),
            (3, 7),
        ];

        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut values = [T::zero(); 8];
                    let mut observed = true;
                    let mut cube_index = 0usize;
                    for (c, (dx, dy, dz)) in CORNERS.iter().enumerate() {
                        let at = self.idx(i + dx, j + dy, k + dz);
                        if self.weight[at] <= T::zero() {
                            observed = false;
                            break;
                        }
                        values[c] = self.tsdf[at];
                        if values[c] < T::zero() {
                            cube_index |= 1 << c;
                        }
                    }
                    if !observed || cube_index == 0 || cube_index == 255 {
                        continue;
                    }

                    let mut edge_vertex = [u32::MAX; 12];
                    for (e, (a, b)) in EDGES.iter().enumerate() {
                        if EDGE_TABLE[cube_index] & (1 << e) == 0 {
                            continue;
                        }
                        let (ca, cb) = (CORNERS[*a], CORNERS[*b]);
                        let ga = (i + ca.0, j + ca.1, k + ca.2);
                        let gb = (i + cb.0, j + cb.1, k + cb.2);
                        let ia = self.idx(ga.0, ga.1, ga.2);
                        let ib = self.idx(gb.0, gb.1, gb.2);
                        let key = (ia.min(ib), edge_axis(&ca, &cb));
                        let entry = match edge_cache.entry(key) {
                            std::collections::hash_map::Entry::Occupied(o) => *o.get(),
                            std::collections::hash_map::Entry::Vacant(slot) => {
                                let va = values[*a];
                                let vb = values[*b];
                                let s = va / (va - vb);
                                let pa = self.point(ga.0, ga.1, ga.2);
                                let pb = self.point(gb.0, gb.1, gb.2);
                                let id = mesh.vertices.len() as u32;
                                mesh.vertices.push(pa + (pb - pa) * s);
                                *slot.insert(id)
                            }
                        };
                        edge_vertex[e] = entry;
                    }

                    let row = &TRIANGLE_TABLE[cube_index];
                    let mut t = 0;
                    while t < row.len() && row[t] >= 0 {
                        mesh.triangles.push([
                            edge_vertex[row[t] as usize],
                            edge_vertex[row[t + 1] as usize],
                            edge_vertex[row[t + 2] as usize],
                        ]);
                        t += 3;
                    }
                }
            }
        }
        mesh
    }
}

fn edge_axis(a: &(usize, usize, usize), b: &(usize, usize, usize)) -> u8 {
    if a.0 != b.0 {
        0
    } else if a.1 != b.1 {
        1
    } else {
        2
    }
}

include!("tsdf_tables.rs");
