//! Triangle meshes and point clouds: containers, polygon-file round trips,
//! and a z-buffer depth rasterizer used to compare meshes against depth maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::raster::DepthMap;
use crate::scalar::Scalar;
use crate::scene::CameraView;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh<T: Scalar> {
    pub vertices: Vec<Vector3<T>>,
    /// Optional per-vertex unit normals, same length as `vertices`.
    pub normals: Option<Vec<Vector3<T>>>,
    pub triangles: Vec<[u32; 3]>,
}

impl<T: Scalar> TriangleMesh<T> {
    pub fn new() -> Self {
        Self { vertices: Vec::new(), normals: None, triangles: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Every triangle index must point at a vertex.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Invalid(format!("triangle references vertex {:?} of {n}", t)));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.vertices.len() {
                return Err(Error::Invalid("normal count differs from vertex count".into()));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for TriangleMesh<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn write_ply_header(
    w: &mut impl Write,
    binary: bool,
    n_vertices: usize,
    with_normals: bool,
    with_colors: bool,
    n_faces: Option<usize>,
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    if binary {
        writeln!(w, "format binary_little_endian 1.0")?;
    } else {
        writeln!(w, "format ascii 1.0")?;
    }
    writeln!(w, "element vertex {n_vertices}")?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if with_normals {
        writeln!(w, "property double nx")?;
        writeln!(w, "property double ny")?;
        writeln!(w, "property double nz")?;
    }
    if with_colors {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    if let Some(n) = n_faces {
        writeln!(w, "element face {n}")?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")
}

pub fn write_mesh_ply<T: Scalar>(mesh: &TriangleMesh<T>, path: &Path, binary: bool) -> Result<()> {
    mesh.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write_ply_header(
            w,
            binary,
            mesh.vertices.len(),
            mesh.normals.is_some(),
            false,
            Some(mesh.triangles.len()),
        )?;
        for (i, v) in mesh.vertices.iter().enumerate() {
            if binary {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(v[c].to_double())?;
                }
                if let Some(normals) = &mesh.normals {
                    for c in 0..3 {
                        w.write_f64::<LittleEndian>(normals[i][c].to_double())?;
                    }
                }
            } else {
                write!(w, "{:.17} {:.17} {:.17}", v.x.to_double(), v.y.to_double(), v.z.to_double())?;
                if let Some(normals) = &mesh.normals {
                    let n = &normals[i];
                    write!(w, " {:.17} {:.17} {:.17}", n.x.to_double(), n.y.to_double(), n.z.to_double())?;
                }
                writeln!(w)?;
            }
        }
        for t in &mesh.triangles {
            if binary {
                w.write_u8(3)?;
                for &i in t {
                    w.write_i32::<LittleEndian>(i as i32)?;
                }
            } else {
                writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        Ok(())
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

pub fn write_point_cloud_ply<T: Scalar>(
    points: &[Vector3<T>],
    colors: Option<&[Vector3<T>]>,
    path: &Path,
    binary: bool,
) -> Result<()> {
    if let Some(colors) = colors {
        if colors.len() != points.len() {
            return Err(Error::Invalid("color count differs from point count".into()));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write_ply_header(w, binary, points.len(), false, colors.is_some(), None)?;
        for (i, p) in points.iter().enumerate() {
            let rgb = colors.map(|c| {
                let to = |v: T| (v.to_double().clamp(0.0, 1.0) * 255.0).round() as u8;
                [to(c[i].x), to(c[i].y), to(c[i].z)]
            });
            if binary {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(p[c].to_double())?;
                }
                if let Some(rgb) = rgb {
                    w.write_all(&rgb)?;
                }
            } else {
                write!(w, "{:.17} {:.17} {:.17}", p.x.to_double(), p.y.to_double(), p.z.to_double())?;
                if let Some(rgb) = rgb {
                    write!(w, " {} {} {}", rgb[0], rgb[1], rgb[2])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    Float,
    Double,
    Uchar,
    Int,
    Uint,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "float" | "float32" => Some(Self::Float),
            "double" | "float64" => Some(Self::Double),
            "uchar" | "uint8" => Some(Self::Uchar),
            "int" | "int32" => Some(Self::Int),
            "uint" | "uint32" => Some(Self::Uint),
            _ => None,
        }
    }

    fn read_f64(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Self::Float => r.read_f32::<LittleEndian>()? as f64,
            Self::Double => r.read_f64::<LittleEndian>()?,
            Self::Uchar => r.read_u8()? as f64,
            Self::Int => r.read_i32::<LittleEndian>()? as f64,
            Self::Uint => r.read_u32::<LittleEndian>()? as f64,
        })
    }
}

struct PlyElement {
    name: String,
    count: usize,
    /// (name, type, is_list, list_count_type)
    properties: Vec<(String, PlyScalar, bool, PlyScalar)>,
}

struct PlyHeader {
    binary: bool,
    elements: Vec<PlyElement>,
}

fn parse_ply_header(r: &mut impl BufRead, path: &Path) -> Result<PlyHeader> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim() != "ply" {
        return Err(Error::parse(path, "missing ply magic"));
    }
    let mut binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::parse(path, "header ended early"));
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                binary = match tok.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => {
                        return Err(Error::parse(
                            path,
                            format!("unsupported ply format {other:?}"),
                        ))
                    }
                };
            }
            Some("comment") => {}
            Some("element") => {
                let count: usize = tok
                    .get(2)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad element line"))?;
                elements.push(PlyElement {
                    name: tok[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, "property before element"))?;
                if tok.get(1) == Some(&"list") {
                    let count_ty = PlyScalar::parse(tok[2])
                        .ok_or_else(|| Error::parse(path, "bad list count type"))?;
                    let item_ty = PlyScalar::parse(tok[3])
                        .ok_or_else(|| Error::parse(path, "bad list item type"))?;
                    elem.properties.push((tok[4].to_string(), item_ty, true, count_ty));
                } else {
                    let ty = PlyScalar::parse(tok[1])
                        .ok_or_else(|| Error::parse(path, format!("bad property type {}", tok[1])))?;
                    elem.properties.push((tok[2].to_string(), ty, false, PlyScalar::Uchar));
                }
            }
            Some("end_header") => break,
            other => return Err(Error::parse(path, format!("unexpected header line {other:?}"))),
        }
    }
    Ok(PlyHeader { binary, elements })
}

/// Reads a polygon file written by this crate (and common float variants).
pub fn read_mesh_ply<T: Scalar>(path: &Path) -> Result<TriangleMesh<T>> {
    let (points, normals, _colors, faces) = read_ply_impl(path)?;
    let mesh = TriangleMesh { vertices: points, normals, triangles: faces };
    mesh.validate()?;
    Ok(mesh)
}

/// Reads only the vertex positions (and colors when present).
pub fn read_point_cloud_ply<T: Scalar>(
    path: &Path,
) -> Result<(Vec<Vector3<T>>, Option<Vec<Vector3<T>>>)> {
    let (points, _normals, colors, _faces) = read_ply_impl(path)?;
    Ok((points, colors))
}

type PlyContents<T> =
    (Vec<Vector3<T>>, Option<Vec<Vector3<T>>>, Option<Vec<Vector3<T>>>, Vec<[u32; 3]>);

fn read_ply_impl<T: Scalar>(path: &Path) -> Result<PlyContents<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = parse_ply_header(&mut r, path)?;

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();

    for elem in &header.elements {
        if elem.name == "vertex" {
            let find = |n: &str| elem.properties.iter().position(|(p, _, _, _)| p == n);
            let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::parse(path, "vertex element lacks x/y/z")),
            };
            let normal_idx = match (find("nx"), find("ny"), find("nz")) {
                (Some(a), Some(b), Some(c)) => Some((a, b, c)),
                _ => None,
            };
            let color_idx = match (find("red"), find("green"), find("blue")) {
                (Some(a), Some(b), Some(c)) => Some((a, b, c)),
                _ => None,
            };
            for _ in 0..elem.count {
                let values = read_element_values(&mut r, elem, header.binary, path)?;
                points.push(Vector3::new(
                    T::of(values[ix][0]),
                    T::of(values[iy][0]),
                    T::of(values[iz][0]),
                ));
                if let Some((a, b, c)) = normal_idx {
                    normals.push(Vector3::new(
                        T::of(values[a][0]),
                        T::of(values[b][0]),
                        T::of(values[c][0]),
                    ));
                }
                if let Some((a, b, c)) = color_idx {
                    colors.push(Vector3::new(
                        T::of(values[a][0] / 255.0),
                        T::of(values[b][0] / 255.0),
                        T::of(values[c][0] / 255.0),
                    ));
                }
            }
        } else if elem.name == "face" {
            let list_pos = elem
                .properties
                .iter()
                .position(|(_, _, is_list, _)| *is_list)
                .ok_or_else(|| Error::parse(path, "face element lacks an index list"))?;
            for _ in 0..elem.count {
                let values = read_element_values(&mut r, elem, header.binary, path)?;
                let idx = &values[list_pos];
                if idx.len() != 3 {
                    return Err(Error::parse(path, "only triangle faces are supported"));
                }
                faces.push([idx[0] as u32, idx[1] as u32, idx[2] as u32]);
            }
        } else {
            // Skip unknown elements record by record.
            for _ in 0..elem.count {
                read_element_values(&mut r, elem, header.binary, path)?;
            }
        }
    }

    let normals = (!normals.is_empty()).then_some(normals);
    let colors = (!colors.is_empty()).then_some(colors);
    Ok((points, normals, colors, faces))
}

fn read_element_values(
    r: &mut BufReader<File>,
    elem: &PlyElement,
    binary: bool,
    path: &Path,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(elem.properties.len());
    if binary {
        for (_, ty, is_list, count_ty) in &elem.properties {
            if *is_list {
                let n = count_ty.read_f64(r).map_err(|e| Error::io(path, e))? as usize;
                let mut vals = Vec::with_capacity(n);
                for _ in 0..n {
                    vals.push(ty.read_f64(r).map_err(|e| Error::io(path, e))?);
                }
                out.push(vals);
            } else {
                out.push(vec![ty.read_f64(r).map_err(|e| Error::io(path, e))?]);
            }
        }
    } else {
        let mut line = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::parse(path, "file ended inside element data"));
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        let mut toks = line.split_whitespace();
        for (_, _, is_list, _) in &elem.properties {
            if *is_list {
                let n: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad list count"))?;
                let mut vals = Vec::with_capacity(n);
                for _ in 0..n {
                    let v: f64 = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(path, "bad list value"))?;
                    vals.push(v);
                }
                out.push(vals);
            } else {
                let v: f64 = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad property value"))?;
                out.push(vec![v]);
            }
        }
    }
    Ok(out)
}

/// Renders the depth of a mesh from a view with a z-buffer. Depth is
/// perspective-correct (1/z interpolation). Pixels no triangle covers stay
/// invalid.
pub fn rasterize_mesh_depth<T: Scalar>(mesh: &TriangleMesh<T>, view: &CameraView<T>) -> DepthMap<T> {
    let mut depth = DepthMap::new(view.width as usize, view.height as usize);
    let near = T::of(1e-6);
    let cam: Vec<Vector3<T>> = mesh.vertices.iter().map(|v| view.world_to_camera(v)).collect();
    let screen: Vec<(T, T, T)> = cam
        .iter()
        .map(|c| {
            if c.z > near {
                (view.fx * c.x / c.z + view.cx, view.fy * c.y / c.z + view.cy, T::one() / c.z)
            } else {
                (T::zero(), T::zero(), T::zero())
            }
        })
        .collect();
    let half = T::of(0.5);
    for tri in &mesh.triangles {
        let [a, b, c] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        if cam[a].z <= near || cam[b].z <= near || cam[c].z <= near {
            continue;
        }
        let (ua, va, wa) = screen[a];
        let (ub, vb, wb) = screen[b];
        let (uc, vc, wc) = screen[c];
        let area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va);
        if area.abs().to_double() < 1e-12 {
            continue;
        }
        let min_u = ua.min(ub).min(uc).to_double().floor().max(0.0) as usize;
        let max_u = (ua.max(ub).max(uc).to_double().ceil() as usize).min(view.width as usize);
        let min_v = va.min(vb).min(vc).to_double().floor().max(0.0) as usize;
        let max_v = (va.max(vb).max(vc).to_double().ceil() as usize).min(view.height as usize);
        for row in min_v..max_v {
            for col in min_u..max_u {
                let pu = T::of(col as f64) + half;
                let pv = T::of(row as f64) + half;
                let w0 = ((ub - pu) * (vc - pv) - (uc - pu) * (vb - pv)) / area;
                let w1 = ((uc - pu) * (va - pv) - (ua - pu) * (vc - pv)) / area;
                let w2 = T::one() - w0 - w1;
                if w0 < T::zero() || w1 < T::zero() || w2 < T::zero() {
                    continue;
                }
                let inv_z = w0 * wa + w1 * wb + w2 * wc;
                if inv_z <= T::zero() {
                    continue;
                }
                let z = T::one() / inv_z;
                let cur: T = depth.get(row, col);
                if !cur.is_finite() || z < cur {
                    depth.set(row, col, z);
                }
            }
        }
    }
    depth
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Rotation3};

    fn quad_mesh(z: f64) -> TriangleMesh<f64> {
        TriangleMesh {
            vertices: vec![
                Vector3::new(-50.0, -50.0, z),
                Vector3::new(50.0, -50.0, z),
                Vector3::new(50.0, 50.0, z),
                Vector3::new(-50.0, 50.0, z),
            ],
            normals: None,
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    fn nadir_view(center_z: f64) -> CameraView<f64> {
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, //
            0.0, 0.0, -1.0,
        ));
        let translation = -(rotation * Vector3::new(0.0, 0.0, center_z));
        CameraView {
            id: 0,
            width: 32,
            height: 32,
            fx: 40.0,
            fy: 40.0,
            cx: 16.0,
            cy: 16.0,
            rotation,
            translation,
            image_name: String::new(),
        }
    }

    #[test]
    fn mesh_ply_roundtrip_ascii_and_binary() {
        let mut mesh = quad_mesh(1.5);
        mesh.normals = Some(vec![Vector3::new(0.0, 0.0, 1.0); 4]);
        for binary in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ply");
            write_mesh_ply(&mesh, &path, binary).unwrap();
            let back = read_mesh_ply::<f64>(&path).unwrap();
            assert_eq!(back.triangles, mesh.triangles);
            for (a, b) in mesh.vertices.iter().zip(back.vertices.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
            assert!(back.normals.is_some());
        }
    }

    #[test]
    fn point_cloud_ply_roundtrip_with_colors() {
        let pts = vec![Vector3::new(0.25f64, -1.5, 3.0), Vector3::new(9.0, 2.0, -4.25)];
        let colors = vec![Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, 1.0, 0.25)];
        for binary in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.ply");
            write_point_cloud_ply(&pts, Some(&colors), &path, binary).unwrap();
            let (back, back_colors) = read_point_cloud_ply::<f64>(&path).unwrap();
            assert_relative_eq!(back[0], pts[0], epsilon = 1e-12);
            assert_relative_eq!(back[1], pts[1], epsilon = 1e-12);
            let bc = back_colors.unwrap();
            assert!((bc[0] - colors[0]).amax() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn invalid_triangle_index_is_rejected() {
        let mesh = TriangleMesh::<f64> {
            vertices: vec![Vector3::zeros(); 2],
            normals: None,
            triangles: vec![[0, 1, 5]],
        };
        assert!(mesh.validate().is_err());
    }

    #[test]
    fn rasterized_plane_depth_matches_altitude() {
        let mesh = quad_mesh(0.0);
        let view = nadir_view(80.0);
        let depth = rasterize_mesh_depth(&mesh, &view);
        // The quad covers the whole frustum at this altitude.
        for row in 0..32 {
            for col in 0..32 {
                assert_relative_eq!(depth.get(row, col), 80.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rasterizer_keeps_nearest_surface() {
        let mut mesh = quad_mesh(0.0);
        let lifted = quad_mesh(10.0);
        let base = mesh.vertices.len() as u32;
        mesh.vertices.extend_from_slice(&lifted.vertices);
        for t in &lifted.triangles {
            mesh.triangles.push([t[0] + base, t[1] + base, t[2] + base]);
        }
        let view = nadir_view(80.0);
        let depth = rasterize_mesh_depth(&mesh, &view);
        // The z = 10 plane sits closer to the camera (depth 70).
        assert_relative_eq!(depth.get(16, 16), 70.0, epsilon = 1e-9);
    }
}
