//! Versioned binary container for an aligned scene. Everything is f64
//! little-endian, so a round trip at the pipeline precision is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::scalar::Scalar;
use crate::scene::{CameraView, SfmScene, SparsePoint};

const SCENE_MAGIC: &[u8; 8] = b"ASSCENE\0";
const SCENE_VERSION: u32 = 1;

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    if len > 1 << 20 {
        return Err(Error::parse(path, "unreasonable string length"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::parse(path, "string is not utf-8"))
}

fn write_vec3<T: Scalar>(w: &mut impl Write, v: &Vector3<T>) -> std::io::Result<()> {
    for i in 0..3 {
        w.write_f64::<LittleEndian>(v[i].to_double())?;
    }
    Ok(())
}

fn read_vec3<T: Scalar>(r: &mut impl Read, path: &Path) -> Result<Vector3<T>> {
    let mut v = Vector3::zeros();
    for i in 0..3 {
        v[i] = T::of(r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?);
    }
    Ok(v)
}

fn write_rotation<T: Scalar>(w: &mut impl Write, rot: &Rotation3<T>) -> std::io::Result<()> {
    let m = rot.matrix();
    for r in 0..3 {
        for c in 0..3 {
            w.write_f64::<LittleEndian>(m[(r, c)].to_double())?;
        }
    }
    Ok(())
}

fn read_rotation<T: Scalar>(r: &mut impl Read, path: &Path) -> Result<Rotation3<T>> {
    let mut m = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            m[(row, col)] =
                T::of(r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?);
        }
    }
    Ok(Rotation3::from_matrix_unchecked(m))
}

pub fn write_scene<T: Scalar>(scene: &SfmScene<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        w.write_all(SCENE_MAGIC)?;
        w.write_u32::<LittleEndian>(SCENE_VERSION)?;
        write_string(&mut w, &scene.images_dir)?;
        write_rotation(&mut w, &scene.alignment.rotation)?;
        write_vec3(&mut w, &scene.alignment.translation)?;
        w.write_u64::<LittleEndian>(scene.views.len() as u64)?;
        for v in &scene.views {
            w.write_u32::<LittleEndian>(v.id)?;
            w.write_u32::<LittleEndian>(v.width)?;
            w.write_u32::<LittleEndian>(v.height)?;
            for p in [v.fx, v.fy, v.cx, v.cy] {
                w.write_f64::<LittleEndian>(p.to_double())?;
            }
            write_rotation(&mut w, &v.rotation)?;
            write_vec3(&mut w, &v.translation)?;
            write_string(&mut w, &v.image_name)?;
        }
        w.write_u64::<LittleEndian>(scene.points.len() as u64)?;
        for p in &scene.points {
            w.write_u64::<LittleEndian>(p.id)?;
            write_vec3(&mut w, &p.position)?;
            write_vec3(&mut w, &p.color)?;
            w.write_u64::<LittleEndian>(p.track.len() as u64)?;
            for img in &p.track {
                w.write_u32::<LittleEndian>(*img)?;
            }
        }
        Ok(())
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn read_scene<T: Scalar>(path: &Path) -> Result<SfmScene<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != SCENE_MAGIC {
        return Err(Error::parse(path, "not a scene file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != SCENE_VERSION {
        return Err(Error::parse(path, format!("unsupported scene version {version}")));
    }
    let images_dir = read_string(&mut r, path)?;
    let alignment = RigidTransform::new(read_rotation(&mut r, path)?, read_vec3(&mut r, path)?);
    let n_views = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    let mut views = Vec::with_capacity(n_views as usize);
    for _ in 0..n_views {
        let id = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let width = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let height = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let mut intr = [T::zero(); 4];
        for v in intr.iter_mut() {
            *v = T::of(r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?);
        }
        let rotation = read_rotation(&mut r, path)?;
        let translation = read_vec3(&mut r, path)?;
        let image_name = read_string(&mut r, path)?;
        views.push(CameraView {
            id,
            width,
            height,
            fx: intr[0],
            fy: intr[1],
            cx: intr[2],
            cy: intr[3],
            rotation,
            translation,
            image_name,
        });
    }
    let n_points = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    let mut points = Vec::with_capacity(n_points as usize);
    for _ in 0..n_points {
        let id = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let position = read_vec3(&mut r, path)?;
        let color = read_vec3(&mut r, path)?;
        let track_len = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let mut track = Vec::with_capacity(track_len as usize);
        for _ in 0..track_len {
            track.push(r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?);
        }
        points.push(SparsePoint { id, position, color, track });
    }
    let scene = SfmScene { views, points, images_dir, alignment };
    scene.validate_tracks()?;
    Ok(scene)
}
