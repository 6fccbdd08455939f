//! Reader/writer for the de-facto SfM sparse model layout: a camera list, an
//! image list with poses and 2D-3D tracks, and a 3D point list, in both the
//! text and the binary encodings.
//!
//! Only undistorted pinhole intrinsics are accepted; distorted models must be
//! undistorted upstream. Binary layout per record:
//! cameras: `camera_id i32, model_id i32, width u64, height u64, params f64xN`;
//! images: `image_id i32, q wxyz f64x4, t f64x3, camera_id i32, name\0,
//! n_obs u64, (x f64, y f64, point3d_id i64) x n_obs`;
//! points: `id u64, xyz f64x3, rgb u8x3, error f64, track_len u64,
//! (image_id i32, point2d_idx i32) x len`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::scalar::Scalar;
use crate::scene::{CameraView, SfmScene, SparsePoint};

const MODEL_SIMPLE_PINHOLE: i32 = 0;
const MODEL_PINHOLE: i32 = 1;

struct CameraIntrinsics {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn intrinsics_from_params(
    model: &str,
    width: u32,
    height: u32,
    params: &[f64],
) -> Result<CameraIntrinsics> {
    match model {
        "SIMPLE_PINHOLE" => {
            if params.len() != 3 {
                return Err(Error::Invalid("SIMPLE_PINHOLE expects 3 parameters".into()));
            }
            Ok(CameraIntrinsics {
                width,
                height,
                fx: params[0],
                fy: params[0],
                cx: params[1],
                cy: params[2],
            })
        }
        "PINHOLE" => {
            if params.len() != 4 {
                return Err(Error::Invalid("PINHOLE expects 4 parameters".into()));
            }
            Ok(CameraIntrinsics {
                width,
                height,
                fx: params[0],
                fy: params[1],
                cx: params[2],
                cy: params[3],
            })
        }
        other => Err(Error::Unsupported(format!(
            "camera model {other}: only pinhole models are supported; undistort first"
        ))),
    }
}

fn model_name_from_id(id: i32) -> Result<&'static str> {
    match id {
        MODEL_SIMPLE_PINHOLE => Ok("SIMPLE_PINHOLE"),
        MODEL_PINHOLE => Ok("PINHOLE"),
        other => Err(Error::Unsupported(format!(
            "camera model id {other}: only pinhole models are supported; undistort first"
        ))),
    }
}

/// Loads a sparse model directory, preferring the binary files when present.
pub fn load_sparse_model<T: Scalar>(dir: &Path, images_dir: &Path) -> Result<SfmScene<T>> {
    let scene = if dir.join("cameras.bin").exists() {
        load_binary(dir, images_dir)?
    } else if dir.join("cameras.txt").exists() {
        load_text(dir, images_dir)?
    } else {
        return Err(Error::Invalid(format!(
            "{} holds neither cameras.bin nor cameras.txt",
            dir.display()
        )));
    };
    scene.validate_tracks()?;
    Ok(scene)
}

fn view_from_pose<T: Scalar>(
    image_id: u32,
    q: [f64; 4],
    t: [f64; 3],
    cam: &CameraIntrinsics,
    name: String,
) -> CameraView<T> {
    let quat = UnitQuaternion::from_quaternion(Quaternion::new(
        T::of(q[0]),
        T::of(q[1]),
        T::of(q[2]),
        T::of(q[3]),
    ));
    CameraView {
        id: image_id,
        width: cam.width,
        height: cam.height,
        fx: T::of(cam.fx),
        fy: T::of(cam.fy),
        cx: T::of(cam.cx),
        cy: T::of(cam.cy),
        rotation: quat.to_rotation_matrix(),
        translation: Vector3::new(T::of(t[0]), T::of(t[1]), T::of(t[2])),
        image_name: name,
    }
}

fn data_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push(trimmed.to_string());
    }
    Ok(lines)
}

fn load_text<T: Scalar>(dir: &Path, images_dir: &Path) -> Result<SfmScene<T>> {
    let cam_path = dir.join("cameras.txt");
    let mut cameras: HashMap<u32, CameraIntrinsics> = HashMap::new();
    for line in data_lines(&cam_path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(Error::parse(&cam_path, format!("short camera line: {line}")));
        }
        let id: u32 = tok[0].parse().map_err(|_| Error::parse(&cam_path, "bad camera id"))?;
        let width: u32 = tok[2].parse().map_err(|_| Error::parse(&cam_path, "bad width"))?;
        let height: u32 = tok[3].parse().map_err(|_| Error::parse(&cam_path, "bad height"))?;
        let params: Vec<f64> = tok[4..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&cam_path, "bad camera parameter"))?;
        cameras.insert(id, intrinsics_from_params(tok[1], width, height, &params)?);
    }

    // Each image is a pose line followed by one observations line, which may
    // be blank. Blank lines between entries carry no meaning, so the pose
    // parser skips them while the observations slot consumes whatever follows.
    let img_path = dir.join("images.txt");
    let file = File::open(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let mut pose_lines = Vec::new();
    let mut expecting_observations = false;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&img_path, e))?;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if expecting_observations {
            expecting_observations = false;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        pose_lines.push(trimmed.to_string());
        expecting_observations = true;
    }
    let mut views = Vec::with_capacity(pose_lines.len());
    for pose in &pose_lines {
        let tok: Vec<&str> = pose.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(Error::parse(&img_path, format!("short image line: {pose}")));
        }
        let image_id: u32 = tok[0].parse().map_err(|_| Error::parse(&img_path, "bad image id"))?;
        let nums: Vec<f64> = tok[1..8]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&img_path, "bad pose value"))?;
        let camera_id: u32 =
            tok[8].parse().map_err(|_| Error::parse(&img_path, "bad camera id"))?;
        let cam = cameras
            .get(&camera_id)
            .ok_or_else(|| Error::parse(&img_path, format!("unknown camera id {camera_id}")))?;
        let name = tok[9..].join(" ");
        views.push(view_from_pose(
            image_id,
            [nums[0], nums[1], nums[2], nums[3]],
            [nums[4], nums[5], nums[6]],
            cam,
            name,
        ));
    }
    views.sort_by_key(|v: &CameraView<T>| v.id);

    let pts_path = dir.join("points3D.txt");
    let mut points = Vec::new();
    for line in data_lines(&pts_path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || (tok.len() - 8) % 2 != 0 {
            return Err(Error::parse(&pts_path, format!("malformed point line: {line}")));
        }
        let id: u64 = tok[0].parse().map_err(|_| Error::parse(&pts_path, "bad point id"))?;
        let xyz: Vec<f64> = tok[1..4]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&pts_path, "bad point coordinate"))?;
        let rgb: Vec<u8> = tok[4..7]
            .iter()
            .map(|s| s.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&pts_path, "bad point color"))?;
        // tok[7] is the reprojection error, unused here.
        let mut track = Vec::with_capacity((tok.len() - 8) / 2);
        for obs in tok[8..].chunks(2) {
            let img: u32 =
                obs[0].parse().map_err(|_| Error::parse(&pts_path, "bad track image id"))?;
            if !track.contains(&img) {
                track.push(img);
            }
        }
        points.push(SparsePoint {
            id,
            position: Vector3::new(T::of(xyz[0]), T::of(xyz[1]), T::of(xyz[2])),
            color: Vector3::new(
                T::of(rgb[0] as f64 / 255.0),
                T::of(rgb[1] as f64 / 255.0),
                T::of(rgb[2] as f64 / 255.0),
            ),
            track,
        });
    }
    points.sort_by_key(|p: &SparsePoint<T>| p.id);

    Ok(SfmScene {
        views,
        points,
        images_dir: images_dir.to_string_lossy().into_owned(),
        alignment: RigidTransform::identity(),
    })
}

fn read_null_terminated(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        if b[0] == 0 {
            break;
        }
        bytes.push(b[0]);
    }
    String::from_utf8(bytes).map_err(|_| Error::parse(path, "image name is not utf-8"))
}

fn load_binary<T: Scalar>(dir: &Path, images_dir: &Path) -> Result<SfmScene<T>> {
    let cam_path = dir.join("cameras.bin");
    let mut r = BufReader::new(File::open(&cam_path).map_err(|e| Error::io(&cam_path, e))?);
    let n_cameras = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))?;
    let mut cameras = HashMap::new();
    for _ in 0..n_cameras {
        let id = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))? as u32;
        let model_id = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))?;
        let width = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))? as u32;
        let height = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))? as u32;
        let model = model_name_from_id(model_id)?;
        let n_params = if model_id == MODEL_SIMPLE_PINHOLE { 3 } else { 4 };
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.read_f64::<LittleEndian>().map_err(|e| Error::io(&cam_path, e))?);
        }
        cameras.insert(id, intrinsics_from_params(model, width, height, &params)?);
    }

    let img_path = dir.join("images.bin");
    let mut r = BufReader::new(File::open(&img_path).map_err(|e| Error::io(&img_path, e))?);
    let n_images = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
    let mut views = Vec::with_capacity(n_images as usize);
    for _ in 0..n_images {
        let image_id = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&img_path, e))? as u32;
        let mut pose = [0f64; 7];
        for v in pose.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
        }
        let camera_id = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&img_path, e))? as u32;
        let name = read_null_terminated(&mut r, &img_path)?;
        let cam = cameras
            .get(&camera_id)
            .ok_or_else(|| Error::parse(&img_path, format!("unknown camera id {camera_id}")))?;
        let n_obs = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
        // 2D observations (x, y, point3d_id) are not needed downstream.
        for _ in 0..n_obs {
            r.read_f64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
            r.read_f64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
            r.read_i64::<LittleEndian>().map_err(|e| Error::io(&img_path, e))?;
        }
        views.push(view_from_pose(
            image_id,
            [pose[0], pose[1], pose[2], pose[3]],
            [pose[4], pose[5], pose[6]],
            cam,
            name,
        ));
    }
    views.sort_by_key(|v: &CameraView<T>| v.id);

    let pts_path = dir.join("points3D.bin");
    let mut r = BufReader::new(File::open(&pts_path).map_err(|e| Error::io(&pts_path, e))?);
    let n_points = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
    let mut points = Vec::with_capacity(n_points as usize);
    for _ in 0..n_points {
        let id = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
        let mut xyz = [0f64; 3];
        for v in xyz.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
        }
        let mut rgb = [0u8; 3];
        r.read_exact(&mut rgb).map_err(|e| Error::io(&pts_path, e))?;
        let _error = r.read_f64::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
        let track_len = r.read_u64::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
        let mut track = Vec::with_capacity(track_len as usize);
        for _ in 0..track_len {
            let img = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))? as u32;
            let _p2d = r.read_i32::<LittleEndian>().map_err(|e| Error::io(&pts_path, e))?;
            if !track.contains(&img) {
                track.push(img);
            }
        }
        points.push(SparsePoint {
            id,
            position: Vector3::new(T::of(xyz[0]), T::of(xyz[1]), T::of(xyz[2])),
            color: Vector3::new(
                T::of(rgb[0] as f64 / 255.0),
                T::of(rgb[1] as f64 / 255.0),
                T::of(rgb[2] as f64 / 255.0),
            ),
            track,
        });
    }
    points.sort_by_key(|p: &SparsePoint<T>| p.id);

    Ok(SfmScene {
        views,
        points,
        images_dir: images_dir.to_string_lossy().into_owned(),
        alignment: RigidTransform::identity(),
    })
}

fn pose_quaternion<T: Scalar>(view: &CameraView<T>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&view.rotation);
    [q.w.to_double(), q.i.to_double(), q.j.to_double(), q.k.to_double()]
}

fn color_u8<T: Scalar>(c: &Vector3<T>) -> [u8; 3] {
    let to = |v: T| (v.to_double().clamp(0.0, 1.0) * 255.0).round() as u8;
    [to(c.x), to(c.y), to(c.z)]
}

/// Writes the model in the text layout (one camera per view).
pub fn write_sparse_model_text<T: Scalar>(scene: &SfmScene<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam_path = dir.join("cameras.txt");
    let mut w = BufWriter::new(File::create(&cam_path).map_err(|e| Error::io(&cam_path, e))?);
    let mut write_cams = || -> std::io::Result<()> {
        writeln!(w, "# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]")?;
        for v in &scene.views {
            writeln!(
                w,
                "{} PINHOLE {} {} {:.17} {:.17} {:.17} {:.17}",
                v.id,
                v.width,
                v.height,
                v.fx.to_double(),
                v.fy.to_double(),
                v.cx.to_double(),
                v.cy.to_double()
            )?;
        }
        Ok(())
    };
    write_cams().map_err(|e| Error::io(&cam_path, e))?;

    let img_path = dir.join("images.txt");
    let mut w = BufWriter::new(File::create(&img_path).map_err(|e| Error::io(&img_path, e))?);
    let mut write_imgs = || -> std::io::Result<()> {
        writeln!(w, "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")?;
        for v in &scene.views {
            let q = pose_quaternion(v);
            writeln!(
                w,
                "{} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {} {}",
                v.id,
                q[0],
                q[1],
                q[2],
                q[3],
                v.translation.x.to_double(),
                v.translation.y.to_double(),
                v.translation.z.to_double(),
                v.id,
                v.image_name
            )?;
            // No per-pixel observations are kept; the track lives on the points.
            writeln!(w)?;
        }
        Ok(())
    };
    write_imgs().map_err(|e| Error::io(&img_path, e))?;

    let pts_path = dir.join("points3D.txt");
    let mut w = BufWriter::new(File::create(&pts_path).map_err(|e| Error::io(&pts_path, e))?);
    let mut write_pts = || -> std::io::Result<()> {
        writeln!(w, "# Point list: POINT3D_ID X Y Z R G B ERROR TRACK[]")?;
        for p in &scene.points {
            let rgb = color_u8(&p.color);
            write!(
                w,
                "{} {:.17} {:.17} {:.17} {} {} {} 0",
                p.id,
                p.position.x.to_double(),
                p.position.y.to_double(),
                p.position.z.to_double(),
                rgb[0],
                rgb[1],
                rgb[2]
            )?;
            for img in &p.track {
                write!(w, " {img} 0")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    write_pts().map_err(|e| Error::io(&pts_path, e))
}

/// Writes the model in the binary layout (one camera per view).
pub fn write_sparse_model_binary<T: Scalar>(scene: &SfmScene<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam_path = dir.join("cameras.bin");
    let mut w = BufWriter::new(File::create(&cam_path).map_err(|e| Error::io(&cam_path, e))?);
    let mut write_cams = || -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(scene.views.len() as u64)?;
        for v in &scene.views {
            w.write_i32::<LittleEndian>(v.id as i32)?;
            w.write_i32::<LittleEndian>(MODEL_PINHOLE)?;
            w.write_u64::<LittleEndian>(v.width as u64)?;
            w.write_u64::<LittleEndian>(v.height as u64)?;
            for p in [v.fx, v.fy, v.cx, v.cy] {
                w.write_f64::<LittleEndian>(p.to_double())?;
            }
        }
        Ok(())
    };
    write_cams().map_err(|e| Error::io(&cam_path, e))?;

    let img_path = dir.join("images.bin");
    let mut w = BufWriter::new(File::create(&img_path).map_err(|e| Error::io(&img_path, e))?);
    let mut write_imgs = || -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(scene.views.len() as u64)?;
        for v in &scene.views {
            w.write_i32::<LittleEndian>(v.id as i32)?;
            let q = pose_quaternion(v);
            for s in q {
                w.write_f64::<LittleEndian>(s)?;
            }
            for s in [v.translation.x, v.translation.y, v.translation.z] {
                w.write_f64::<LittleEndian>(s.to_double())?;
            }
            w.write_i32::<LittleEndian>(v.id as i32)?;
            w.write_all(v.image_name.as_bytes())?;
            w.write_all(&[0])?;
            w.write_u64::<LittleEndian>(0)?;
        }
        Ok(())
    };
    write_imgs().map_err(|e| Error::io(&img_path, e))?;

    let pts_path = dir.join("points3D.bin");
    let mut w = BufWriter::new(File::create(&pts_path).map_err(|e| Error::io(&pts_path, e))?);
    let mut write_pts = || -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(scene.points.len() as u64)?;
        for p in &scene.points {
            w.write_u64::<LittleEndian>(p.id)?;
            for s in [p.position.x, p.position.y, p.position.z] {
                w.write_f64::<LittleEndian>(s.to_double())?;
            }
            w.write_all(&color_u8(&p.color))?;
            w.write_f64::<LittleEndian>(0.0)?;
            w.write_u64::<LittleEndian>(p.track.len() as u64)?;
            for img in &p.track {
                w.write_i32::<LittleEndian>(*img as i32)?;
                w.write_i32::<LittleEndian>(0)?;
            }
        }
        Ok(())
    };
    write_pts().map_err(|e| Error::io(&pts_path, e))
}
