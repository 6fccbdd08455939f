//! Pixel-grid containers: depth maps with an invalid sentinel, color buffers,
//! and the on-disk float-grid format.
//!
//! Depth maps store the camera-frame z depth at each pixel center; invalid
//! pixels hold NaN. The file format is a fixed header followed by
//! little-endian f64 scanlines, so round trips preserve finite values exactly
//! at both supported precisions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const DEPTH_MAGIC: &[u8; 8] = b"ASFGRID1";

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    /// All pixels start invalid.
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::of(f64::NAN); width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "depth data does not match dimensions");
        Self { width, height, data }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[self.idx(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        let i = self.idx(row, col);
        self.data[i] = value;
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    /// Bilinear sample at image coordinates (pixel centers sit at half-integer
    /// coordinates). Returns None outside the grid or when any of the four
    /// taps is invalid.
    pub fn sample_bilinear(&self, u: T, v: T) -> Option<BilinearSample<T>> {
        if self.width < 2 || self.height < 2 {
            return None;
        }
        let x = u - T::of(0.5);
        let y = v - T::of(0.5);
        let max_x = T::of((self.width - 1) as f64);
        let max_y = T::of((self.height - 1) as f64);
        if !(x >= T::zero() && x <= max_x && y >= T::zero() && y <= max_y) {
            return None;
        }
        let x0 = x.floor().to_double().min((self.width - 2) as f64) as usize;
        let y0 = y.floor().to_double().min((self.height - 2) as f64) as usize;
        let fx = x - T::of(x0 as f64);
        let fy = y - T::of(y0 as f64);
        let one = T::one();
        let taps = [
            (self.idx(y0, x0), (one - fx) * (one - fy)),
            (self.idx(y0, x0 + 1), fx * (one - fy)),
            (self.idx(y0 + 1, x0), (one - fx) * fy),
            (self.idx(y0 + 1, x0 + 1), fx * fy),
        ];
        let mut value = T::zero();
        for &(i, w) in &taps {
            if !self.data[i].is_finite() {
                return None;
            }
            value += self.data[i] * w;
        }
        // Spatial derivative of the interpolated value w.r.t. (u, v).
        let d00 = self.data[taps[0].0];
        let d01 = self.data[taps[1].0];
        let d10 = self.data[taps[2].0];
        let d11 = self.data[taps[3].0];
        let ddu = (d01 - d00) * (one - fy) + (d11 - d10) * fy;
        let ddv = (d10 - d00) * (one - fx) + (d11 - d01) * fx;
        Some(BilinearSample { value, taps, ddu, ddv })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(DEPTH_MAGIC)?;
            w.write_u64::<LittleEndian>(self.width as u64)?;
            w.write_u64::<LittleEndian>(self.height as u64)?;
            for d in &self.data {
                w.write_f64::<LittleEndian>(d.to_double())?;
            }
            Ok(())
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != DEPTH_MAGIC {
            return Err(Error::parse(path, "not a float-grid depth file"));
        }
        let width = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let height = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let count = width
            .checked_mul(height)
            .ok_or_else(|| Error::parse(path, "depth map dimensions overflow"))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            data.push(T::of(v));
        }
        Ok(Self { width, height, data })
    }
}

/// One bilinear lookup with everything a gradient pass needs: tap indices,
/// tap weights, and the spatial derivative at the sample point.
pub struct BilinearSample<T: Scalar> {
    pub value: T,
    pub taps: [(usize, T); 4],
    pub ddu: T,
    pub ddv: T,
}

/// Row-major RGB buffer with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMap<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<T>>,
}

impl<T: Scalar> ColorMap<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Vector3::zeros(); width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<Vector3<T>>) -> Self {
        assert_eq!(data.len(), width * height, "color data does not match dimensions");
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Vector3<T> {
        self.data[row * self.width + col]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::parse(path, e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = T::of(1.0 / 255.0);
        let data = img
            .pixels()
            .map(|p| Vector3::new(T::of(p[0] as f64), T::of(p[1] as f64), T::of(p[2] as f64)) * scale)
            .collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.iter().enumerate() {
            let to_u8 = |v: T| (v.to_double().clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(
                (i % self.width) as u32,
                (i / self.width) as u32,
                image::Rgb([to_u8(px.x), to_u8(px.y), to_u8(px.z)]),
            );
        }
        img.save(path).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Maps unit normals to the usual 0.5 + 0.5 n visualization before saving.
pub fn save_normal_png<T: Scalar>(
    normals: &[Vector3<T>],
    width: usize,
    height: usize,
    path: &Path,
) -> Result<()> {
    let half = T::of(0.5);
    let shifted: Vec<Vector3<T>> =
        normals.iter().map(|n| Vector3::new(n.x, n.y, n.z) * half + Vector3::repeat(half)).collect();
    ColorMap::from_data(width, height, shifted).save_png(path)
}
