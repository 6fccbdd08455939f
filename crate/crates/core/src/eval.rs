//! Reconstruction quality metrics: depth-grid error statistics, point-cloud
//! accuracy/completeness, and image fidelity.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ssim_mean;
use crate::raster::{ColorMap, DepthMap};
use crate::scalar::Scalar;
use crate::spatial::KdTree3;

/// Depth residuals beyond this magnitude count as gross outliers and are
/// excluded from every depth statistic, numerator and denominator alike.
pub const GROSS_DEPTH_ERROR_M: f64 = 10.0;

/// PSNR is reported as this cap once MSE drops below `PSNR_CAP_MSE`.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const PSNR_CAP_MSE: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PagEntry<T: Scalar> {
    pub threshold: T,
    pub percent: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthEvalReport<T: Scalar> {
    pub mae: T,
    pub rmse: T,
    pub pag: Vec<PagEntry<T>>,
    pub valid_count: usize,
    pub excluded_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudThresholdReport<T: Scalar> {
    pub threshold: T,
    pub accuracy: T,
    pub completeness: T,
    pub f_score: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudEvalReport<T: Scalar> {
    pub per_threshold: Vec<CloudThresholdReport<T>>,
    pub pred_count: usize,
    pub gt_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics<T: Scalar> {
    pub psnr: T,
    pub ssim: T,
    /// Perceptual similarity is not computed; the field stays null so report
    /// consumers see an explicit absence rather than a missing key.
    pub lpips: Option<T>,
}

/// Mean absolute error, root mean squared error, and the percentage of
/// pixels with absolute error strictly below each threshold. A pixel enters
/// the statistics only when both maps hold a value there and the residual is
/// within the gross-outlier cutoff.
pub fn depth_metrics<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    thresholds: &[T],
) -> Result<DepthEvalReport<T>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Invalid("depth grids differ in size".into()));
    }
    let cutoff = T::of(GROSS_DEPTH_ERROR_M);
    let total = pred.width * pred.height;
    let mut abs_sum = T::zero();
    let mut sq_sum = T::zero();
    let mut valid = 0usize;
    let mut below = vec![0usize; thresholds.len()];
    for at in 0..total {
        let p = pred.data[at];
        let g = gt.data[at];
        if !p.is_finite() || !g.is_finite() {
            continue;
        }
        let err = (p - g).abs();
        if err > cutoff {
            continue;
        }
        abs_sum += err;
        sq_sum += err * err;
        valid += 1;
        for (slot, &tau) in below.iter_mut().zip(thresholds) {
            if err < tau {
                *slot += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::Invalid("no valid pixel pairs to evaluate".into()));
    }
    let m = T::of(valid as f64);
    let mae = abs_sum / m;
    let rmse = (sq_sum / m).sqrt();
    debug_assert!(mae <= rmse * (T::one() + T::of(1e-12)) + T::of(1e-300));
    let pag = thresholds
        .iter()
        .zip(&below)
        .map(|(&threshold, &count)| PagEntry {
            threshold,
            percent: T::of(count as f64) / m * T::of(100.0),
        })
        .collect();
    Ok(DepthEvalReport { mae, rmse, pag, valid_count: valid, excluded_count: total - valid })
}

fn nearest_distances<T: Scalar>(from: &[Vector3<T>], to: &KdTree3<T>) -> Vec<T> {
    from.par_iter()
        .map(|p| to.nearest(p).map(|(_, d2)| d2.sqrt()).unwrap_or_else(|| T::of(f64::MAX)))
        .collect()
}

fn percent_below<T: Scalar>(distances: &[T], tau: T) -> T {
    let count = distances.iter().filter(|&&d| d < tau).count();
    T::of(count as f64) / T::of(distances.len() as f64) * T::of(100.0)
}

/// Accuracy is the share of reconstructed points lying strictly within each
/// threshold of the reference cloud; completeness is the reverse direction;
/// the f-score is their harmonic mean.
pub fn cloud_metrics<T: Scalar>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    thresholds: &[T],
) -> Result<CloudEvalReport<T>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("point-cloud metrics need nonempty clouds".into()));
    }
    let gt_tree = KdTree3::build(gt.to_vec());
    let pred_tree = KdTree3::build(pred.to_vec());
    let pred_to_gt = nearest_distances(pred, &gt_tree);
    let gt_to_pred = nearest_distances(gt, &pred_tree);
    let per_threshold = thresholds
        .iter()
        .map(|&threshold| {
            let accuracy = percent_below(&pred_to_gt, threshold);
            let completeness = percent_below(&gt_to_pred, threshold);
            let sum = accuracy + completeness;
            let f_score = if sum > T::zero() {
                T::of(2.0) * accuracy * completeness / sum
            } else {
                T::zero()
            };
            CloudThresholdReport { threshold, accuracy, completeness, f_score }
        })
        .collect();
    Ok(CloudEvalReport { per_threshold, pred_count: pred.len(), gt_count: gt.len() })
}

/// PSNR against a unit dynamic range, capped where MSE underflows the
/// meaningful regime, plus mean SSIM over channels.
pub fn image_metrics<T: Scalar>(pred: &ColorMap<T>, gt: &ColorMap<T>) -> Result<ImageMetrics<T>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Invalid("images differ in size".into()));
    }
    let mut sq_sum = T::zero();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let d = p - g;
        sq_sum += d.dot(&d);
    }
    let mse = sq_sum / T::of((pred.data.len() * 3) as f64);
    let psnr = if mse < T::of(PSNR_CAP_MSE) {
        T::of(PSNR_CAP_DB)
    } else {
        T::of(10.0) * (T::one() / mse).log10()
    };
    let ssim = ssim_mean(&pred.data, &gt.data, pred.width, pred.height);
    Ok(ImageMetrics { psnr, ssim, lpips: None })
}
