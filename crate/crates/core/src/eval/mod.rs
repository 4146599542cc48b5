//! Quality metrics and the peak-memory profiler.

mod fid;
pub mod memory;
mod report;

pub use fid::{
    covariance, frechet_distance, slice_fid, FeatureExtractor, FidAxis, FidResult, GaussianStats, RandomConvFeatures,
    FID_EPSILON,
};
pub use report::{mean_std, MetricsReport};

use crate::data::Volume;
use crate::error::{Error, Result};

/// Anisotropic total variation: for each axis, the mean absolute difference
/// between neighbours along that axis, summed over the three axes. Axes of
/// length one contribute nothing.
pub fn total_variation(v: &Volume) -> f64 {
    let [d, h, w] = v.shape();
    let x = v.data();
    let mut tv = 0.0;
    for (axis, len, stride) in [(0, d, h * w), (1, h, w), (2, w, 1)] {
        if len < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..x.len() {
            let coord = match axis {
                0 => i / (h * w),
                1 => (i / w) % h,
                _ => i % w,
            };
            if coord + 1 < len {
                sum += (x[i + stride] as f64 - x[i] as f64).abs();
                pairs += 1;
            }
        }
        tv += sum / pairs as f64;
    }
    tv
}

/// `10 log10(range² / MSE)` with `range` the width of `a`'s value range;
/// identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "psnr needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let range = a.range().width() as f64;
    Ok(10.0 * (range * range / mse).log10())
}
