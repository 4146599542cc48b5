//! Slice-direction Fréchet distances over a pluggable feature map.

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Image, SliceAxis, Volume};
use crate::error::{Error, Result};
use crate::ops::conv3d;

/// Diagonal jitter used when a covariance is numerically singular.
pub const FID_EPSILON: f64 = 1e-10;

/// Deterministic map from 2D slices to feature vectors.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// One row of `dim()` features per image.
    fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Seed-pinned random convolutional features ("proxy FID"): slices are
/// resampled to 32×32, passed through three random ReLU convolutions with
/// stride 2, and the channel means of the last two layers are concatenated.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    weights: Vec<Tensor>,
}

const INPUT: usize = 32;
const WIDTHS: [usize; 4] = [1, 16, 32, 32];

impl RandomConvFeatures {
    /// Seed of the reference extractor all reported proxy FIDs use.
    pub const DEFAULT_SEED: u64 = 0x00f1_d5eed;

    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = WIDTHS
            .windows(2)
            .map(|w| {
                let fan_in = w[0] * 9;
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                let data: Vec<f32> = (0..w[1] * fan_in).map(|_| normal.sample(&mut rng)).collect();
                Ok(Tensor::from_vec(data, (w[1], w[0], 1, 3, 3), &Device::Cpu)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED).expect("fixed-size initialization")
    }
}

/// Bilinear resampling of a slice to `size × size` (pixel-centre aligned).
fn resize(img: &Image, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    let coord = |o: usize, n: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * n as f32 / size as f32 - 0.5).clamp(0.0, (n - 1) as f32);
        let i = s.floor() as usize;
        (i, (i + 1).min(n - 1), s - i as f32)
    };
    for y in 0..size {
        let (y0, y1, fy) = coord(y, img.height);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, img.width);
            let p = |r: usize, c: usize| img.pixels[r * img.width + c];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

impl FeatureExtractor for RandomConvFeatures {
    fn dim(&self) -> usize {
        WIDTHS[2] + WIDTHS[3]
    }

    fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let px: Vec<f32> = chunk.iter().flat_map(|i| resize(i, INPUT)).collect();
            let mut h = Tensor::from_vec(px, (chunk.len(), 1, 1, INPUT, INPUT), &Device::Cpu)?;
            let mut pooled = Vec::new();
            for (l, w) in self.weights.iter().enumerate() {
                h = conv3d(&h, w, [1, 2, 2], [0, 1, 1])?.relu()?;
                if l > 0 {
                    pooled.push(h.flatten_from(2)?.mean(2)?);
                }
            }
            let feats = Tensor::cat(&pooled, 1)?.to_vec2::<f32>()?;
            rows.extend(feats.into_iter().map(|r| r.into_iter().map(f64::from).collect()));
        }
        Ok(rows)
    }
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased covariance of `rows`.
pub fn covariance(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::validation(format!("need at least 2 feature rows, got {n}")));
    }
    let f = rows[0].len();
    let mut mean = DVector::zeros(f);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(f, f);
    for r in rows {
        let d = DVector::from_column_slice(r) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(GaussianStats { mean, cov })
}

/// A Fréchet distance plus how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidResult {
    pub value: f64,
    /// Whether `epsilon·I` was added to both covariances.
    pub regularized: bool,
    pub epsilon: f64,
    pub real_count: usize,
    pub syn_count: usize,
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
}

/// `|μ_r − μ_s|² + tr(Σ_r + Σ_s − 2 (Σ_r Σ_s)^{1/2})`, with the trace of the
/// product root taken as `tr((Σ_r^{1/2} Σ_s Σ_r^{1/2})^{1/2})`, which is
/// symmetric. Singular covariances get `FID_EPSILON·I` added to both.
pub fn frechet_distance(real: &GaussianStats, syn: &GaussianStats) -> Result<(f64, bool)> {
    if real.mean.len() != syn.mean.len() {
        return Err(Error::validation("feature dimensions differ"));
    }
    let f = real.mean.len();
    let singular = min_eigenvalue(&real.cov) <= FID_EPSILON || min_eigenvalue(&syn.cov) <= FID_EPSILON;
    let jitter = if singular { FID_EPSILON } else { 0.0 };
    let a = &real.cov + DMatrix::identity(f, f) * jitter;
    let b = &syn.cov + DMatrix::identity(f, f) * jitter;
    let ra = sym_sqrt(&a);
    let cross = sym_sqrt(&(&ra * &b * &ra)).trace();
    let diff = &real.mean - &syn.mean;
    let value = diff.dot(&diff) + a.trace() + b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Compute("non-finite Fréchet distance".into()));
    }
    Ok((value.max(0.0), singular))
}

/// Slice direction for [`slice_fid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidAxis {
    /// Native `(H, W)` slices, one per depth index.
    Intra,
    /// Cross-depth `(D, H)` slices, one per width index.
    Inter,
}

impl FidAxis {
    pub fn slice_axis(self) -> SliceAxis {
        match self {
            FidAxis::Intra => SliceAxis::Depth,
            FidAxis::Inter => SliceAxis::Width,
        }
    }
}

/// Fréchet distance between the feature distributions of all slices along `axis`.
pub fn slice_fid(real: &[Volume], syn: &[Volume], axis: FidAxis, fx: &dyn FeatureExtractor) -> Result<FidResult> {
    let gather = |set: &[Volume]| -> Vec<Image> { set.iter().flat_map(|v| v.slices(axis.slice_axis())).collect() };
    let (r, s) = (gather(real), gather(syn));
    if r.len() < 2 || s.len() < 2 {
        return Err(Error::validation(format!(
            "slice FID needs at least 2 slices per set, got {} and {}",
            r.len(),
            s.len()
        )));
    }
    let (value, regularized) = frechet_distance(&covariance(&fx.features(&r)?)?, &covariance(&fx.features(&s)?)?)?;
    Ok(FidResult {
        value,
        regularized,
        epsilon: if regularized { FID_EPSILON } else { 0.0 },
        real_count: r.len(),
        syn_count: s.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    #[test]
    fn univariate_gaussians_follow_the_closed_form() {
        // (μ_r − μ_s)² + (σ_r − σ_s)²
        for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 1.0), (0.5, 4.0, -1.0, 0.25), (2.0, 9.0, 2.0, 1.0)] {
            let (d, _) = frechet_distance(&stats_1d(m1, v1), &stats_1d(m2, v2)).unwrap();
            let want = (m1 - m2).powi(2) + (f64::sqrt(v1) - f64::sqrt(v2)).powi(2);
            assert!((d - want).abs() < 1e-9, "{d} vs {want}");
        }
    }

    #[test]
    fn singular_covariances_are_regularized_and_reported() {
        let (d, reg) = frechet_distance(&stats_1d(0.0, 0.0), &stats_1d(1.0, 0.0)).unwrap();
        assert!(reg);
        assert!((d - 1.0).abs() < 1e-9);
        let (_, reg) = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 2.0)).unwrap();
        assert!(!reg);
    }

    #[test]
    fn features_are_deterministic() {
        let (v, _) = generate_phantom(&PhantomSpec { size: [8, 16, 16], ..PhantomSpec::desk(1) }).unwrap();
        let imgs: Vec<Image> = v.slices(SliceAxis::Depth).collect();
        let a = RandomConvFeatures::default().features(&imgs).unwrap();
        let b = RandomConvFeatures::default().features(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), RandomConvFeatures::default().dim());
    }

    #[test]
    fn identical_sets_score_zero_and_order_does_not_matter() {
        let vols: Vec<Volume> = (0..3)
            .map(|s| generate_phantom(&PhantomSpec { size: [32, 32, 32], ..PhantomSpec::desk(s) }).unwrap().0)
            .collect();
        let fx = RandomConvFeatures::default();
        for axis in [FidAxis::Intra, FidAxis::Inter] {
            assert!(slice_fid(&vols, &vols, axis, &fx).unwrap().value <= 1e-6);
        }
        let other: Vec<Volume> = (10..12)
            .map(|s| generate_phantom(&PhantomSpec { size: [32, 32, 32], ..PhantomSpec::desk(s) }).unwrap().0)
            .collect();
        let ab = slice_fid(&vols, &other, FidAxis::Intra, &fx).unwrap().value;
        let ba = slice_fid(&other, &vols, FidAxis::Intra, &fx).unwrap().value;
        let rev: Vec<Volume> = vols.iter().rev().cloned().collect();
        let cb = slice_fid(&rev, &other, FidAxis::Intra, &fx).unwrap().value;
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-6 * ab.max(1.0), "{ab} vs {ba}");
        assert!((ab - cb).abs() < 1e-6 * ab.max(1.0));
    }
}
