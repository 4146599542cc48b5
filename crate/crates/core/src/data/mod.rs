//! Volumes, label volumes and the procedural phantom generator.
//!
//! Every image-space volume handled by the model lives in the canonical
//! `[-1, 1]` intensity range; [`normalize`] maps raw intensities onto it.

mod io;
mod phantom;

pub use io::{header_path, load_labels, load_volume, save_labels, save_volume, write_raw_header, VolumeLayout};
pub use phantom::{generate_phantom, PhantomSpec};

use crate::error::{Error, Result};

/// Closed intensity interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const CANONICAL: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::validation(format!(
                "degenerate intensity range [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Which family of 2D cuts to take through a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Native slices: fix a depth index, image is `(H, W)`.
    Depth,
    /// Cross-depth slices: fix a height index, image is `(D, W)`.
    Height,
    /// Cross-depth slices: fix a width index, image is `(D, H)`.
    Width,
}

/// A single 2D image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

/// Dense scalar grid of shape `(D, H, W)`, depth outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    range: ValueRange,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a canonical-range volume, rejecting bad shapes and out-of-range or non-finite voxels.
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::with_range(shape, data, ValueRange::CANONICAL)
    }

    pub fn with_range(shape: [usize; 3], data: Vec<f32>, range: ValueRange) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::validation(format!(
                "volume data has {} voxels, shape {:?} needs {}",
                data.len(),
                shape,
                shape.iter().product::<usize>()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite voxel at flat index {i}")));
        }
        if let Some(i) = data.iter().position(|&v| !range.contains(v)) {
            return Err(Error::validation(format!(
                "voxel {} at flat index {i} outside [{}, {}]",
                data[i], range.lo, range.hi
            )));
        }
        Ok(Self { shape, range, data })
    }

    /// Clamps into the canonical range instead of rejecting.
    pub fn from_clamped(shape: [usize; 3], mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(shape, data)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    /// Number of slices along `axis`.
    pub fn slice_count(&self, axis: SliceAxis) -> usize {
        match axis {
            SliceAxis::Depth => self.shape[0],
            SliceAxis::Height => self.shape[1],
            SliceAxis::Width => self.shape[2],
        }
    }

    pub fn slice(&self, axis: SliceAxis, i: usize) -> Image {
        let [d, h, w] = self.shape;
        match axis {
            SliceAxis::Depth => Image {
                height: h,
                width: w,
                pixels: self.data[i * h * w..(i + 1) * h * w].to_vec(),
            },
            SliceAxis::Height => {
                let mut pixels = Vec::with_capacity(d * w);
                for z in 0..d {
                    let start = self.index(z, i, 0);
                    pixels.extend_from_slice(&self.data[start..start + w]);
                }
                Image {
                    height: d,
                    width: w,
                    pixels,
                }
            }
            SliceAxis::Width => {
                let mut pixels = Vec::with_capacity(d * h);
                for z in 0..d {
                    for y in 0..h {
                        pixels.push(self.get(z, y, i));
                    }
                }
                Image {
                    height: d,
                    width: h,
                    pixels,
                }
            }
        }
    }

    pub fn slices(&self, axis: SliceAxis) -> impl Iterator<Item = Image> + '_ {
        (0..self.slice_count(axis)).map(move |i| self.slice(axis, i))
    }
}

/// Dense class-index grid aligned with a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    class_count: u8,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, class_count: u8) -> Result<Self> {
        check_shape(shape)?;
        if class_count == 0 {
            return Err(Error::validation("label volume needs at least one class"));
        }
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::validation(format!(
                "label data has {} entries, shape {:?} needs {}",
                labels.len(),
                shape,
                shape.iter().product::<usize>()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            shape,
            class_count,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[(d * self.shape[1] + h) * self.shape[2] + w]
    }
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::validation(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// Affinely maps `in_range` onto `[-1, 1]`, clamping values outside it.
pub fn normalize(v: &Volume, in_range: (f32, f32)) -> Result<Volume> {
    let range = ValueRange::new(in_range.0, in_range.1)?;
    let scale = 2.0 / range.width();
    let data = v
        .data()
        .iter()
        .map(|&x| ((x.clamp(range.lo, range.hi) - range.lo) * scale - 1.0).clamp(-1.0, 1.0))
        .collect();
    Volume::new(v.shape(), data)
}

/// Trilinear resampling to `target`, half-pixel aligned. Output is clamped to the source range.
pub fn resample_volume(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_shape(target)?;
    if target == v.shape() {
        return Ok(v.clone());
    }
    let src = v.shape();
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (ad, ah, aw) = (
        axis(src[0], target[0]),
        axis(src[1], target[1]),
        axis(src[2], target[2]),
    );
    let range = v.range();
    let mut out = Vec::with_capacity(target.iter().product());
    for &(d0, d1, fd) in &ad {
        for &(h0, h1, fh) in &ah {
            for &(w0, w1, fw) in &aw {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let c00 = lerp(v.get(d0, h0, w0), v.get(d0, h0, w1), fw);
                let c01 = lerp(v.get(d0, h1, w0), v.get(d0, h1, w1), fw);
                let c10 = lerp(v.get(d1, h0, w0), v.get(d1, h0, w1), fw);
                let c11 = lerp(v.get(d1, h1, w0), v.get(d1, h1, w1), fw);
                let val = lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd);
                out.push(val.clamp(range.lo, range.hi));
            }
        }
    }
    Volume::with_range(target, out, range)
}
