use candle_core::{Device, Tensor};

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Rank};

/// Area-averaged one-hot encoding of `labels` at `target` resolution,
/// shape `(classes, d, h, w)`. Each axis must shrink by an integer factor.
pub fn pool_labels(labels: &LabelVolume, target: [usize; 3]) -> Result<Tensor> {
    let shape = labels.shape();
    if (0..3).any(|a| target[a] == 0 || shape[a] % target[a] != 0) {
        return Err(Error::validation(format!(
            "labels {shape:?} do not pool evenly to {target:?}"
        )));
    }
    let f = [shape[0] / target[0], shape[1] / target[1], shape[2] / target[2]];
    let classes = labels.class_count() as usize;
    let cells: usize = target.iter().product();
    let mut out = vec![0f32; classes * cells];
    let weight = 1.0 / (f[0] * f[1] * f[2]) as f32;
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let cell = ((d / f[0]) * target[1] + h / f[1]) * target[2] + w / f[2];
                out[labels.get(d, h, w) as usize * cells + cell] += weight;
            }
        }
    }
    Ok(Tensor::from_vec(out, (classes, target[0], target[1], target[2]), &Device::Cpu)?)
}

/// Per-depth-slice pooling for the slice refiner: `(D, classes, 1, h, w)`.
pub fn pool_label_slices(labels: &LabelVolume, target_hw: [usize; 2]) -> Result<Tensor> {
    let d = labels.shape()[0];
    let pooled = pool_labels(labels, [d, target_hw[0], target_hw[1]])?;
    Ok(pooled.permute((1, 0, 2, 3))?.contiguous()?.unsqueeze(2)?)
}

/// Learned map from pooled one-hot labels to conditioning channels.
#[derive(Debug, Clone)]
pub struct LabelEncoder {
    conv1: Conv,
    conv2: Conv,
}

impl LabelEncoder {
    pub fn new(b: &mut Builder, rank: Rank, classes: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::same(&mut b.sub("conv1"), rank, classes, channels, 3)?,
            conv2: Conv::same(&mut b.sub("conv2"), rank, channels, channels, 3)?,
        })
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(pooled)?.silu()?)
    }
}
