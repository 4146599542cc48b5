//! Latent training sets for the two diffusion stages.

use candle_core::{Device, Tensor};

use crate::data::{LabelVolume, Volume};
use crate::diffusion::{pool_label_slices, pool_labels, Conditioning, DiffusionData};
use crate::error::{Error, Result};
use crate::nhae::Nhae;

/// Slices encoded per batch by the high-resolution encoder.
const ENCODE_BATCH: usize = 64;

/// `1 / std` of `x`, taking latents to roughly unit variance.
pub fn latent_scale(x: &Tensor) -> Result<f32> {
    let v = x.flatten_all()?.to_vec1::<f32>()?;
    let n = v.len() as f64;
    let mean = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = v.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::Compute(format!("latent variance {var} cannot set a scale")));
    }
    Ok((1.0 / var.sqrt()) as f32)
}

fn check_labels(data: &[Volume], labels: Option<&[LabelVolume]>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::validation("diffusion training needs at least one volume"));
    }
    if let Some(l) = labels {
        if l.len() != data.len() || l.iter().zip(data).any(|(l, v)| l.shape() != v.shape()) {
            return Err(Error::validation("every volume needs a label volume of the same shape"));
        }
    }
    Ok(())
}

/// Posterior-mean latents `(N, c, D', H', W')` of `data`, multiplied by
/// `scale` (or by `1/std` of the set when `scale` is `None`), with the
/// scale that was applied.
pub fn global_training_data(
    nhae: &Nhae,
    data: &[Volume],
    labels: Option<&[LabelVolume]>,
    scale: Option<f32>,
) -> Result<(DiffusionData, f32)> {
    check_labels(data, labels)?;
    let means: Vec<Tensor> = data
        .iter()
        .map(|v| Ok(nhae.encode_thumbnail(&nhae.thumbnail(v)?)?.0.tensor().clone()))
        .collect::<Result<_>>()?;
    let x0 = Tensor::stack(&means, 0)?;
    let scale = match scale {
        Some(s) => s,
        None => latent_scale(&x0)?,
    };
    let latent = nhae.shape().latent;
    let labels = labels
        .map(|ls| -> Result<Tensor> {
            let pooled: Vec<Tensor> = ls.iter().map(|l| pool_labels(l, latent)).collect::<Result<_>>()?;
            Ok(Tensor::stack(&pooled, 0)?)
        })
        .transpose()?;
    Ok((
        DiffusionData {
            x0: (x0 * scale as f64)?,
            cond: Conditioning { extra: None, labels },
        },
        scale,
    ))
}

/// Refiner pairs over every depth slice: targets `z^hr_i` from the
/// high-resolution encoder and conditions `z^sr_i` from the thumbnail path,
/// both `(N·D, c, 1, H', W')` and multiplied by the same scale (`1/std` of
/// the targets unless given).
pub fn slice_training_data(
    nhae: &Nhae,
    data: &[Volume],
    labels: Option<&[LabelVolume]>,
    scale: Option<f32>,
) -> Result<(DiffusionData, f32)> {
    check_labels(data, labels)?;
    let s = *nhae.shape();
    let [d, h, w] = s.image;
    let mut targets = Vec::new();
    let mut conds = Vec::new();
    for v in data {
        let (mean, _) = nhae.encode_thumbnail(&nhae.thumbnail(v)?)?;
        let zsr = nhae.uniaxial_superres(&mean)?;
        conds.push(zsr.tensor().permute((1, 0, 2, 3))?.unsqueeze(2)?.contiguous()?);
        let mut start = 0;
        while start < d {
            let n = ENCODE_BATCH.min(d - start);
            let px = &v.data()[start * h * w..(start + n) * h * w];
            let x = Tensor::from_vec(px.to_vec(), (n, 1, 1, h, w), &Device::Cpu)?;
            targets.push(nhae.encode_slices_hr(&x)?);
            start += n;
        }
    }
    let x0 = Tensor::cat(&targets, 0)?;
    let scale = match scale {
        Some(s) => s,
        None => latent_scale(&x0)?,
    };
    let labels = labels
        .map(|ls| -> Result<Tensor> {
            let pooled: Vec<Tensor> = ls
                .iter()
                .map(|l| pool_label_slices(l, [s.latent[1], s.latent[2]]))
                .collect::<Result<_>>()?;
            Ok(Tensor::cat(&pooled, 0)?)
        })
        .transpose()?;
    Ok((
        DiffusionData {
            x0: (x0 * scale as f64)?,
            cond: Conditioning {
                extra: Some((Tensor::cat(&conds, 0)? * scale as f64)?),
                labels,
            },
        },
        scale,
    ))
}
