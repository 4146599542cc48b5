use candle_core::Tensor;

use super::config::NhaeConfig;
use crate::error::Result;
use crate::nn::{Builder, Conv, GroupNorm, Init, Rank, ResBlock};
use crate::ops::upsample_nearest;

/// Fully 3D encoder from the thumbnail to Gaussian posterior parameters.
#[derive(Debug, Clone)]
pub struct Encoder3d {
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Encoder3d {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let w = &cfg.enc3d;
        let r = Rank::Three;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..w.len() {
            blocks.push(ResBlock::new(&mut b.sub(format!("res{l}")), r, w[l], w[l], None)?);
            if l + 1 < w.len() {
                downs.push(Conv::new(&mut b.sub(format!("down{l}")), w[l], w[l + 1], [3; 3], [2; 3], [1; 3])?);
            }
        }
        let last = *w.last().expect("validated widths");
        Ok(Self {
            conv_in: Conv::same(&mut b.sub("conv_in"), r, 1, w[0], 3)?,
            blocks,
            downs,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), last)?,
            conv_out: Conv::same(&mut b.sub("conv_out"), r, last, 2 * cfg.shape.channels, 3)?,
        })
    }

    /// `(N, 1, 2D', 2H', 2W')` to `(mean, logvar)`, each `(N, c, D', H', W')`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, None)?;
            if let Some(down) = self.downs.get(l) {
                h = down.forward(&h)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?;
        split_posterior(&out)
    }
}

fn split_posterior(out: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = out.dims()[1] / 2;
    Ok((out.narrow(1, 0, c)?, out.narrow(1, c, c)?.clamp(-30f32, 20f32)?))
}

/// Uniaxial super-resolution: depth-only nearest upsampling plus a learned residual.
#[derive(Debug, Clone)]
pub struct SuperRes {
    conv_in: Conv,
    block_in: ResBlock,
    factors: Vec<usize>,
    ups: Vec<Conv>,
    blocks: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl SuperRes {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let w = &cfg.fsr;
        let c = cfg.shape.channels;
        let r = Rank::Three;
        let factors = cfg.shape.depth_stages();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for j in 0..factors.len() {
            ups.push(Conv::same(&mut b.sub(format!("up{j}")), r, w[j], w[j + 1], 3)?);
            blocks.push(ResBlock::new(&mut b.sub(format!("res{j}")), r, w[j + 1], w[j + 1], None)?);
        }
        let last = *w.last().expect("validated widths");
        Ok(Self {
            conv_in: Conv::same(&mut b.sub("conv_in"), r, c, w[0], 3)?,
            block_in: ResBlock::new(&mut b.sub("res_in"), r, w[0], w[0], None)?,
            factors,
            ups,
            blocks,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), last)?,
            conv_out: Conv::same(&mut b.sub("conv_out"), r, last, c, 3)?,
        })
    }

    /// `(N, c, D', H', W')` to `(N, c, D, H', W')`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let total: usize = self.factors.iter().product();
        let mut h = self.block_in.forward(&self.conv_in.forward(z)?, None)?;
        for ((&f, up), block) in self.factors.iter().zip(&self.ups).zip(&self.blocks) {
            h = up.forward(&upsample_nearest(&h, [f, 1, 1])?)?;
            h = block.forward(&h, None)?;
        }
        let residual = self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?;
        Ok((upsample_nearest(z, [total, 1, 1])? + residual)?)
    }
}

/// 3D convolution across a window of `k` slices, gated by a scalar `alpha`.
#[derive(Debug, Clone)]
pub struct Adaptor {
    norm: GroupNorm,
    conv: Conv,
    alpha: Tensor,
}

impl Adaptor {
    pub fn new(b: &mut Builder, channels: usize, kernel: [usize; 3]) -> Result<Self> {
        let padding = kernel.map(|k| k / 2);
        Ok(Self {
            norm: GroupNorm::new(&mut b.sub("norm"), channels)?,
            conv: Conv::new(&mut b.sub("conv"), channels, channels, kernel, [1; 3], padding)?,
            alpha: b.tensor("alpha", &[1], Init::Const(0.0))?,
        })
    }

    /// `h` is `(B·k, C, 1, H, W)` with each window's slices contiguous in the batch.
    pub fn forward(&self, h: &Tensor, k: usize) -> Result<Tensor> {
        let (n, c, _, hh, ww) = h.dims5()?;
        let stack = h
            .reshape((n / k, k, c, hh, ww))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?;
        let r = self.conv.forward(&self.norm.forward_silu(&stack)?)?;
        let r = r.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((n, c, 1, hh, ww))?;
        Ok((h + r.broadcast_mul(&self.alpha)?)?)
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }
}

/// Adaptors of the multi-slice decoder, one per decoder scale.
#[derive(Debug, Clone)]
pub struct Adaptors {
    pub list: Vec<Adaptor>,
    pub window: usize,
}

impl Adaptors {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let list = cfg
            .dec
            .iter()
            .enumerate()
            .map(|(l, &ch)| Adaptor::new(&mut b.sub(format!("a{l}")), ch, cfg.adaptor_kernel))
            .collect::<Result<_>>()?;
        Ok(Self {
            list,
            window: cfg.shape.window,
        })
    }
}

/// 2D slice decoder with residual and ×2 upsample blocks and a `tanh` output.
#[derive(Debug, Clone)]
pub struct Decoder2d {
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Decoder2d {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let w = &cfg.dec;
        let r = Rank::Two;
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for l in 0..w.len() {
            blocks.push(ResBlock::new(&mut b.sub(format!("res{l}")), r, w[l], w[l], None)?);
            if l + 1 < w.len() {
                ups.push(Conv::same(&mut b.sub(format!("up{l}")), r, w[l], w[l + 1], 3)?);
            }
        }
        let last = *w.last().expect("validated widths");
        Ok(Self {
            conv_in: Conv::same(&mut b.sub("conv_in"), r, cfg.shape.channels, w[0], 3)?,
            blocks,
            ups,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), last)?,
            conv_out: Conv::same(&mut b.sub("conv_out"), r, last, 1, 3)?,
        })
    }

    /// Decodes `(N, c, 1, H', W')`. Without adaptors every slice is decoded on its
    /// own; with adaptors `N = B·k` windows go in and the `B` centre slices come out.
    pub fn forward(&self, z: &Tensor, adaptors: Option<&Adaptors>) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, None)?;
            if let Some(a) = adaptors {
                h = a.list[l].forward(&h, a.window)?;
            }
            if let Some(up) = self.ups.get(l) {
                h = up.forward(&upsample_nearest(&h, [1, 2, 2])?)?;
            }
        }
        if let Some(a) = adaptors {
            h = center_slices(&h, a.window)?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?.tanh()?)
    }
}

fn center_slices(h: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, d, hh, ww) = h.dims5()?;
    Ok(h
        .reshape((n / k, k, c, d, hh, ww))?
        .narrow(1, k / 2, 1)?
        .reshape((n / k, c, d, hh, ww))?)
}

/// 2D slice encoder; used both for the disposable stage-1 encoder and the
/// high-resolution encoder.
#[derive(Debug, Clone)]
pub struct Encoder2d {
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Encoder2d {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let w = &cfg.enc2d;
        let r = Rank::Two;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..w.len() {
            blocks.push(ResBlock::new(&mut b.sub(format!("res{l}")), r, w[l], w[l], None)?);
            if l + 1 < w.len() {
                downs.push(Conv::new(
                    &mut b.sub(format!("down{l}")),
                    w[l],
                    w[l + 1],
                    [1, 3, 3],
                    [1, 2, 2],
                    [0, 1, 1],
                )?);
            }
        }
        let last = *w.last().expect("validated widths");
        Ok(Self {
            conv_in: Conv::same(&mut b.sub("conv_in"), r, 1, w[0], 3)?,
            blocks,
            downs,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), last)?,
            conv_out: Conv::same(&mut b.sub("conv_out"), r, last, 2 * cfg.shape.channels, 3)?,
        })
    }

    /// `(N, 1, 1, H, W)` to `(mean, logvar)`, each `(N, c, 1, H', W')`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, None)?;
            if let Some(down) = self.downs.get(l) {
                h = down.forward(&h)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?;
        split_posterior(&out)
    }
}
