use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{timestep_embedding, Builder, Conv, GroupNorm, Linear, Rank, ResBlock};
use crate::ops::upsample_nearest;

/// U-shaped noise predictor: residual blocks with an additive timestep
/// embedding, strided downsampling and nearest-neighbour upsampling.
#[derive(Debug, Clone)]
pub struct UNet {
    rank: Rank,
    emb_dim: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down_blocks: Vec<ResBlock>,
    downs: Vec<Conv>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNet {
    pub fn new(b: &mut Builder, rank: Rank, in_ch: usize, out_ch: usize, widths: &[usize], emb_dim: usize) -> Result<Self> {
        let levels = widths.len();
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut up_blocks = Vec::new();
        let mut ups = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(&mut b.sub(format!("down{l}")), rank, prev, w, Some(emb_dim))?);
            if l + 1 < levels {
                downs.push(Conv::new(
                    &mut b.sub(format!("pool{l}")),
                    w,
                    w,
                    rank.kernel(3),
                    rank.factor(2),
                    rank.same_padding(3),
                )?);
            }
            prev = w;
        }
        let last = widths[levels - 1];
        for l in (0..levels).rev() {
            let w = widths[l];
            let cin = if l == levels - 1 { last + w } else { w + w };
            up_blocks.push(ResBlock::new(&mut b.sub(format!("up{l}")), rank, cin, w, Some(emb_dim))?);
            if l > 0 {
                ups.push(Conv::same(&mut b.sub(format!("unpool{l}")), rank, w, widths[l - 1], 3)?);
            }
        }
        Ok(Self {
            rank,
            emb_dim,
            time1: Linear::new(&mut b.sub("time1"), emb_dim, emb_dim)?,
            time2: Linear::new(&mut b.sub("time2"), emb_dim, emb_dim)?,
            conv_in: Conv::same(&mut b.sub("conv_in"), rank, in_ch, widths[0], 3)?,
            down_blocks,
            downs,
            mid: ResBlock::new(&mut b.sub("mid"), rank, last, last, Some(emb_dim))?,
            up_blocks,
            ups,
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), widths[0])?,
            conv_out: Conv::same(&mut b.sub("conv_out"), rank, widths[0], out_ch, 3)?,
        })
    }

    /// `x` is `(N, in_ch, D, H, W)`; spatial sizes must be divisible by
    /// `2^(levels-1)` (in-plane only for 2D networks).
    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let tf: Vec<f32> = t.iter().map(|&s| s as f32).collect();
        let emb = timestep_embedding(&tf, self.emb_dim)?;
        let emb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for (l, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(&h, Some(&emb))?;
            skips.push(h.clone());
            if let Some(down) = self.downs.get(l) {
                h = down.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, Some(&emb))?;
        for (i, block) in self.up_blocks.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&emb))?;
            if let Some(up) = self.ups.get(i) {
                h = up.forward(&upsample_nearest(&h, self.rank.factor(2))?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?)
    }
}
