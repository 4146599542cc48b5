use candle_core::{Device, Tensor};

use super::params::{Builder, Init};
use crate::error::Result;
use crate::ops::{add_bias, conv3d, group_norm_silu};

/// Spatial rank of a network. Every tensor is `(N, C, D, H, W)`; 2D networks keep `D = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Two,
    Three,
}

impl Rank {
    pub fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Rank::Two => [1, k, k],
            Rank::Three => [k, k, k],
        }
    }

    pub fn same_padding(self, k: usize) -> [usize; 3] {
        match self {
            Rank::Two => [0, k / 2, k / 2],
            Rank::Three => [k / 2, k / 2, k / 2],
        }
    }

    pub fn factor(self, f: usize) -> [usize; 3] {
        match self {
            Rank::Two => [1, f, f],
            Rank::Three => [f, f, f],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Conv {
    pub fn new(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = b.tensor(
            "weight",
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            Init::Uniform { fan_in },
        )?;
        let bias = b.tensor("bias", &[cout], Init::Uniform { fan_in })?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Size-preserving convolution with an odd cubic (or square) kernel.
    pub fn same(b: &mut Builder, rank: Rank, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(b, cin, cout, rank.kernel(k), [1; 3], rank.same_padding(k))
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv3d(x, &self.weight, self.stride, self.padding)?;
        Ok(add_bias(&y, &self.bias)?)
    }
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: group_count(channels),
            gamma: b.tensor("gamma", &[channels], Init::Const(1.0))?,
            beta: b.tensor("beta", &[channels], Init::Const(0.0))?,
        })
    }

    /// Normalization, affine map and SiLU activation fused into one kernel.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(group_norm_silu(x, &self.gamma, &self.beta, self.groups)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.tensor("weight", &[cout, cin], Init::Uniform { fan_in: cin })?,
            bias: b.tensor("bias", &[cout], Init::Uniform { fan_in: cin })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Pre-activation residual block, optionally receiving a per-sample embedding
/// that is projected and added after the first convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    emb: Option<Linear>,
}

impl ResBlock {
    pub fn new(b: &mut Builder, rank: Rank, cin: usize, cout: usize, emb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.sub("norm1"), cin)?,
            conv1: Conv::same(&mut b.sub("conv1"), rank, cin, cout, 3)?,
            norm2: GroupNorm::new(&mut b.sub("norm2"), cout)?,
            conv2: Conv::same(&mut b.sub("conv2"), rank, cout, cout, 3)?,
            skip: if cin != cout {
                Some(Conv::same(&mut b.sub("skip"), rank, cin, cout, 1)?)
            } else {
                None
            },
            emb: match emb_dim {
                Some(d) => Some(Linear::new(&mut b.sub("emb"), d, cout)?),
                None => None,
            },
        })
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = proj.forward(&e.silu()?)?;
            h = add_bias(&h, &e)?;
        }
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, shape `(N, dim)`.
pub fn timestep_embedding(t: &[f32], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos() as f32);
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?)
}
