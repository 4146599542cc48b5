//! Fused group normalization for `(N, C, ...)` tensors.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

const EPS: f64 = 1e-5;

struct GroupStats {
    groups: usize,
    span: usize,
}

impl GroupStats {
    fn new(dims: &[usize], groups: usize) -> candle_core::Result<Self> {
        if dims.len() < 2 || groups == 0 || dims[1] % groups != 0 {
            candle_core::bail!("group norm: {groups} groups do not divide channels of {dims:?}");
        }
        let per_sample: usize = dims[1..].iter().product();
        Ok(Self {
            groups: dims[0] * groups,
            span: per_sample / groups,
        })
    }

    fn moments(chunk: &[f32]) -> (f64, f64) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + EPS).sqrt())
    }
}

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group norm requires contiguous input"),
    }
}

struct GroupNormalize(usize);

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s, l)?;
        let stats = GroupStats::new(l.dims(), self.0)?;
        let mut out = vec![0f32; x.len()];
        for (src, dst) in x.chunks(stats.span).zip(out.chunks_mut(stats.span)) {
            let (mean, rstd) = GroupStats::moments(src);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = ((v as f64 - mean) * rstd) as f32;
            }
        }
        debug_assert_eq!(x.len(), stats.groups * stats.span);
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let packed = Tensor::stack(&[arg.contiguous()?, res.contiguous()?], 0)?;
        Ok(Some(packed.apply_op2_no_bwd(&grad.contiguous()?, &GroupNormalizeGrad(self.0))?))
    }
}

/// Inputs: `stack([x, xhat])` and the upstream gradient.
struct GroupNormalizeGrad(usize);

impl CustomOp2 for GroupNormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let packed = contiguous(s1, l1)?;
        let grad = contiguous(s2, l2)?;
        let (x, xhat) = packed.split_at(grad.len());
        let stats = GroupStats::new(l2.dims(), self.0)?;
        let mut dx = vec![0f32; grad.len()];
        for g in 0..stats.groups {
            let r = g * stats.span..(g + 1) * stats.span;
            let (_, rstd) = GroupStats::moments(&x[r.clone()]);
            let n = stats.span as f64;
            let (mut mean_g, mut mean_gx) = (0f64, 0f64);
            for (&dy, &xh) in grad[r.clone()].iter().zip(&xhat[r.clone()]) {
                mean_g += dy as f64;
                mean_gx += dy as f64 * xh as f64;
            }
            mean_g /= n;
            mean_gx /= n;
            for ((o, &dy), &xh) in dx[r.clone()].iter_mut().zip(&grad[r.clone()]).zip(&xhat[r]) {
                *o = (rstd * (dy as f64 - mean_g - xh as f64 * mean_gx)) as f32;
            }
        }
        Ok((CpuStorage::F32(dx), l2.shape().clone()))
    }
}

/// Normalizes each `(sample, group)` block to zero mean and unit variance.
pub fn group_normalize(x: &Tensor, groups: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(GroupNormalize(groups))
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-channel span and channels per group for `(N, C, ...)`.
fn channel_layout(dims: &[usize], groups: usize) -> candle_core::Result<(usize, usize)> {
    GroupStats::new(dims, groups)?;
    Ok((dims[2..].iter().product(), dims[1] / groups))
}

/// `silu(gamma * normalize(x) + beta)` in one pass.
struct GroupNormSilu(usize);

impl CustomOp3 for GroupNormSilu {
    fn name(&self) -> &'static str {
        "group-norm-silu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let gamma = contiguous(s2, l2)?;
        let beta = contiguous(s3, l3)?;
        let stats = GroupStats::new(l1.dims(), self.0)?;
        let (inner, cpg) = channel_layout(l1.dims(), self.0)?;
        let channels = l1.dims()[1];
        let mut out = vec![0f32; x.len()];
        for (g, (src, dst)) in x.chunks(stats.span).zip(out.chunks_mut(stats.span)).enumerate() {
            let (mean, rstd) = GroupStats::moments(src);
            let (mean, rstd) = (mean as f32, rstd as f32);
            for j in 0..cpg {
                let c = (g % self.0) * cpg + j;
                debug_assert!(c < channels);
                let (a, b) = (gamma[c] * rstd, beta[c] - gamma[c] * rstd * mean);
                let r = j * inner..(j + 1) * inner;
                for (o, &v) in dst[r.clone()].iter_mut().zip(&src[r]) {
                    let y = a * v + b;
                    *o = y * sigmoid(y);
                }
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.elem_count();
        let affine = Tensor::cat(&[gamma.flatten_all()?, beta.flatten_all()?], 0)?;
        let packed = x
            .contiguous()?
            .apply_op3_no_bwd(&affine, &grad.contiguous()?, &GroupNormSiluGrad(self.0))?;
        let n = x.elem_count();
        Ok((
            Some(packed.narrow(0, 0, n)?.reshape(x.dims())?),
            Some(packed.narrow(0, n, c)?.reshape(gamma.dims())?),
            Some(packed.narrow(0, n + c, c)?.reshape(beta.dims())?),
        ))
    }
}

/// Output: `[dx, dgamma, dbeta]` flattened into one vector.
struct GroupNormSiluGrad(usize);

impl CustomOp3 for GroupNormSiluGrad {
    fn name(&self) -> &'static str {
        "group-norm-silu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let affine = contiguous(s2, l2)?;
        let grad = contiguous(s3, l3)?;
        let channels = l1.dims()[1];
        let (gamma, beta) = affine.split_at(channels);
        let stats = GroupStats::new(l1.dims(), self.0)?;
        let (inner, cpg) = channel_layout(l1.dims(), self.0)?;
        let mut out = vec![0f32; x.len() + 2 * channels];
        let (dx, dparams) = out.split_at_mut(x.len());
        let (dgamma, dbeta) = dparams.split_at_mut(channels);
        for g in 0..stats.groups {
            let base = g * stats.span;
            let src = &x[base..base + stats.span];
            let (mean, rstd) = GroupStats::moments(src);
            let (mean, rstd) = (mean as f32, rstd as f32);
            let (mut sum_d, mut sum_dx) = (0f64, 0f64);
            for j in 0..cpg {
                let c = (g % self.0) * cpg + j;
                let r = base + j * inner..base + (j + 1) * inner;
                let (mut gsum, mut bsum) = (0f64, 0f64);
                for ((o, &v), &dy) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&grad[r]) {
                    let xh = (v - mean) * rstd;
                    let y = gamma[c] * xh + beta[c];
                    let s = sigmoid(y);
                    let d = dy * s * (1.0 + y * (1.0 - s));
                    gsum += (d * xh) as f64;
                    bsum += d as f64;
                    *o = d * gamma[c];
                }
                dgamma[c] += gsum as f32;
                dbeta[c] += bsum as f32;
                sum_d += bsum * gamma[c] as f64;
                sum_dx += gsum * gamma[c] as f64;
            }
            let n = stats.span as f64;
            let (m1, m2) = ((sum_d / n) as f32, (sum_dx / n) as f32);
            for (o, &v) in dx[base..base + stats.span].iter_mut().zip(src) {
                let xh = (v - mean) * rstd;
                *o = rstd * (*o - m1 - xh * m2);
            }
        }
        let len = out.len();
        Ok((CpuStorage::F32(out), Shape::from(vec![len])))
    }
}

/// `silu(gamma * group_normalize(x) + beta)` with per-channel `gamma`, `beta`
/// of shape `(C,)`.
pub fn group_norm_silu(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormSilu(groups))
}
