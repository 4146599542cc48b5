//! Broadcasting kernels whose candle backward passes are slow on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel requires contiguous input"),
    }
}

/// Adds `b`, shaped `(C,)` or `(N, C)`, to every position of `x: (N, C, ...)`.
struct AddBias;

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let b = contiguous(s2, l2)?;
        let dims = l1.dims();
        let (n, c) = (dims[0], dims[1]);
        let inner: usize = dims[2..].iter().product();
        let per_sample = match l2.dims() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            other => candle_core::bail!("bias {other:?} does not match input {dims:?}"),
        };
        let mut out = x.to_vec();
        for (i, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let v = if per_sample { b[i] } else { b[i % c] };
            chunk.iter_mut().for_each(|o| *o += v);
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let sums = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?;
        let gb = if b.rank() == 1 { sums.sum(0)? } else { sums };
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// Sums `(N, C, ...)` over everything after the channel axis, giving `(N, C)`.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s, l)?;
        let dims = l.dims();
        let inner: usize = dims[2..].iter().product();
        let out: Vec<f32> = x
            .chunks(inner.max(1))
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Ok((CpuStorage::F32(out), Shape::from((dims[0], dims[1]))))
    }
}

/// Bias add with a dedicated reduction in the backward pass.
pub fn add_bias(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, AddBias)
}

struct Upsample([usize; 3]);

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s, l)?;
        let (n, c, d, h, w) = l.shape().dims5()?;
        let [fd, fh, fw] = self.0;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = vec![0f32; n * c * od * oh * ow];
        let mut row = vec![0f32; ow];
        for (plane, dst) in out.chunks_mut(od * oh * ow).enumerate() {
            let src = &x[plane * d * h * w..(plane + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    let s = &src[(z * h + y) * w..(z * h + y + 1) * w];
                    for (i, r) in row.iter_mut().enumerate() {
                        *r = s[i / fw];
                    }
                    for dz in 0..fd {
                        for dy in 0..fh {
                            let o = ((z * fd + dz) * oh + y * fh + dy) * ow;
                            dst[o..o + ow].copy_from_slice(&row);
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, od, oh, ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum(self.0))?))
    }
}

/// Adjoint of [`Upsample`]: sums each `fd x fh x fw` block.
struct BlockSum([usize; 3]);

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = contiguous(s, l)?;
        let (n, c, od, oh, ow) = l.shape().dims5()?;
        let [fd, fh, fw] = self.0;
        let (d, h, w) = (od / fd, oh / fh, ow / fw);
        let mut out = vec![0f32; n * c * d * h * w];
        for (plane, dst) in out.chunks_mut(d * h * w).enumerate() {
            let src = &g[plane * od * oh * ow..(plane + 1) * od * oh * ow];
            for oz in 0..od {
                for oy in 0..oh {
                    let s = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                    let r = &mut dst[((oz / fd) * h + oy / fh) * w..((oz / fd) * h + oy / fh + 1) * w];
                    for (i, &v) in s.iter().enumerate() {
                        r[i / fw] += v;
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, d, h, w))))
    }
}

/// Nearest-neighbour upsampling of `(N, C, D, H, W)` by an integer factor per axis.
pub fn upsample_nearest(x: &Tensor, factors: [usize; 3]) -> candle_core::Result<Tensor> {
    if factors == [1, 1, 1] {
        return Ok(x.clone());
    }
    if factors.contains(&0) {
        candle_core::bail!("upsample factors must be positive, got {factors:?}");
    }
    x.contiguous()?.apply_op1(Upsample(factors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn upsample_repeats_and_backprops_sums() {
        let x = Var::from_tensor(
            &Tensor::arange(0f32, 8.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2, 2)).unwrap(),
        )
        .unwrap();
        let y = upsample_nearest(x.as_tensor(), [2, 1, 3]).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 2, 6]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(&v[12..18], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let weights = Tensor::arange(0f32, 48.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 2, 6)).unwrap();
        let g = y.mul(&weights).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // element (0,0,0) collects weights at z in {0,1}, x in {0,1,2}
        assert_eq!(gx[0], (0 + 1 + 2 + 12 + 13 + 14) as f32);
        let composed = x
            .as_tensor()
            .reshape(vec![1, 1, 2, 1, 2, 1, 2, 1])
            .unwrap()
            .broadcast_as(vec![1, 1, 2, 2, 2, 1, 2, 3])
            .unwrap()
            .reshape((1, 1, 4, 2, 6))
            .unwrap();
        let g2 = composed.mul(&weights).unwrap().sum_all().unwrap().backward().unwrap();
        let gx2 = g2.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(gx, gx2);
    }

    #[test]
    fn bias_matches_broadcast_add_for_both_shapes() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::arange(0f32, 24.0, &dev).unwrap().reshape((2, 3, 1, 2, 2)).unwrap()).unwrap();
        let probe = x.as_tensor().sqr().unwrap();
        for b in [
            Var::from_tensor(&Tensor::new(&[1f32, -2.0, 0.5], &dev).unwrap()).unwrap(),
            Var::from_tensor(&Tensor::arange(0f32, 6.0, &dev).unwrap().reshape((2, 3)).unwrap()).unwrap(),
        ] {
            let shaped = if b.rank() == 1 {
                b.as_tensor().reshape((1, 3, 1, 1, 1)).unwrap()
            } else {
                b.as_tensor().reshape((2, 3, 1, 1, 1)).unwrap()
            };
            let fast = add_bias(x.as_tensor(), b.as_tensor()).unwrap();
            let slow = x.as_tensor().broadcast_add(&shaped).unwrap();
            assert_eq!(
                fast.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                slow.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
            let g1 = fast.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = slow.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), b.as_tensor()] {
                let a = g1.get(v).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let c = g2.get(v).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert_eq!(a, c);
            }
        }
    }
}
