//! Dense 3D convolution on `(N, C, D, H, W)` tensors, lowered to im2col + sgemm.
//!
//! 2D convolutions use the same kernel with a unit depth axis. Output planes
//! (one output depth index of one sample) are gathered into groups so that the
//! GEMM always sees a reasonably wide right-hand side, even for 8x8 latents.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// Target number of output columns per GEMM call.
const MIN_COLUMNS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output_dims(&self, input: [usize; 3]) -> candle_core::Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                candle_core::bail!(
                    "conv kernel {:?} does not fit input {:?} with padding {:?}",
                    self.kernel,
                    input,
                    self.padding
                );
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Fully resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Plan {
    geo: ConvGeometry,
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Plan {
    fn new(geo: ConvGeometry, x: &[usize], w: &[usize]) -> candle_core::Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            candle_core::bail!("conv expects 5-D input and weight, got {x:?} and {w:?}");
        }
        if x[1] != w[1] || w[2..] != geo.kernel {
            candle_core::bail!("conv weight {w:?} incompatible with input {x:?} / kernel {:?}", geo.kernel);
        }
        let input = [x[2], x[3], x[4]];
        Ok(Self {
            geo,
            batch: x[0],
            cin: x[1],
            cout: w[0],
            input,
            output: geo.output_dims(input)?,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.geo.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn planes(&self) -> usize {
        self.batch * self.output[0]
    }

    fn group(&self) -> usize {
        MIN_COLUMNS.div_ceil(self.plane()).clamp(1, self.planes())
    }

    /// Offset of output plane `(b, z)` channel 0 in the `(N, Co, Do, P)` output.
    fn out_offset(&self, plane: usize) -> usize {
        let (b, z) = (plane / self.output[0], plane % self.output[0]);
        b * self.cout * self.output[0] * self.plane() + z * self.plane()
    }

    fn out_channel_stride(&self) -> usize {
        self.output[0] * self.plane()
    }

    /// Writes the receptive fields of output plane `plane` into `cols`,
    /// a `(rows, row_stride)` matrix, starting at column `col0`.
    fn im2col(&self, x: &[f32], plane: usize, cols: &mut [f32], row_stride: usize, col0: usize) {
        let (b, z) = (plane / self.output[0], plane % self.output[0]);
        let x = &x[b * self.cin * self.in_volume()..(b + 1) * self.cin * self.in_volume()];
        let [kd, kh, kw] = self.geo.kernel;
        let [sd, sh, sw] = self.geo.stride;
        let [pd, ph, pw] = self.geo.padding;
        let [id, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let mut row = 0;
        for ci in 0..self.cin {
            for kz in 0..kd {
                let iz = (z * sd + kz) as isize - pd as isize;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut cols[row * row_stride + col0..row * row_stride + col0 + oh * ow];
                        row += 1;
                        if iz < 0 || iz >= id as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let base = (ci * id + iz as usize) * ih * iw;
                        for oy in 0..oh {
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let src = &x[base + iy as usize * iw..base + (iy as usize + 1) * iw];
                            fill_row(drow, src, sw, kx as isize - pw as isize);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatter-adds columns back into `dx`.
    fn col2im(&self, cols: &[f32], row_stride: usize, col0: usize, plane: usize, dx: &mut [f32]) {
        let (b, z) = (plane / self.output[0], plane % self.output[0]);
        let dx = &mut dx[b * self.cin * self.in_volume()..(b + 1) * self.cin * self.in_volume()];
        let [kd, kh, kw] = self.geo.kernel;
        let [sd, sh, sw] = self.geo.stride;
        let [pd, ph, pw] = self.geo.padding;
        let [id, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let mut row = 0;
        for ci in 0..self.cin {
            for kz in 0..kd {
                let iz = (z * sd + kz) as isize - pd as isize;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = &cols[row * row_stride + col0..row * row_stride + col0 + oh * ow];
                        row += 1;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        let base = (ci * id + iz as usize) * ih * iw;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let drow = &mut dx[base + iy as usize * iw..base + (iy as usize + 1) * iw];
                            add_row(drow, &src[oy * ow..(oy + 1) * ow], sw, kx as isize - pw as isize);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn fill_row(dst: &mut [f32], src: &[f32], stride: usize, off: isize) {
    let n = src.len() as isize;
    if stride == 1 {
        // valid ox range: 0 <= ox + off < n
        let lo = (-off).clamp(0, dst.len() as isize) as usize;
        let hi = (n - off).clamp(0, dst.len() as isize) as usize;
        dst[..lo].fill(0.0);
        if hi > lo {
            let s0 = (lo as isize + off) as usize;
            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
        }
        dst[hi.max(lo)..].fill(0.0);
    } else {
        for (ox, v) in dst.iter_mut().enumerate() {
            let ix = (ox * stride) as isize + off;
            *v = if ix >= 0 && ix < n { src[ix as usize] } else { 0.0 };
        }
    }
}

/// Adjoint of [`fill_row`]: `dst[ox * stride + off] += src[ox]` where in range.
#[inline]
fn add_row(dst: &mut [f32], src: &[f32], stride: usize, off: isize) {
    let n = dst.len() as isize;
    if stride == 1 {
        let lo = (-off).clamp(0, src.len() as isize) as usize;
        let hi = (n - off).clamp(0, src.len() as isize) as usize;
        if hi > lo {
            let d0 = (lo as isize + off) as usize;
            for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                *d += v;
            }
        }
    } else {
        for (ox, &v) in src.iter().enumerate() {
            let ix = (ox * stride) as isize + off;
            if ix >= 0 && ix < n {
                dst[ix as usize] += v;
            }
        }
    }
}

/// Cache-blocked transpose of a `(rows, cols)` row-major matrix into `dst`.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const BLOCK: usize = 16;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(a.len() >= span(m, k.max(1), rsa, csa));
    assert!(b.len() >= span(k.max(1), n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv kernels require contiguous inputs"),
    }
}

struct ConvForward(ConvGeometry);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let w = contiguous(s2, l2)?;
        let plan = Plan::new(self.0, l1.dims(), l2.dims())?;
        let (rows, p, g) = (plan.rows(), plan.plane(), plan.group());
        let mut out = vec![0f32; plan.batch * plan.cout * plan.out_channel_stride()];
        let mut cols = vec![0f32; rows * g * p];
        let mut tmp = vec![0f32; plan.cout * g * p];
        let planes = plan.planes();
        let mut start = 0;
        while start < planes {
            let count = g.min(planes - start);
            let width = count * p;
            for j in 0..count {
                plan.im2col(x, start + j, &mut cols, width, j * p);
            }
            sgemm(plan.cout, rows, width, w, (rows, 1), &cols, (width, 1), 0.0, &mut tmp, (width, 1));
            for j in 0..count {
                let base = plan.out_offset(start + j);
                for co in 0..plan.cout {
                    let dst = base + co * plan.out_channel_stride();
                    out[dst..dst + p].copy_from_slice(&tmp[co * width + j * p..co * width + (j + 1) * p]);
                }
            }
            start += count;
        }
        let [od, oh, ow] = plan.output;
        Ok((
            CpuStorage::F32(out),
            Shape::from(vec![plan.batch, plan.cout, od, oh, ow]),
        ))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        // Frozen weights and raw inputs are detached; skip their gradients.
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &ConvGradInput {
                    geo: self.0,
                    input: x.dims().to_vec(),
                },
            )?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(
                &grad,
                &ConvGradWeight {
                    geo: self.0,
                    weight: w.dims().to_vec(),
                },
            )?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

/// Gathers output plane gradients of a group into a `(cout, width)` matrix.
fn gather_grad(plan: &Plan, grad: &[f32], start: usize, count: usize, buf: &mut [f32]) {
    let p = plan.plane();
    let width = count * p;
    for j in 0..count {
        let base = plan.out_offset(start + j);
        for co in 0..plan.cout {
            let src = base + co * plan.out_channel_stride();
            buf[co * width + j * p..co * width + (j + 1) * p].copy_from_slice(&grad[src..src + p]);
        }
    }
}

struct ConvGradInput {
    geo: ConvGeometry,
    input: Vec<usize>,
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv3d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let grad = contiguous(s1, l1)?;
        let w = contiguous(s2, l2)?;
        let plan = Plan::new(self.geo, &self.input, l2.dims())?;
        let (rows, p, g) = (plan.rows(), plan.plane(), plan.group());
        let mut dx = vec![0f32; plan.batch * plan.cin * plan.in_volume()];
        let mut cols = vec![0f32; rows * g * p];
        let mut gbuf = vec![0f32; plan.cout * g * p];
        let planes = plan.planes();
        let mut start = 0;
        while start < planes {
            let count = g.min(planes - start);
            let width = count * p;
            gather_grad(&plan, grad, start, count, &mut gbuf);
            // cols = W^T * grad
            sgemm(rows, plan.cout, width, w, (1, rows), &gbuf, (width, 1), 0.0, &mut cols, (width, 1));
            for j in 0..count {
                plan.col2im(&cols, width, j * p, start + j, &mut dx);
            }
            start += count;
        }
        Ok((CpuStorage::F32(dx), Shape::from(self.input.clone())))
    }
}

struct ConvGradWeight {
    geo: ConvGeometry,
    weight: Vec<usize>,
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv3d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let grad = contiguous(s2, l2)?;
        let plan = Plan::new(self.geo, l1.dims(), &self.weight)?;
        let (rows, p, g) = (plan.rows(), plan.plane(), plan.group());
        let mut dw = vec![0f32; plan.cout * rows];
        let mut cols = vec![0f32; rows * g * p];
        let mut cols_t = vec![0f32; rows * g * p];
        let mut gbuf = vec![0f32; plan.cout * g * p];
        let planes = plan.planes();
        let mut start = 0;
        while start < planes {
            let count = g.min(planes - start);
            let width = count * p;
            for j in 0..count {
                plan.im2col(x, start + j, &mut cols, width, j * p);
            }
            // matrixmultiply packs a row-major right operand far faster
            transpose(&cols[..rows * width], rows, width, &mut cols_t);
            gather_grad(&plan, grad, start, count, &mut gbuf);
            // dW += grad * cols^T
            sgemm(plan.cout, width, rows, &gbuf, (width, 1), &cols_t, (rows, 1), 1.0, &mut dw, (rows, 1));
            start += count;
        }
        Ok((CpuStorage::F32(dw), Shape::from(self.weight.clone())))
    }
}

/// Scratch `f32` elements (im2col columns plus GEMM output) one forward call allocates.
pub fn conv_workspace(batch: usize, cin: usize, cout: usize, kernel: [usize; 3], output: [usize; 3]) -> usize {
    let plane = output[1] * output[2];
    let planes = batch * output[0];
    let group = MIN_COLUMNS.div_ceil(plane.max(1)).clamp(1, planes.max(1));
    (cin * kernel.iter().product::<usize>() + cout) * group * plane
}

/// Convolution of `x: (N, C, D, H, W)` with `w: (Co, C, kd, kh, kw)`, zero padded. No bias.
pub fn conv3d(x: &Tensor, w: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> candle_core::Result<Tensor> {
    let dims = w.dims();
    if dims.len() != 5 {
        candle_core::bail!("conv weight must be 5-D, got {dims:?}");
    }
    let geo = ConvGeometry {
        kernel: [dims[2], dims[3], dims[4]],
        stride,
        padding,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvForward(geo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    /// Direct seven-loop convolution, the reference the GEMM lowering must match.
    fn reference(x: &Tensor, w: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Vec<f32> {
        let (xd, wd) = (x.dims().to_vec(), w.dims().to_vec());
        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let geo = ConvGeometry {
            kernel: [wd[2], wd[3], wd[4]],
            stride,
            padding: pad,
        };
        let o = geo.output_dims([xd[2], xd[3], xd[4]]).unwrap();
        let mut out = vec![0f32; xd[0] * wd[0] * o.iter().product::<usize>()];
        let mut i = 0;
        for n in 0..xd[0] {
            for co in 0..wd[0] {
                for oz in 0..o[0] {
                    for oy in 0..o[1] {
                        for ox in 0..o[2] {
                            let mut acc = 0f64;
                            for ci in 0..xd[1] {
                                for kz in 0..wd[2] {
                                    for ky in 0..wd[3] {
                                        for kx in 0..wd[4] {
                                            let z = (oz * stride[0] + kz) as isize - pad[0] as isize;
                                            let y = (oy * stride[1] + ky) as isize - pad[1] as isize;
                                            let xx = (ox * stride[2] + kx) as isize - pad[2] as isize;
                                            if z < 0 || y < 0 || xx < 0 || z >= xd[2] as isize || y >= xd[3] as isize || xx >= xd[4] as isize {
                                                continue;
                                            }
                                            let xi = (((n * xd[1] + ci) * xd[2] + z as usize) * xd[3] + y as usize) * xd[4] + xx as usize;
                                            let wi = (((co * wd[1] + ci) * wd[2] + kz) * wd[3] + ky) * wd[4] + kx;
                                            acc += xv[xi] as f64 * wv[wi] as f64;
                                        }
                                    }
                                }
                            }
                            out[i] = acc as f32;
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let cases: &[(&[usize], &[usize], [usize; 3], [usize; 3])] = &[
            (&[2, 3, 4, 5, 6], &[4, 3, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
            (&[2, 3, 5, 6, 7], &[2, 3, 3, 3, 3], [2, 1, 2], [1, 1, 1]),
            (&[3, 2, 1, 8, 8], &[5, 2, 1, 3, 3], [1, 2, 2], [0, 1, 1]),
            (&[1, 4, 6, 4, 4], &[3, 4, 3, 1, 1], [1, 1, 1], [1, 0, 0]),
            (&[70, 2, 1, 2, 3], &[3, 2, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ];
        for (i, (xs, ws, s, p)) in cases.iter().enumerate() {
            let x = random(xs, i as u64);
            let w = random(ws, 100 + i as u64);
            let got = conv3d(&x, &w, *s, *p).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let want = reference(&x, &w, *s, *p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Var::from_tensor(&random(&[2, 2, 3, 4, 5], 1)).unwrap();
        let w = Var::from_tensor(&random(&[3, 2, 3, 3, 3], 2)).unwrap();
        let probe = random(&[2, 3, 2, 4, 3], 3);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv3d(x, w, [2, 1, 2], [1, 1, 1])
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64
        };
        let y = conv3d(x.as_tensor(), w.as_tensor(), [2, 1, 2], [1, 1, 1]).unwrap();
        let grads = y.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for idx in (0..base.len()).step_by(7) {
                let eps = 1e-2f32;
                let mut plus = base.clone();
                plus[idx] += eps;
                let mut minus = base.clone();
                minus[idx] -= eps;
                let shape = var.as_tensor().dims();
                let tp = Tensor::from_vec(plus, shape, &Device::Cpu).unwrap();
                let tm = Tensor::from_vec(minus, shape, &Device::Cpu).unwrap();
                let (lp, lm) = if is_x {
                    (loss(&tp, other.as_tensor()), loss(&tm, other.as_tensor()))
                } else {
                    (loss(other.as_tensor(), &tp), loss(other.as_tensor(), &tm))
                };
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - g[idx] as f64).abs() < 2e-3, "grad {idx}: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn batching_does_not_change_per_sample_results() {
        let w = random(&[4, 3, 1, 3, 3], 9);
        let x = random(&[6, 3, 1, 8, 8], 10);
        let all = conv3d(&x, &w, [1; 3], [0, 1, 1]).unwrap();
        let one = conv3d(&x.narrow(0, 3, 1).unwrap(), &w, [1; 3], [0, 1, 1]).unwrap();
        let a = all.narrow(0, 3, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = one.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
