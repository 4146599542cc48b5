use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::nets::{Adaptors, Decoder2d, Encoder2d, Encoder3d, SuperRes};
use super::{Nhae, Views};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore, StageReport};

pub const STAGE_2D: &str = "nhae-2d";
pub const STAGE_3D: &str = "nhae-3d";
pub const STAGE_HR: &str = "nhae-hr";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Reparameterized sample and the batch-averaged KL divergence to `N(0, I)`.
fn sample_posterior(mean: &Tensor, logvar: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let eps = gaussian(mean.dims(), rng)?;
    let z = (mean + (logvar * 0.5)?.exp()?.mul(&eps)?)?;
    let n = mean.dims()[0] as f64;
    let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - logvar)?.sum_all()?;
    Ok((z, (kl * (0.5 / n))?))
}

struct Objective {
    loss: Tensor,
    recon: f32,
    total: f32,
}

fn objective(pred: &Tensor, target: &Tensor, kl: &Tensor, kl_weight: f64, step: usize) -> Result<Objective> {
    let l1 = (pred - target)?.abs()?.mean_all()?;
    let loss = (&l1 + (kl * kl_weight)?)?;
    let total = loss.to_scalar::<f32>()?;
    let recon = l1.to_scalar::<f32>()?;
    if !total.is_finite() {
        return Err(Error::Compute(format!(
            "non-finite loss at step {step}: l1={recon}, kl={}",
            kl.to_scalar::<f32>()?
        )));
    }
    Ok(Objective { loss, recon, total })
}

fn optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn check_data(nhae: &Nhae, data: &[Volume], opts: &TrainOptions) -> Result<()> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::validation("training needs at least one volume and a positive batch size"));
    }
    for v in data {
        if v.shape() != nhae.shape().image {
            return Err(Error::validation(format!(
                "training volume {:?} does not match image shape {:?}",
                v.shape(),
                nhae.shape().image
            )));
        }
    }
    Ok(())
}

/// Batch of random depth slices, `(B, 1, 1, H, W)`.
fn random_slices(data: &[Volume], batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let [d, h, w] = data[0].shape();
    let mut pixels = Vec::with_capacity(batch * h * w);
    for _ in 0..batch {
        let v = &data[rng.random_range(0..data.len())];
        let i = rng.random_range(0..d);
        pixels.extend_from_slice(&v.data()[i * h * w..(i + 1) * h * w]);
    }
    Ok(Tensor::from_vec(pixels, (batch, 1, 1, h, w), &Device::Cpu)?)
}

impl Nhae {
    fn refresh(&mut self) -> Result<()> {
        self.views = Views::build(&mut self.params, &self.config)?;
        Ok(())
    }
}

/// Stage 1: the 2D slice autoencoder (disposable 2D encoder plus the slice decoder).
pub fn train_stage_2d(nhae: &mut Nhae, data: &[Volume], opts: &TrainOptions) -> Result<StageReport> {
    check_data(nhae, data, opts)?;
    let cfg = nhae.config.clone();
    let enc = Encoder2d::new(&mut Builder::new(&mut nhae.params, "enc2d"), &cfg)?;
    let dec = Decoder2d::new(&mut Builder::new(&mut nhae.params, "dec"), &cfg)?;
    let mut vars = nhae.params.vars_with_prefix("enc2d.");
    vars.extend(nhae.params.vars_with_prefix("dec."));
    let mut opt = optimizer(vars, opts.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = StageReport::default();
    for step in 0..opts.steps {
        let x = random_slices(data, opts.batch_size, &mut rng)?;
        let (mean, logvar) = enc.forward(&x)?;
        let (z, kl) = sample_posterior(&mean, &logvar, &mut rng)?;
        let obj = objective(&dec.forward(&z, None)?, &x, &kl, opts.kl_weight, step)?;
        opt.backward_step(&obj.loss)?;
        report.losses.push(obj.total);
        report.recon.push(obj.recon);
    }
    nhae.refresh()?;
    Ok(report)
}

/// Stage 2: with the slice decoder frozen, trains the thumbnail encoder, the
/// super-resolution network and the adaptors by reconstructing one random depth
/// slice per sample and step.
pub fn train_stage_3d(nhae: &mut Nhae, data: &[Volume], opts: &TrainOptions) -> Result<StageReport> {
    check_data(nhae, data, opts)?;
    let cfg = nhae.config.clone();
    let s = cfg.shape;
    let thumbs: Vec<Volume> = data.iter().map(|v| nhae.thumbnail(v)).collect::<Result<_>>()?;
    let enc = Encoder3d::new(&mut Builder::new(&mut nhae.params, "enc3d"), &cfg)?;
    let fsr = SuperRes::new(&mut Builder::new(&mut nhae.params, "fsr"), &cfg)?;
    let adapt = Adaptors::new(&mut Builder::new(&mut nhae.params, "adapt"), &cfg)?;
    let dec = Decoder2d::new(&mut Builder::frozen(&mut nhae.params, "dec"), &cfg)?;
    let mut vars = nhae.params.vars_with_prefix("enc3d.");
    vars.extend(nhae.params.vars_with_prefix("fsr."));
    vars.extend(nhae.params.vars_with_prefix("adapt."));
    let mut opt = optimizer(vars, opts.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let [d, h, w] = s.image;
    let t = s.thumbnail();
    let k = s.window;
    let half = (k / 2) as isize;
    let mut report = StageReport::default();
    for step in 0..opts.steps {
        let b = opts.batch_size;
        let mut thumb_px = Vec::with_capacity(b * t.iter().product::<usize>());
        let mut target_px = Vec::with_capacity(b * h * w);
        let mut picks = Vec::with_capacity(b);
        let mut window_idx = Vec::with_capacity(b * k);
        for j in 0..b {
            let v = rng.random_range(0..data.len());
            let i = rng.random_range(0..d);
            thumb_px.extend_from_slice(thumbs[v].data());
            target_px.extend_from_slice(&data[v].data()[i * h * w..(i + 1) * h * w]);
            picks.push(i);
            for o in -half..=half {
                let src = (i as isize + o).clamp(0, d as isize - 1) as usize;
                window_idx.push((j * d + src) as u32);
            }
        }
        let thumb = Tensor::from_vec(thumb_px, (b, 1, t[0], t[1], t[2]), &Device::Cpu)?;
        let target = Tensor::from_vec(target_px, (b, 1, 1, h, w), &Device::Cpu)?;
        let (mean, logvar) = enc.forward(&thumb)?;
        let (z, kl) = sample_posterior(&mean, &logvar, &mut rng)?;
        let zsr = fsr.forward(&z)?;
        let (_, c, _, lh, lw) = zsr.dims5()?;
        let slices = zsr.permute((0, 2, 1, 3, 4))?.reshape((b * d, c, 1, lh, lw))?;
        let idx = Tensor::from_vec(window_idx, b * k, &Device::Cpu)?;
        let windows = slices.index_select(&idx, 0)?;
        let obj = objective(&dec.forward(&windows, Some(&adapt))?, &target, &kl, opts.kl_weight, step)?;
        opt.backward_step(&obj.loss)?;
        report.losses.push(obj.total);
        report.recon.push(obj.recon);
        report.slice_indices.push(picks);
    }
    nhae.refresh()?;
    Ok(report)
}

/// Stage 3: trains the high-resolution slice encoder against the frozen decoder,
/// starting from the stage-1 encoder weights.
pub fn train_stage_hr(nhae: &mut Nhae, data: &[Volume], opts: &TrainOptions) -> Result<StageReport> {
    check_data(nhae, data, opts)?;
    let cfg = nhae.config.clone();
    let mut copy = ParamStore::new(0);
    copy.copy_prefix(&nhae.params, "enc2d.", "enchr.")?;
    for (name, var) in copy.iter() {
        nhae.params.insert(name, var.as_tensor())?;
    }
    let enc = Encoder2d::new(&mut Builder::new(&mut nhae.params, "enchr"), &cfg)?;
    let dec = Decoder2d::new(&mut Builder::frozen(&mut nhae.params, "dec"), &cfg)?;
    let mut opt = optimizer(nhae.params.vars_with_prefix("enchr."), opts.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = StageReport::default();
    for step in 0..opts.steps {
        let x = random_slices(data, opts.batch_size, &mut rng)?;
        let (mean, logvar) = enc.forward(&x)?;
        let (z, kl) = sample_posterior(&mean, &logvar, &mut rng)?;
        let obj = objective(&dec.forward(&z, None)?, &x, &kl, opts.kl_weight, step)?;
        opt.backward_step(&obj.loss)?;
        report.losses.push(obj.total);
        report.recon.push(obj.recon);
    }
    nhae.refresh()?;
    Ok(report)
}
