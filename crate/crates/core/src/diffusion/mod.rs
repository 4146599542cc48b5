//! Denoising diffusion shared by both cascade stages: schedules, the forward
//! process, the noise-prediction objective, DDPM and DDIM samplers, U-Net
//! denoisers and label conditioning.

mod condition;
mod schedule;
mod unet;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use condition::{pool_labels, pool_label_slices, LabelEncoder};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use unet::UNet;

use crate::checkpoint::{fingerprint, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore, Rank, StageReport};

pub const CHECKPOINT_KIND: &str = "diffusion";

/// Extra input channels concatenated after the noisy latent.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    /// Dense conditioning such as the super-resolved latent slice, `(N, C_extra, ...)`.
    pub extra: Option<Tensor>,
    /// Area-pooled one-hot labels at latent resolution, `(N, classes, ...)`.
    pub labels: Option<Tensor>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    /// Rows `idx` of every present tensor.
    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        let pick = |t: &Option<Tensor>| -> Result<Option<Tensor>> {
            Ok(match t {
                Some(t) => Some(t.index_select(idx, 0)?),
                None => None,
            })
        };
        Ok(Self {
            extra: pick(&self.extra)?,
            labels: pick(&self.labels)?,
        })
    }
}

/// Predicts the noise in `x_t`, one timestep per batch entry.
pub trait Denoiser {
    fn predict(&self, x: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &Conditioning) -> Result<Tensor>,
{
    fn predict(&self, x: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self(x, t, cond)
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Noise-prediction MSE at uniformly drawn timesteps in `[1, T]`.
pub fn train_diffusion_step(
    model: &dyn Denoiser,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = x0.dims()[0];
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(x0.dims(), rng)?;
    let xt = q_sample(x0, &t, &eps, schedule)?;
    let loss = (model.predict(&xt, &t, cond)? - &eps)?.sqr()?.mean_all()?;
    let v = loss.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::Compute(format!("non-finite diffusion loss {v} at timesteps {t:?}")));
    }
    Ok(loss)
}

fn step_tensor(n: usize, t: usize) -> Vec<usize> {
    vec![t; n]
}

/// Ancestral DDPM sampling over all `T` steps from seeded pure noise.
pub fn ddpm_sample(
    model: &dyn Denoiser,
    shape: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    cond: &Conditioning,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(shape, &mut rng)?;
    let n = shape[0];
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, &step_tensor(n, t), cond)?;
        let (a, ab, b) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t));
        let mean = ((&x - (eps * (b / (1.0 - ab).sqrt()))?)? * (1.0 / a.sqrt()))?;
        x = if t > 1 {
            let var = (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab) * b;
            (mean + (gaussian(shape, &mut rng)? * var.sqrt())?)?
        } else {
            mean
        };
    }
    Ok(x)
}

/// Deterministic (`eta = 0`) DDIM sampling over the strided timestep subset.
pub fn ddim_sample(
    model: &dyn Denoiser,
    shape: &[usize],
    schedule: &NoiseSchedule,
    num_steps: usize,
    seed: u64,
    cond: &Conditioning,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian(shape, &mut rng)?;
    ddim_sample_from(model, noise, schedule, num_steps, cond)
}

/// DDIM from a given `x_T`.
pub fn ddim_sample_from(
    model: &dyn Denoiser,
    noise: Tensor,
    schedule: &NoiseSchedule,
    num_steps: usize,
    cond: &Conditioning,
) -> Result<Tensor> {
    let steps = schedule.ddim_timesteps(num_steps)?;
    let n = noise.dims()[0];
    let mut x = noise;
    for (i, &t) in steps.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { steps[i - 1] };
        let eps = model.predict(&x, &step_tensor(n, t), cond)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? * (1.0 / ab.sqrt()))?;
        x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?;
    }
    Ok(x)
}

/// Architecture of a denoiser and its conditioning inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub rank: Rank,
    /// Latent channels `c` (input and output).
    pub channels: usize,
    /// Dense conditioning channels (the refiner's `z^sr` slice).
    pub extra_channels: usize,
    /// Label classes; 0 for an unconditional model.
    pub label_classes: usize,
    /// Channels produced by the label encoder.
    pub label_channels: usize,
    pub widths: Vec<usize>,
    pub emb_dim: usize,
}

impl DenoiserConfig {
    pub fn global(channels: usize) -> Self {
        Self {
            rank: Rank::Three,
            channels,
            extra_channels: 0,
            label_classes: 0,
            label_channels: 0,
            widths: vec![32, 64],
            emb_dim: 64,
        }
    }

    pub fn slice(channels: usize) -> Self {
        Self {
            rank: Rank::Two,
            channels,
            extra_channels: channels,
            label_classes: 0,
            label_channels: 0,
            widths: vec![32, 64],
            emb_dim: 64,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.label_classes > 0
    }

    pub fn input_channels(&self) -> usize {
        self.channels + self.extra_channels + if self.is_conditional() { self.label_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.is_empty() || self.widths.contains(&0) || self.emb_dim < 2 {
            return Err(Error::Config(format!("invalid denoiser configuration {self:?}")));
        }
        if self.is_conditional() && self.label_channels == 0 {
            return Err(Error::Config("conditional denoiser needs label channels".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let rank = match self.rank {
            Rank::Two => 2,
            Rank::Three => 3,
        };
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "rank={rank};channels={};extra={};classes={};label_channels={};widths={};emb={}",
            self.channels,
            self.extra_channels,
            self.label_classes,
            self.label_channels,
            widths.join(","),
            self.emb_dim
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed denoiser description `{text}`"));
        let mut cfg = Self::global(1);
        for part in text.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let num = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "rank" => {
                    cfg.rank = match v {
                        "2" => Rank::Two,
                        "3" => Rank::Three,
                        _ => return Err(bad()),
                    }
                }
                "channels" => cfg.channels = num()?,
                "extra" => cfg.extra_channels = num()?,
                "classes" => cfg.label_classes = num()?,
                "label_channels" => cfg.label_channels = num()?,
                "widths" => {
                    cfg.widths = v
                        .split(',')
                        .map(|w| w.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "emb" => cfg.emb_dim = num()?,
                _ => return Err(bad()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Nets {
    unet: UNet,
    labels: Option<LabelEncoder>,
}

impl Nets {
    fn build(store: &mut ParamStore, cfg: &DenoiserConfig, frozen: bool) -> Result<Self> {
        let mut b = if frozen {
            Builder::frozen(store, "")
        } else {
            Builder::new(store, "")
        };
        let unet = UNet::new(
            &mut b.sub("unet"),
            cfg.rank,
            cfg.input_channels(),
            cfg.channels,
            &cfg.widths,
            cfg.emb_dim,
        )?;
        let labels = if cfg.is_conditional() {
            Some(LabelEncoder::new(&mut b.sub("cond"), cfg.rank, cfg.label_classes, cfg.label_channels)?)
        } else {
            None
        };
        Ok(Self { unet, labels })
    }

    fn predict(&self, cfg: &DenoiserConfig, x: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let mut parts = vec![x.clone()];
        match (&cond.extra, cfg.extra_channels) {
            (Some(e), c) if c > 0 && e.dims()[1] == c => parts.push(e.clone()),
            (None, 0) => {}
            (e, c) => {
                return Err(Error::validation(format!(
                    "denoiser expects {c} conditioning channels, got {:?}",
                    e.as_ref().map(|e| e.dims().to_vec())
                )))
            }
        }
        match (&self.labels, &cond.labels) {
            (Some(enc), Some(l)) => parts.push(enc.forward(l)?),
            (None, None) => {}
            (Some(_), None) => return Err(Error::validation("conditional denoiser called without labels")),
            (None, Some(_)) => return Err(Error::validation("unconditional denoiser called with labels")),
        }
        for p in &parts[1..] {
            if p.dims()[0] != x.dims()[0] || p.dims()[2..] != x.dims()[2..] {
                return Err(Error::validation(format!(
                    "conditioning {:?} does not match the noisy latent {:?}",
                    p.dims(),
                    x.dims()
                )));
            }
        }
        self.unet.forward(&Tensor::cat(&parts, 1)?, t)
    }
}

/// Training inputs: clean latents and their per-sample conditioning.
#[derive(Debug, Clone)]
pub struct DiffusionData {
    pub x0: Tensor,
    pub cond: Conditioning,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// A denoiser with its parameters and the latent scale it was trained at.
pub struct DiffusionModel {
    config: DenoiserConfig,
    params: ParamStore,
    nets: Nets,
    /// Multiplier taking raw latents to the unit-variance space the model works in.
    pub scale: f32,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .field("scale", &self.scale)
            .finish()
    }
}

impl Denoiser for DiffusionModel {
    fn predict(&self, x: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.nets.predict(&self.config, x, t, cond)
    }
}

impl DiffusionModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        Self::from_params(config, ParamStore::new(seed), 1.0)
    }

    pub fn from_params(config: DenoiserConfig, mut params: ParamStore, scale: f32) -> Result<Self> {
        config.validate()?;
        let nets = Nets::build(&mut params, &config, true)?;
        Ok(Self {
            config,
            params,
            nets,
            scale,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config.describe())
    }

    /// Conditional copy: every unconditional weight is kept, the new input
    /// channels of the first convolution start at zero and the label encoder is
    /// freshly initialized.
    pub fn conditional_from(base: &DiffusionModel, classes: usize, label_channels: usize, seed: u64) -> Result<Self> {
        if base.config.is_conditional() {
            return Err(Error::validation("model is already conditional"));
        }
        let config = DenoiserConfig {
            label_classes: classes,
            label_channels,
            ..base.config.clone()
        };
        let mut params = ParamStore::new(seed);
        params.copy_prefix(&base.params, "", "")?;
        let name = "unet.conv_in.weight";
        let w = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?
            .as_tensor()
            .clone();
        let mut pad_shape = w.dims().to_vec();
        pad_shape[1] = label_channels;
        let padded = Tensor::cat(&[w, Tensor::zeros(pad_shape, DType::F32, &Device::Cpu)?], 1)?;
        params.insert(name, &padded)?;
        Self::from_params(config, params, base.scale)
    }

    /// Label channels at latent resolution from pooled one-hot labels `(N, classes, ...)`.
    pub fn encode_condition(&self, pooled: &Tensor) -> Result<Tensor> {
        let enc = self
            .nets
            .labels
            .as_ref()
            .ok_or_else(|| Error::validation("unconditional model has no label encoder"))?;
        if pooled.dims()[1] != self.config.label_classes {
            return Err(Error::validation(format!(
                "labels carry {} classes, model expects {}",
                pooled.dims()[1],
                self.config.label_classes
            )));
        }
        enc.forward(pooled)
    }

    /// Trains on `data` (already multiplied by `scale`), returning the loss curve.
    pub fn train(
        &mut self,
        data: &DiffusionData,
        schedule: &NoiseSchedule,
        opts: &DiffusionTrainOptions,
    ) -> Result<StageReport> {
        let n = data.x0.dims()[0];
        if n == 0 || opts.batch_size == 0 {
            return Err(Error::validation("diffusion training needs data and a positive batch size"));
        }
        let nets = Nets::build(&mut self.params, &self.config, false)?;
        let vars: Vec<Var> = self.params.vars_with_prefix("");
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: opts.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let cfg = self.config.clone();
        let denoise = |x: &Tensor, t: &[usize], c: &Conditioning| nets.predict(&cfg, x, t, c);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut report = StageReport::default();
        for _ in 0..opts.steps {
            let idx: Vec<u32> = (0..opts.batch_size).map(|_| rng.random_range(0..n) as u32).collect();
            let idx = Tensor::from_vec(idx, opts.batch_size, &Device::Cpu)?;
            let x0 = data.x0.index_select(&idx, 0)?;
            let cond = data.cond.select(&idx)?;
            let loss = train_diffusion_step(&denoise, &x0, schedule, &cond, &mut rng)?;
            opt.backward_step(&loss)?;
            report.losses.push(loss.to_scalar::<f32>()?);
        }
        drop(nets);
        self.nets = Nets::build(&mut self.params, &self.config, true)?;
        Ok(report)
    }

    pub fn to_checkpoint(&self, stage: &str, shape_fingerprint: &str) -> Result<Checkpoint> {
        let mut params = ParamStore::new(0);
        params.copy_prefix(&self.params, "", "")?;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, stage, &self.fingerprint(), params);
        ck.add_stage(stage);
        ck.set("denoiser", self.config.describe());
        ck.set("scale", self.scale);
        ck.set("shape", shape_fingerprint);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = DenoiserConfig::parse(ck.require("denoiser")?)?;
        ck.expect(CHECKPOINT_KIND, &fingerprint(&config.describe()))?;
        let scale = ck
            .require("scale")?
            .parse::<f32>()
            .map_err(|e| Error::Checkpoint(format!("bad scale: {e}")))?;
        Self::from_params(config, ck.params, scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(t: usize) -> NoiseSchedule {
        make_schedule(t, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn oracle_and_zero_models_bracket_the_loss() {
        let s = schedule(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian(&[64, 4, 4, 4, 4], &mut rng).unwrap();
        let oracle = |x: &Tensor, t: &[usize], _: &Conditioning| -> Result<Tensor> {
            let a: Vec<f32> = t.iter().map(|&t| s.alpha_bar(t).sqrt() as f32).collect();
            let b: Vec<f32> = t.iter().map(|&t| (1.0 - s.alpha_bar(t)).sqrt() as f32).collect();
            let a = Tensor::from_vec(a, (t.len(), 1, 1, 1, 1), &Device::Cpu)?;
            let b = Tensor::from_vec(b, (t.len(), 1, 1, 1, 1), &Device::Cpu)?;
            Ok((x - x0.broadcast_mul(&a)?)?.broadcast_div(&b)?)
        };
        let loss = train_diffusion_step(&oracle, &x0, &s, &Conditioning::none(), &mut rng)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(loss < 1e-6, "{loss}");
        let zero = |x: &Tensor, _: &[usize], _: &Conditioning| -> Result<Tensor> { Ok(x.zeros_like()?) };
        let loss = train_diffusion_step(&zero, &x0, &s, &Conditioning::none(), &mut rng)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!((loss - 1.0).abs() < 0.03, "{loss}");
    }

    #[test]
    fn nan_loss_aborts() {
        let s = schedule(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian(&[2, 1, 2, 2, 2], &mut rng).unwrap();
        let nan = |x: &Tensor, _: &[usize], _: &Conditioning| -> Result<Tensor> {
            Ok(x.zeros_like()?.affine(0.0, f64::NAN)?)
        };
        assert!(matches!(
            train_diffusion_step(&nan, &x0, &s, &Conditioning::none(), &mut rng),
            Err(Error::Compute(_))
        ));
    }

    #[test]
    fn samplers_are_seeded_and_shaped() {
        let model = DiffusionModel::new(
            DenoiserConfig {
                widths: vec![8, 8],
                emb_dim: 8,
                ..DenoiserConfig::global(2)
            },
            0,
        )
        .unwrap();
        let s = schedule(20);
        let shape = [1, 2, 4, 4, 4];
        let a = ddim_sample(&model, &shape, &s, 5, 9, &Conditioning::none()).unwrap();
        let b = ddim_sample(&model, &shape, &s, 5, 9, &Conditioning::none()).unwrap();
        assert_eq!(a.dims(), &shape);
        let (va, vb) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(va.iter().all(|v| v.is_finite()));
        let c = ddpm_sample(&model, &shape, &s, 9, &Conditioning::none()).unwrap();
        let d = ddpm_sample(&model, &shape, &s, 9, &Conditioning::none()).unwrap();
        assert_eq!(c.flatten_all().unwrap().to_vec1::<f32>().unwrap(), d.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(ddim_sample(&model, &shape, &s, 21, 9, &Conditioning::none()).is_err());
    }

    #[test]
    fn one_step_ddpm_is_a_single_denoise() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let fixed = |x: &Tensor, _: &[usize], _: &Conditioning| -> Result<Tensor> { Ok((x.ones_like()? * 0.5)?) };
        let out = ddpm_sample(&fixed, &[1, 3], &s, 4, &Conditioning::none()).unwrap();
        let noise = gaussian(&[1, 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let want = ((noise - 0.5 * 0.1f64.sqrt()).unwrap() / 0.9f64.sqrt()).unwrap();
        let diff = (out - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn conditional_copy_starts_at_unconditional_behaviour() {
        let cfg = DenoiserConfig {
            widths: vec![8, 8],
            emb_dim: 8,
            ..DenoiserConfig::slice(2)
        };
        let base = DiffusionModel::new(cfg, 3).unwrap();
        let cond = DiffusionModel::conditional_from(&base, 3, 4, 5).unwrap();
        assert_eq!(cond.config().input_channels(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&[2, 2, 1, 4, 4], &mut rng).unwrap();
        let extra = gaussian(&[2, 2, 1, 4, 4], &mut rng).unwrap();
        let labels = gaussian(&[2, 3, 1, 4, 4], &mut rng).unwrap();
        let a = base
            .predict(&x, &[5, 7], &Conditioning { extra: Some(extra.clone()), labels: None })
            .unwrap();
        let b = cond
            .predict(&x, &[5, 7], &Conditioning { extra: Some(extra), labels: Some(labels) })
            .unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
        assert!(base.predict(&x, &[1, 1], &Conditioning::none()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_config_and_scale() {
        let cfg = DenoiserConfig {
            widths: vec![8],
            emb_dim: 4,
            label_classes: 3,
            label_channels: 2,
            ..DenoiserConfig::global(2)
        };
        let mut m = DiffusionModel::new(cfg.clone(), 1).unwrap();
        m.scale = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        m.to_checkpoint("diff3d", "abc").unwrap().save(&path).unwrap();
        let back = DiffusionModel::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.scale, 0.25);
    }
}
