//! Non-holistic autoencoder.
//!
//! A 3D encoder sees only a thumbnail of the volume and produces a compact latent
//! `z` of shape `(c, D', H', W')`. A uniaxial super-resolution network lifts `z`
//! to `(c, D, H', W')` along depth only, and a 2D slice decoder turns each
//! latent slice into an image slice. Small 3D adaptors, gated by a scalar `alpha`
//! that starts at zero, let the decoder look at a window of `k` neighbouring
//! latent slices. An auxiliary 2D encoder maps image slices back to latent
//! slices for training the slice refiner.

mod config;
mod nets;
mod sink;
mod train;

use candle_core::{Device, Tensor};

pub use config::{NhaeConfig, ShapeConfig};
pub use nets::{Adaptor, Adaptors, Decoder2d, Encoder2d, Encoder3d, SuperRes};
pub use sink::{MemorySink, NullSink, RawFileSink, VolumeSink};
pub use train::{
    train_stage_2d, train_stage_3d, train_stage_hr, TrainOptions, STAGE_2D, STAGE_3D, STAGE_HR,
};

use crate::checkpoint::{fingerprint, Checkpoint};
use crate::data::{resample_volume, Image, Volume};
use crate::error::{Error, Result};
pub use crate::nn::StageReport;
use crate::nn::{Builder, ParamStore};

pub const CHECKPOINT_KIND: &str = "nhae";

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let bad = t.flatten_all()?.to_vec1::<f32>()?.iter().any(|v| !v.is_finite());
    if bad {
        return Err(Error::validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Latent `z` of shape `(c, D', H', W')`.
#[derive(Debug, Clone)]
pub struct LatentVolume(Tensor);

impl LatentVolume {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::validation(format!("latent volume must be 4-D, got {:?}", t.dims())));
        }
        check_finite(&t, "latent volume")?;
        Ok(Self(t))
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::from_vec(data, shape.to_vec(), &Device::Cpu)?)
    }

    pub fn shape(&self) -> [usize; 4] {
        let d = self.0.dims();
        [d[0], d[1], d[2], d[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.flatten_all()?.to_vec1()?)
    }
}

/// Depth-upsampled latent `z^sr` of shape `(c, D, H', W')`, read as `D` latent slices.
#[derive(Debug, Clone)]
pub struct UpsampledLatent(Tensor);

impl UpsampledLatent {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::validation(format!("upsampled latent must be 4-D, got {:?}", t.dims())));
        }
        check_finite(&t, "upsampled latent")?;
        Ok(Self(t))
    }

    /// Stacks slices along depth.
    pub fn from_slices(slices: &[LatentSlice]) -> Result<Self> {
        let ts: Vec<Tensor> = slices.iter().map(|s| s.0.clone()).collect();
        Self::new(Tensor::stack(&ts, 1)?)
    }

    pub fn shape(&self) -> [usize; 4] {
        let d = self.0.dims();
        [d[0], d[1], d[2], d[3]]
    }

    pub fn depth(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn slice(&self, i: usize) -> Result<LatentSlice> {
        Ok(LatentSlice(self.0.narrow(1, i, 1)?.squeeze(1)?))
    }

    pub fn slices(&self) -> Result<Vec<LatentSlice>> {
        (0..self.depth()).map(|i| self.slice(i)).collect()
    }

    /// Windows of `k` replicate-padded slices centred at `first..first+count`,
    /// as a `(count·k, c, 1, H', W')` batch.
    pub fn windows(&self, first: usize, count: usize, k: usize) -> Result<Tensor> {
        let d = self.depth();
        let half = (k / 2) as isize;
        let idx: Vec<u32> = (first..first + count)
            .flat_map(|i| {
                (-half..=half).map(move |o| (i as isize + o).clamp(0, d as isize - 1) as u32)
            })
            .collect();
        let idx = Tensor::from_vec(idx, count * k, &Device::Cpu)?;
        let [c, _, h, w] = self.shape();
        Ok(self
            .0
            .index_select(&idx, 1)?
            .permute((1, 0, 2, 3))?
            .contiguous()?
            .reshape((count * k, c, 1, h, w))?)
    }
}

/// One latent slice of shape `(c, H', W')`.
#[derive(Debug, Clone)]
pub struct LatentSlice(Tensor);

impl LatentSlice {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::validation(format!("latent slice must be 3-D, got {:?}", t.dims())));
        }
        check_finite(&t, "latent slice")?;
        Ok(Self(t))
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.0.dims();
        [d[0], d[1], d[2]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.flatten_all()?.to_vec1()?)
    }
}

/// `(H, W)` image as a `(1, 1, 1, H, W)` tensor.
pub fn image_tensor(img: &Image) -> Result<Tensor> {
    Ok(Tensor::from_vec(img.pixels.clone(), (1, 1, 1, img.height, img.width), &Device::Cpu)?)
}

/// Splits an `(N, 1, 1, H, W)` decoder output into images.
fn tensor_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, _, _, h, w) = t.dims5()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(data
        .chunks(h * w)
        .take(n)
        .map(|p| Image {
            height: h,
            width: w,
            pixels: p.to_vec(),
        })
        .collect())
}

/// Inference views of every network; parameters are shared with the store but
/// detached from autograd.
#[derive(Debug, Clone)]
struct Views {
    enc3d: Encoder3d,
    fsr: SuperRes,
    dec: Decoder2d,
    adapt: Adaptors,
    enchr: Encoder2d,
}

impl Views {
    /// Also creates the stage-1 encoder's parameters so every checkpoint holds the full set.
    fn build(store: &mut ParamStore, cfg: &NhaeConfig) -> Result<Self> {
        Encoder2d::new(&mut Builder::frozen(store, "enc2d"), cfg)?;
        Ok(Self {
            enc3d: Encoder3d::new(&mut Builder::frozen(store, "enc3d"), cfg)?,
            fsr: SuperRes::new(&mut Builder::frozen(store, "fsr"), cfg)?,
            dec: Decoder2d::new(&mut Builder::frozen(store, "dec"), cfg)?,
            adapt: Adaptors::new(&mut Builder::frozen(store, "adapt"), cfg)?,
            enchr: Encoder2d::new(&mut Builder::frozen(store, "enchr"), cfg)?,
        })
    }
}

/// The assembled autoencoder.
#[derive(Debug)]
pub struct Nhae {
    config: NhaeConfig,
    params: ParamStore,
    views: Views,
}

impl Nhae {
    /// Freshly initialized model; every adaptor starts at `alpha = 0`.
    pub fn new(config: NhaeConfig, seed: u64) -> Result<Self> {
        Self::from_params(config, ParamStore::new(seed))
    }

    /// Wraps existing parameters, initializing any that are missing.
    pub fn from_params(config: NhaeConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let views = Views::build(&mut params, &config)?;
        Ok(Self { config, params, views })
    }

    pub fn config(&self) -> &NhaeConfig {
        &self.config
    }

    pub fn shape(&self) -> &ShapeConfig {
        &self.config.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config.describe())
    }

    pub fn to_checkpoint(&self, completed: &[&str]) -> Result<Checkpoint> {
        let mut params = ParamStore::new(0);
        params.copy_prefix(&self.params, "", "")?;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, "", &self.fingerprint(), params);
        for s in completed {
            ck.add_stage(s);
        }
        Ok(ck)
    }

    /// Loads a checkpoint trained under `config`, verifying its fingerprint.
    pub fn from_checkpoint(config: NhaeConfig, ck: Checkpoint) -> Result<Self> {
        ck.expect(CHECKPOINT_KIND, &fingerprint(&config.describe()))?;
        Self::from_params(config, ck.params)
    }

    /// Sets every adaptor's mixing factor.
    pub fn set_adaptor_alpha(&self, value: f32) -> Result<()> {
        for l in 0..self.config.dec.len() {
            let name = format!("adapt.a{l}.alpha");
            let var = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            var.set(&Tensor::new(&[value], &Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn adaptor_alphas(&self) -> Result<Vec<f32>> {
        self.views
            .adapt
            .list
            .iter()
            .map(|a| Ok(a.alpha().to_vec1::<f32>()?[0]))
            .collect()
    }

    /// Resamples a full-resolution volume to the thumbnail shape.
    pub fn thumbnail(&self, v: &Volume) -> Result<Volume> {
        if v.shape() != self.shape().image {
            return Err(Error::validation(format!(
                "volume {:?} does not match the configured image shape {:?}",
                v.shape(),
                self.shape().image
            )));
        }
        resample_volume(v, self.shape().thumbnail())
    }

    /// Posterior `(mean, logvar)` of `z` given a thumbnail.
    pub fn encode_thumbnail(&self, thumb: &Volume) -> Result<(LatentVolume, LatentVolume)> {
        let t = self.shape().thumbnail();
        if thumb.shape() != t {
            return Err(Error::validation(format!(
                "thumbnail {:?} does not match the configured shape {t:?}",
                thumb.shape()
            )));
        }
        let x = Tensor::from_vec(thumb.data().to_vec(), (1, 1, t[0], t[1], t[2]), &Device::Cpu)?;
        let (mean, logvar) = self.views.enc3d.forward(&x)?;
        Ok((LatentVolume::new(mean.squeeze(0)?)?, LatentVolume::new(logvar.squeeze(0)?)?))
    }

    pub fn uniaxial_superres(&self, z: &LatentVolume) -> Result<UpsampledLatent> {
        let s = self.shape();
        let want = [s.channels, s.latent[0], s.latent[1], s.latent[2]];
        if z.shape() != want {
            return Err(Error::validation(format!("latent {:?} does not match {want:?}", z.shape())));
        }
        UpsampledLatent::new(self.views.fsr.forward(&z.0.unsqueeze(0)?)?.squeeze(0)?)
    }

    fn check_slice(&self, s: &LatentSlice) -> Result<()> {
        let sh = self.shape();
        let want = [sh.channels, sh.latent[1], sh.latent[2]];
        if s.shape() != want {
            return Err(Error::validation(format!("latent slice {:?} does not match {want:?}", s.shape())));
        }
        Ok(())
    }

    /// Plain 2D decoding of one latent slice.
    pub fn decode_slice_2d(&self, s: &LatentSlice) -> Result<Image> {
        self.check_slice(s)?;
        let z = s.0.unsqueeze(0)?.unsqueeze(2)?;
        Ok(tensor_images(&self.views.dec.forward(&z, None)?)?.remove(0))
    }

    /// Decodes a batch of latent slices `(N, c, 1, H', W')` independently.
    pub fn decode_slices_2d(&self, z: &Tensor) -> Result<Vec<Image>> {
        tensor_images(&self.views.dec.forward(z, None)?)
    }

    /// Decodes the centre slice of a window of `k` consecutive latent slices.
    pub fn decode_multislice(&self, window: &[LatentSlice]) -> Result<Image> {
        let k = self.shape().window;
        if window.len() != k {
            return Err(Error::validation(format!("window has {} slices, expected {k}", window.len())));
        }
        for s in window {
            self.check_slice(s)?;
        }
        let ts: Vec<Tensor> = window.iter().map(|s| s.0.unsqueeze(1)).collect::<candle_core::Result<_>>()?;
        let z = Tensor::stack(&ts, 0)?;
        Ok(tensor_images(&self.views.dec.forward(&z, Some(&self.views.adapt))?)?.remove(0))
    }

    /// Decodes a `(B·k, c, 1, H', W')` batch of windows into `B` centre slices.
    pub fn decode_windows(&self, windows: &Tensor) -> Result<Vec<Image>> {
        tensor_images(&self.views.dec.forward(windows, Some(&self.views.adapt))?)
    }

    /// Streams every depth slice of the decoded volume into `sink`, one window at a time.
    pub fn decode_volume(&self, z: &UpsampledLatent, sink: &mut dyn VolumeSink) -> Result<()> {
        self.decode_volume_batched(z, sink, 1)
    }

    /// As [`Nhae::decode_volume`], decoding `batch` windows per pass. Resident
    /// activations scale with `batch`, never with `D`.
    pub fn decode_volume_batched(&self, z: &UpsampledLatent, sink: &mut dyn VolumeSink, batch: usize) -> Result<()> {
        let s = self.shape();
        let [c, d, h, w] = z.shape();
        if c != s.channels || h != s.latent[1] || w != s.latent[2] {
            return Err(Error::validation(format!(
                "upsampled latent {:?} does not match channels {} and slice {}×{}",
                z.shape(),
                s.channels,
                s.latent[1],
                s.latent[2]
            )));
        }
        if d < s.window {
            return Err(Error::validation(format!("depth {d} is shorter than the window {}", s.window)));
        }
        let out = [d, h * s.spatial_factor(), w * s.spatial_factor()];
        let run = |sink: &mut dyn VolumeSink| -> Result<()> {
            sink.begin(out)?;
            let mut i = 0;
            while i < d {
                let n = batch.max(1).min(d - i);
                let images = self.decode_windows(&z.windows(i, n, s.window)?)?;
                for (j, img) in images.iter().enumerate() {
                    sink.write_slice(i + j, img)?;
                }
                i += n;
            }
            sink.finish()
        };
        run(sink).inspect_err(|_| sink.abort())
    }

    /// Posterior mean of the high-resolution slice encoder.
    pub fn encode_slice_hr(&self, x: &Image) -> Result<LatentSlice> {
        let s = self.shape();
        if [x.height, x.width] != [s.image[1], s.image[2]] {
            return Err(Error::validation(format!(
                "slice {}×{} does not match {}×{}",
                x.height, x.width, s.image[1], s.image[2]
            )));
        }
        let (mean, _) = self.views.enchr.forward(&image_tensor(x)?)?;
        LatentSlice::new(mean.squeeze(0)?.squeeze(1)?)
    }

    /// High-resolution latents `(N, c, 1, H', W')` of a batch `(N, 1, 1, H, W)` of slices.
    pub fn encode_slices_hr(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.views.enchr.forward(x)?.0)
    }

    /// Autoencoding path used for fidelity checks: thumbnail, posterior mean,
    /// super-resolution and streamed decoding.
    pub fn reconstruct(&self, v: &Volume, sink: &mut dyn VolumeSink) -> Result<()> {
        let (mean, _) = self.encode_thumbnail(&self.thumbnail(v)?)?;
        let zsr = self.uniaxial_superres(&mean)?;
        self.decode_volume_batched(&zsr, sink, 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> NhaeConfig {
        let shape = ShapeConfig {
            channels: 2,
            image: [16, 16, 16],
            latent: [4, 4, 4],
            window: 3,
        };
        NhaeConfig {
            enc3d: vec![4, 8],
            fsr: vec![8, 8, 4],
            dec: vec![8, 8, 4],
            enc2d: vec![4, 8, 8],
            ..NhaeConfig::for_shape(shape)
        }
    }

    fn random_upsampled(cfg: &NhaeConfig, seed: u64) -> UpsampledLatent {
        let s = cfg.shape;
        let n = s.channels * s.image[0] * s.latent[1] * s.latent[2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        UpsampledLatent::new(
            Tensor::from_vec(data, (s.channels, s.image[0], s.latent[1], s.latent[2]), &Device::Cpu).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn shape_pipeline_yields_image_shape() {
        let nhae = Nhae::new(tiny(), 1).unwrap();
        let v = Volume::filled([16; 3], 0.25).unwrap();
        let thumb = nhae.thumbnail(&v).unwrap();
        let (mean, logvar) = nhae.encode_thumbnail(&thumb).unwrap();
        assert_eq!(mean.shape(), [2, 4, 4, 4]);
        assert_eq!(logvar.shape(), [2, 4, 4, 4]);
        let zsr = nhae.uniaxial_superres(&mean).unwrap();
        assert_eq!(zsr.shape(), [2, 16, 4, 4]);
        let mut sink = MemorySink::new();
        nhae.decode_volume(&zsr, &mut sink).unwrap();
        let out = sink.into_volume().unwrap();
        assert_eq!(out.shape(), [16, 16, 16]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let hr = nhae.encode_slice_hr(&v.slice(crate::data::SliceAxis::Depth, 0)).unwrap();
        assert_eq!(hr.shape(), [2, 4, 4]);
    }

    #[test]
    fn wrong_shapes_are_validation_errors() {
        let nhae = Nhae::new(tiny(), 1).unwrap();
        let v = Volume::filled([6; 3], 0.0).unwrap();
        assert!(matches!(nhae.encode_thumbnail(&v), Err(Error::Validation(_))));
        let zsr = random_upsampled(nhae.config(), 0);
        let window = zsr.slices().unwrap()[..2].to_vec();
        assert!(matches!(nhae.decode_multislice(&window), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_alpha_multislice_equals_plain_decoding() {
        let nhae = Nhae::new(tiny(), 2).unwrap();
        let zsr = random_upsampled(nhae.config(), 3);
        let slices = zsr.slices().unwrap();
        for i in 1..slices.len() - 1 {
            let window = &slices[i - 1..=i + 1];
            let multi = nhae.decode_multislice(window).unwrap();
            let plain = nhae.decode_slice_2d(&slices[i]).unwrap();
            assert_eq!(multi, plain);
        }
    }

    #[test]
    fn nonzero_alpha_mixes_neighbours_locally() {
        let nhae = Nhae::new(tiny(), 4).unwrap();
        nhae.set_adaptor_alpha(0.7).unwrap();
        let zsr = random_upsampled(nhae.config(), 5);
        let decode = |z: &UpsampledLatent| {
            let mut sink = MemorySink::new();
            nhae.decode_volume_batched(z, &mut sink, 4).unwrap();
            sink.into_volume().unwrap()
        };
        let base = decode(&zsr);
        let j = 7;
        let bump = Tensor::zeros(zsr.shape().to_vec(), candle_core::DType::F32, &Device::Cpu)
            .unwrap()
            .slice_assign(
                &[0..2, j..j + 1, 0..4, 0..4],
                &Tensor::ones((2, 1, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap(),
            )
            .unwrap();
        let perturbed = decode(&UpsampledLatent::new((zsr.tensor() + bump).unwrap()).unwrap());
        for i in 0..16 {
            let a = base.slice(crate::data::SliceAxis::Depth, i).pixels;
            let b = perturbed.slice(crate::data::SliceAxis::Depth, i).pixels;
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            if (i as isize - j as isize).abs() <= 1 {
                assert!(diff > 0.0, "slice {i} should change");
            } else {
                assert_eq!(diff, 0.0, "slice {i} changed");
            }
        }
    }

    #[test]
    fn batched_and_single_window_decoding_agree() {
        let nhae = Nhae::new(tiny(), 6).unwrap();
        nhae.set_adaptor_alpha(0.3).unwrap();
        let zsr = random_upsampled(nhae.config(), 7);
        let mut a = MemorySink::new();
        let mut b = MemorySink::new();
        nhae.decode_volume(&zsr, &mut a).unwrap();
        nhae.decode_volume_batched(&zsr, &mut b, 5).unwrap();
        assert_eq!(a.into_volume().unwrap(), b.into_volume().unwrap());
    }

    #[test]
    fn checkpoint_round_trip_checks_fingerprint() {
        let nhae = Nhae::new(tiny(), 8).unwrap();
        let ck = nhae.to_checkpoint(&[STAGE_2D]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.safetensors");
        ck.save(&path).unwrap();
        let back = Nhae::from_checkpoint(tiny(), Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(
            crate::checkpoint::params_digest(back.params(), "").unwrap(),
            crate::checkpoint::params_digest(nhae.params(), "").unwrap()
        );
        let other = NhaeConfig::for_shape(ShapeConfig::desk());
        assert!(Nhae::from_checkpoint(other, Checkpoint::load(&path).unwrap()).is_err());
    }
}
