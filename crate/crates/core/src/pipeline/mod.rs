//! The assembled cascade: global 3D latent synthesis, uniaxial
//! super-resolution, per-slice refinement and streamed slice-wise decoding.

mod data;
mod manifest;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{global_training_data, latent_scale, slice_training_data};
pub use manifest::{parse_key_values, BundleManifest};

use crate::checkpoint::{fingerprint, Checkpoint};
use crate::data::{LabelVolume, Volume};
use crate::diffusion::{
    ddim_sample, ddim_sample_from, gaussian, pool_label_slices, pool_labels, Conditioning, DiffusionModel,
    DiffusionTrainOptions, NoiseSchedule, ScheduleConfig,
};
use crate::error::{Error, Result, StageExt};
use crate::nhae::{LatentSlice, LatentVolume, Nhae, NhaeConfig, UpsampledLatent, VolumeSink, STAGE_2D, STAGE_3D, STAGE_HR};
use crate::nn::{Rank, StageReport};

pub const STAGE_DIFF3D: &str = "diff3d";
pub const STAGE_DIFFSLICE: &str = "diffslice";
pub const STAGE_CONDITIONAL: &str = "conditional-finetune";

/// Slices refined per denoiser call.
const REFINE_BATCH: usize = 64;
/// Windows decoded per pass when streaming a volume.
const DECODE_BATCH: usize = 8;

/// The three trained components plus the sampling schedule.
#[derive(Debug)]
pub struct CascadeBundle {
    nhae: Nhae,
    global: DiffusionModel,
    refiner: DiffusionModel,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
}

impl CascadeBundle {
    /// Checks that both denoisers operate on this autoencoder's latent geometry.
    pub fn new(nhae: Nhae, global: DiffusionModel, refiner: DiffusionModel, schedule_config: ScheduleConfig) -> Result<Self> {
        let schedule = schedule_config.build()?;
        let c = nhae.shape().channels;
        let g = global.config();
        if g.rank != Rank::Three || g.channels != c || g.extra_channels != 0 {
            return Err(Error::validation(format!(
                "global denoiser {} does not produce {c}-channel 3D latents",
                g.describe()
            )));
        }
        let r = refiner.config();
        if r.rank != Rank::Two || r.channels != c || r.extra_channels != c {
            return Err(Error::validation(format!(
                "slice refiner {} is not a {c}-channel 2D model conditioned on z^sr",
                r.describe()
            )));
        }
        if g.label_classes != r.label_classes {
            return Err(Error::validation(format!(
                "cascade stages disagree on label classes ({} vs {})",
                g.label_classes, r.label_classes
            )));
        }
        Ok(Self {
            nhae,
            global,
            refiner,
            schedule_config,
            schedule,
        })
    }

    /// Loads every checkpoint listed in a manifest and verifies that they
    /// were trained for the manifest's shape.
    pub fn load(manifest: &BundleManifest) -> Result<Self> {
        manifest.shape.validate()?;
        let config = NhaeConfig::for_shape(manifest.shape);
        let ck = Checkpoint::load(&manifest.nhae)?;
        for stage in [STAGE_2D, STAGE_3D, STAGE_HR] {
            if !ck.has_stage(stage) {
                return Err(Error::Dependency(format!(
                    "{} lacks the `{stage}` stage",
                    manifest.nhae.display()
                )));
            }
        }
        let nhae = Nhae::from_checkpoint(config, ck)?;
        let shape_fp = shape_fingerprint(&nhae);
        let load = |path: &std::path::Path, stage: &str| -> Result<DiffusionModel> {
            let ck = Checkpoint::load(path)?;
            if !ck.has_stage(stage) {
                return Err(Error::Dependency(format!("{} lacks the `{stage}` stage", path.display())));
            }
            if ck.require("shape")? != shape_fp {
                return Err(Error::Checkpoint(format!(
                    "{} was trained for a different latent shape",
                    path.display()
                )));
            }
            DiffusionModel::from_checkpoint(ck)
        };
        let global = load(&manifest.diff3d, STAGE_DIFF3D)?;
        let refiner = load(&manifest.diffslice, STAGE_DIFFSLICE)?;
        Self::new(nhae, global, refiner, manifest.schedule)
    }

    pub fn nhae(&self) -> &Nhae {
        &self.nhae
    }

    pub fn global(&self) -> &DiffusionModel {
        &self.global
    }

    pub fn refiner(&self) -> &DiffusionModel {
        &self.refiner
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_config
    }

    pub fn is_conditional(&self) -> bool {
        self.global.config().is_conditional()
    }

    /// The same weights applied to volumes of depth `depth` (all networks are
    /// convolutional), optionally with a different DDIM step count.
    pub fn resized(&self, depth: usize, ddim_steps: Option<usize>) -> Result<Self> {
        let shape = crate::eval::memory::shape_at_depth(self.nhae.shape(), depth)?;
        let copy = |p: &crate::nn::ParamStore| -> Result<crate::nn::ParamStore> {
            let mut out = crate::nn::ParamStore::new(0);
            out.copy_prefix(p, "", "")?;
            Ok(out)
        };
        let nhae = Nhae::from_params(
            NhaeConfig {
                shape,
                ..self.nhae.config().clone()
            },
            copy(self.nhae.params())?,
        )?;
        let global = DiffusionModel::from_params(self.global.config().clone(), copy(self.global.params())?, self.global.scale)?;
        let refiner =
            DiffusionModel::from_params(self.refiner.config().clone(), copy(self.refiner.params())?, self.refiner.scale)?;
        let mut schedule = self.schedule_config;
        if let Some(n) = ddim_steps {
            schedule.ddim_steps = n;
        }
        Self::new(nhae, global, refiner, schedule)
    }

    fn check_label(&self, label: Option<&LabelVolume>) -> Result<()> {
        match (self.is_conditional(), label) {
            (true, None) => Err(Error::validation("conditional bundle needs a label volume")),
            (false, Some(_)) => Err(Error::validation("bundle is unconditional; it cannot use labels")),
            (true, Some(l)) => {
                let want = self.nhae.shape().image;
                if l.shape() != want {
                    return Err(Error::validation(format!(
                        "label volume {:?} does not match the image shape {want:?}",
                        l.shape()
                    )));
                }
                let classes = self.global.config().label_classes;
                if l.class_count() as usize != classes {
                    return Err(Error::validation(format!(
                        "label volume has {} classes, bundle expects {classes}",
                        l.class_count()
                    )));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }
}

/// Identifies the latent geometry diffusion checkpoints were trained against.
pub fn shape_fingerprint(nhae: &Nhae) -> String {
    fingerprint(&nhae.shape().describe())
}

/// Independent random stream for refinement slice `index`.
pub fn slice_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Global latent `z_syn` of shape `(c, D', H', W')` via DDIM.
pub fn synthesize_global_latent(bundle: &CascadeBundle, seed: u64, label: Option<&LabelVolume>) -> Result<LatentVolume> {
    bundle.check_label(label)?;
    let s = bundle.nhae.shape();
    let cond = Conditioning {
        extra: None,
        labels: label.map(|l| pool_labels(l, s.latent)?.unsqueeze(0).map_err(Error::from)).transpose()?,
    };
    let shape = [1, s.channels, s.latent[0], s.latent[1], s.latent[2]];
    let g = &bundle.global;
    let z = ddim_sample(g, &shape, &bundle.schedule, bundle.schedule_config.ddim_steps, seed, &cond)?;
    LatentVolume::new((z.squeeze(0)? / g.scale as f64)?)
}

/// Refines every depth slice of `z_sr`, each from its own noise stream, conditioned on the slice itself.
pub fn refine_latent_slices(
    bundle: &CascadeBundle,
    zsr: &UpsampledLatent,
    seed: u64,
    label: Option<&LabelVolume>,
) -> Result<Vec<LatentSlice>> {
    bundle.check_label(label)?;
    let s = bundle.nhae.shape();
    let [c, d, h, w] = zsr.shape();
    if [c, d, h, w] != [s.channels, s.image[0], s.latent[1], s.latent[2]] {
        return Err(Error::validation(format!(
            "upsampled latent {:?} does not match ({}, {}, {}, {})",
            zsr.shape(),
            s.channels,
            s.image[0],
            s.latent[1],
            s.latent[2]
        )));
    }
    let r = &bundle.refiner;
    let scale = r.scale as f64;
    let cond_all = (zsr.tensor().permute((1, 0, 2, 3))?.unsqueeze(2)? * scale)?;
    let labels_all = label.map(|l| pool_label_slices(l, [h, w])).transpose()?;
    let mut out = Vec::with_capacity(d);
    let mut start = 0;
    while start < d {
        let n = REFINE_BATCH.min(d - start);
        let noise: Vec<Tensor> = (start..start + n)
            .map(|i| gaussian(&[1, c, 1, h, w], &mut slice_rng(seed, i)))
            .collect::<Result<_>>()?;
        let cond = Conditioning {
            extra: Some(cond_all.narrow(0, start, n)?.contiguous()?),
            labels: labels_all.as_ref().map(|t| t.narrow(0, start, n)).transpose()?,
        };
        let x = ddim_sample_from(
            r,
            Tensor::cat(&noise, 0)?,
            &bundle.schedule,
            bundle.schedule_config.ddim_steps,
            &cond,
        )?;
        let x = (x / scale)?;
        for j in 0..n {
            out.push(LatentSlice::new(x.get(j)?.squeeze(1)?)?);
        }
        start += n;
    }
    Ok(out)
}

/// Full cascade into `sink`. With `refine = false` the super-resolved global
/// latent is decoded directly.
pub fn synthesize_volume(
    bundle: &CascadeBundle,
    seed: u64,
    label: Option<&LabelVolume>,
    refine: bool,
    sink: &mut dyn VolumeSink,
) -> Result<()> {
    bundle.check_label(label)?;
    let z = synthesize_global_latent(bundle, seed, label).stage("global diffusion")?;
    let zsr = bundle.nhae.uniaxial_superres(&z).stage("uniaxial super-resolution")?;
    let zsr = if refine {
        // a distinct stream family from the global sampler's
        let slices = refine_latent_slices(bundle, &zsr, seed ^ 0x5eed_511c_e000_0000, label).stage("slice refinement")?;
        UpsampledLatent::from_slices(&slices)?
    } else {
        zsr
    };
    bundle
        .nhae
        .decode_volume_batched(&zsr, sink, DECODE_BATCH)
        .stage("slice-wise decoding")
}

/// Conditional copies of both denoisers, fine-tuned on labelled volumes at
/// the scales the unconditional models were trained with.
#[allow(clippy::too_many_arguments)]
pub fn finetune_conditional(
    nhae: &Nhae,
    global: &DiffusionModel,
    refiner: &DiffusionModel,
    data: &[Volume],
    labels: &[LabelVolume],
    label_channels: usize,
    schedule: &NoiseSchedule,
    global_opts: &DiffusionTrainOptions,
    refiner_opts: &DiffusionTrainOptions,
) -> Result<(DiffusionModel, DiffusionModel, StageReport, StageReport)> {
    let classes = labels
        .first()
        .ok_or_else(|| Error::validation("conditional fine-tuning needs labelled volumes"))?
        .class_count();
    if labels.iter().any(|l| l.class_count() != classes) {
        return Err(Error::validation("label volumes disagree on the class count"));
    }
    let classes = classes as usize;
    let mut g = DiffusionModel::conditional_from(global, classes, label_channels, global_opts.seed)?;
    let (gdata, _) = global_training_data(nhae, data, Some(labels), Some(global.scale))?;
    let greport = g.train(&gdata, schedule, global_opts).stage("global fine-tuning")?;
    drop(gdata);
    let mut r = DiffusionModel::conditional_from(refiner, classes, label_channels, refiner_opts.seed)?;
    let (rdata, _) = slice_training_data(nhae, data, Some(labels), Some(refiner.scale))?;
    let rreport = r.train(&rdata, schedule, refiner_opts).stage("refiner fine-tuning")?;
    Ok((g, r, greport, rreport))
}

/// Autoencoding path through the bundle's NHAE.
pub fn reconstruct_volume(bundle: &CascadeBundle, v: &Volume, sink: &mut dyn VolumeSink) -> Result<()> {
    bundle.nhae.reconstruct(v, sink)
}
