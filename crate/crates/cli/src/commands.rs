use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use caldm::checkpoint::Checkpoint;
use caldm::data::{generate_phantom, load_labels, load_volume, save_labels, save_volume, LabelVolume, PhantomSpec, Volume, VolumeLayout};
use caldm::diffusion::{DenoiserConfig, DiffusionModel, DiffusionTrainOptions};
use caldm::error::{Error, Result};
use caldm::eval::memory::{measure_peak, profile_peak_memory, reports_csv, ProfileOptions, ProfileSubject, Strategy, Task};
use caldm::eval::{slice_fid, total_variation, FidAxis, MetricsReport, RandomConvFeatures};
use caldm::nhae::{
    train_stage_2d, train_stage_3d, train_stage_hr, Nhae, NhaeConfig, RawFileSink, StageReport, TrainOptions, STAGE_2D,
    STAGE_3D, STAGE_HR,
};
use caldm::pipeline::{
    finetune_conditional, global_training_data, shape_fingerprint, slice_training_data, synthesize_volume,
    BundleManifest, CascadeBundle, STAGE_CONDITIONAL, STAGE_DIFF3D, STAGE_DIFFSLICE,
};
use log::{info, warn};

use crate::config::RunConfig;

pub const BUNDLE_MANIFEST: &str = "bundle.manifest";
pub const CONDITIONAL_MANIFEST: &str = "bundle-conditional.manifest";
const NHAE_CKPT: &str = "nhae.ckpt";
const DIFF3D_CKPT: &str = "diff3d.ckpt";
const DIFFSLICE_CKPT: &str = "diffslice.ckpt";
const DIFF3D_COND_CKPT: &str = "diff3d-conditional.ckpt";
const DIFFSLICE_COND_CKPT: &str = "diffslice-conditional.ckpt";
const LABEL_SUFFIX: &str = "_labels.u8";

pub const STAGES: &[&str] = &[
    STAGE_2D,
    STAGE_3D,
    STAGE_HR,
    STAGE_DIFF3D,
    STAGE_DIFFSLICE,
    STAGE_CONDITIONAL,
];

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_phantoms(cfg: &RunConfig) -> Result<()> {
    let count = cfg.count.unwrap_or(20);
    let dir = &cfg.dataset;
    let specs: Vec<PhantomSpec> = (0..count)
        .map(|i| PhantomSpec {
            size: cfg.shape.image,
            layer_count: cfg.layers,
            vessel_count: cfg.vessels,
            noise_level: cfg.noise,
            seed: cfg.seed + i as u64,
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    create_dir(dir)?;
    let mut manifest = String::from("# name seed size layers vessels noise\n");
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("phantom_{i:04}");
        let (v, l) = generate_phantom(spec)?;
        save_volume(&v, &dir.join(format!("{name}.raw")), VolumeLayout::Raw)?;
        save_labels(&l, &dir.join(format!("{name}{LABEL_SUFFIX}")))?;
        let [d, h, w] = spec.size;
        manifest.push_str(&format!(
            "name={name} seed={} size={d},{h},{w} layers={} vessels={} noise={}\n",
            spec.seed, spec.layer_count, spec.vessel_count, spec.noise_level
        ));
    }
    write(&dir.join("manifest.txt"), &manifest)?;
    info!("wrote {count} phantoms to {}", dir.display());
    Ok(())
}

/// Volume files of a directory: raw payloads and slice-image directories, by name.
fn volume_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let raw = path.extension().is_some_and(|x| x == "raw") && path.with_extension("hdr").exists();
        if raw || path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn label_path(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().unwrap_or_default().to_string_lossy();
    volume.with_file_name(format!("{stem}{LABEL_SUFFIX}"))
}

struct Dataset {
    volumes: Vec<Volume>,
    labels: Option<Vec<LabelVolume>>,
}

fn load_dataset(cfg: &RunConfig, need_labels: bool) -> Result<Dataset> {
    let dir = &cfg.dataset;
    if !dir.is_dir() {
        return Err(Error::Dependency(format!(
            "dataset {} does not exist; run `caldm gen-phantoms` first",
            dir.display()
        )));
    }
    let paths = volume_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Dependency(format!("dataset {} holds no volumes", dir.display())));
    }
    let mut volumes = Vec::new();
    for p in &paths {
        let v = load_volume(p, VolumeLayout::detect(p))?;
        if v.shape() != cfg.shape.image {
            return Err(Error::validation(format!(
                "{} has shape {:?}, configuration expects {:?}",
                p.display(),
                v.shape(),
                cfg.shape.image
            )));
        }
        volumes.push(v);
    }
    let labels = if need_labels {
        let ls = paths
            .iter()
            .map(|p| {
                let lp = label_path(p);
                if !lp.exists() {
                    return Err(Error::Dependency(format!("missing label volume {}", lp.display())));
                }
                load_labels(&lp)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(ls)
    } else {
        None
    };
    info!("loaded {} volumes from {}", volumes.len(), dir.display());
    Ok(Dataset { volumes, labels })
}

/// Stage defaults: steps, batch size, learning rate.
fn stage_defaults(stage: &str) -> (usize, usize, f64) {
    match stage {
        STAGE_2D => (800, 8, 1e-3),
        STAGE_3D => (400, 2, 1e-3),
        STAGE_HR => (400, 8, 1e-3),
        STAGE_DIFF3D => (1000, 4, 1e-3),
        STAGE_DIFFSLICE => (4000, 16, 1e-3),
        _ => (400, 4, 5e-4),
    }
}

fn hyper(cfg: &RunConfig, stage: &str) -> (usize, usize, f64) {
    let (s, b, lr) = stage_defaults(stage);
    (cfg.steps.unwrap_or(s), cfg.batch_size.unwrap_or(b), cfg.learning_rate.unwrap_or(lr))
}

fn loss_csv(report: &StageReport) -> String {
    let mut out = String::from("step,loss,recon\n");
    for (i, l) in report.losses.iter().enumerate() {
        let r = report.recon.get(i).map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!("{i},{l},{r}\n"));
    }
    out
}

fn load_checkpoint(path: &Path, stage: &str, needs: &[&str]) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "stage {stage} needs {}, which does not exist; train `{}` first",
            path.display(),
            needs[0]
        )));
    }
    let ck = Checkpoint::load(path)?;
    for need in needs {
        if !ck.has_stage(need) {
            return Err(Error::Dependency(format!(
                "stage {stage} needs {} to contain stage `{need}`; train it first",
                path.display()
            )));
        }
    }
    Ok(ck)
}

fn load_nhae(cfg: &RunConfig, stage: &str, needs: &[&str]) -> Result<Nhae> {
    let ck = load_checkpoint(&cfg.checkpoints.join(NHAE_CKPT), stage, needs)?;
    Nhae::from_checkpoint(NhaeConfig::for_shape(cfg.shape), ck)
}

fn load_diffusion(path: &Path, stage: &str, need: &str, nhae: &Nhae) -> Result<DiffusionModel> {
    let ck = load_checkpoint(path, stage, &[need])?;
    if ck.require("shape")? != shape_fingerprint(nhae) {
        return Err(Error::Dependency(format!(
            "{} was trained for another latent shape; retrain `{need}`",
            path.display()
        )));
    }
    DiffusionModel::from_checkpoint(ck)
}

fn write_manifest(cfg: &RunConfig, name: &str, diff3d: &str, diffslice: &str) -> Result<()> {
    let dir = &cfg.checkpoints;
    let (a, b) = (dir.join(diff3d), dir.join(diffslice));
    if !(a.exists() && b.exists()) {
        return Ok(());
    }
    let manifest = BundleManifest {
        nhae: PathBuf::from(NHAE_CKPT),
        diff3d: PathBuf::from(diff3d),
        diffslice: PathBuf::from(diffslice),
        schedule: cfg.schedule,
        shape: cfg.shape,
    };
    let path = dir.join(name);
    write(&path, &manifest.to_text())?;
    info!("bundle manifest written to {}", path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let stage = cfg
        .stage
        .as_deref()
        .ok_or_else(|| Error::validation(format!("train needs --stage, one of {}", STAGES.join(", "))))?;
    if !STAGES.contains(&stage) {
        return Err(Error::validation(format!(
            "unknown stage `{stage}`; expected one of {}",
            STAGES.join(", ")
        )));
    }
    let (steps, batch_size, learning_rate) = hyper(cfg, stage);
    let dir = &cfg.checkpoints;
    let nhae_opts = TrainOptions {
        steps,
        batch_size,
        learning_rate,
        kl_weight: cfg.kl_weight,
        seed: cfg.seed,
    };
    let diff_opts = DiffusionTrainOptions {
        steps,
        batch_size,
        learning_rate,
        seed: cfg.seed,
    };
    // Prerequisites are checked before the dataset is read.
    let start = Instant::now();
    let (report, ck, path) = match stage {
        STAGE_2D => {
            let data = load_dataset(cfg, false)?;
            let mut nhae = Nhae::new(NhaeConfig::for_shape(cfg.shape), cfg.seed)?;
            let report = train_stage_2d(&mut nhae, &data.volumes, &nhae_opts)?;
            (report, nhae.to_checkpoint(&[STAGE_2D])?, dir.join(NHAE_CKPT))
        }
        STAGE_3D | STAGE_HR => {
            let needs: &[&str] = if stage == STAGE_3D { &[STAGE_2D] } else { &[STAGE_2D, STAGE_3D] };
            let mut nhae = load_nhae(cfg, stage, needs)?;
            let data = load_dataset(cfg, false)?;
            let report = if stage == STAGE_3D {
                train_stage_3d(&mut nhae, &data.volumes, &nhae_opts)?
            } else {
                train_stage_hr(&mut nhae, &data.volumes, &nhae_opts)?
            };
            let mut done = needs.to_vec();
            done.push(stage);
            (report, nhae.to_checkpoint(&done)?, dir.join(NHAE_CKPT))
        }
        STAGE_DIFF3D | STAGE_DIFFSLICE => {
            let nhae = load_nhae(cfg, stage, &[STAGE_2D, STAGE_3D, STAGE_HR])?;
            let data = load_dataset(cfg, false)?;
            let c = cfg.shape.channels;
            let (config, (set, scale), file) = if stage == STAGE_DIFF3D {
                (DenoiserConfig::global(c), global_training_data(&nhae, &data.volumes, None, None)?, DIFF3D_CKPT)
            } else {
                (DenoiserConfig::slice(c), slice_training_data(&nhae, &data.volumes, None, None)?, DIFFSLICE_CKPT)
            };
            let mut model = DiffusionModel::new(config, cfg.seed)?;
            model.scale = scale;
            let report = model.train(&set, &cfg.schedule.build()?, &diff_opts)?;
            (report, model.to_checkpoint(stage, &shape_fingerprint(&nhae))?, dir.join(file))
        }
        _ => {
            let nhae = load_nhae(cfg, stage, &[STAGE_2D, STAGE_3D, STAGE_HR])?;
            let global = load_diffusion(&dir.join(DIFF3D_CKPT), stage, STAGE_DIFF3D, &nhae)?;
            let refiner = load_diffusion(&dir.join(DIFFSLICE_CKPT), stage, STAGE_DIFFSLICE, &nhae)?;
            let data = load_dataset(cfg, true)?;
            let labels = data.labels.as_deref().unwrap_or_default();
            let slice_opts = DiffusionTrainOptions {
                batch_size: cfg.batch_size.unwrap_or(16),
                seed: cfg.seed + 1,
                ..diff_opts.clone()
            };
            let (g, r, greport, rreport) = finetune_conditional(
                &nhae,
                &global,
                &refiner,
                &data.volumes,
                labels,
                cfg.label_channels,
                &cfg.schedule.build()?,
                &diff_opts,
                &slice_opts,
            )?;
            let fp = shape_fingerprint(&nhae);
            let mut gck = g.to_checkpoint(STAGE_DIFF3D, &fp)?;
            gck.add_stage(STAGE_CONDITIONAL);
            gck.save(&dir.join(DIFF3D_COND_CKPT))?;
            write(&dir.join(format!("{STAGE_CONDITIONAL}-global.loss.csv")), &loss_csv(&greport))?;
            let mut rck = r.to_checkpoint(STAGE_DIFFSLICE, &fp)?;
            rck.add_stage(STAGE_CONDITIONAL);
            (rreport, rck, dir.join(DIFFSLICE_COND_CKPT))
        }
    };
    ck.save(&path)?;
    let loss_path = dir.join(format!("{stage}.loss.csv"));
    write(&loss_path, &loss_csv(&report))?;
    let (head, tail) = report.head_tail(50);
    info!(
        "stage {stage}: {steps} steps in {:.1}s, loss {head:.4} -> {tail:.4}",
        start.elapsed().as_secs_f64()
    );
    println!("checkpoint={}", path.display());
    println!("fingerprint={}", ck.require("fingerprint")?);
    println!("losses={}", loss_path.display());
    match stage {
        STAGE_DIFF3D | STAGE_DIFFSLICE => write_manifest(cfg, BUNDLE_MANIFEST, DIFF3D_CKPT, DIFFSLICE_CKPT)?,
        STAGE_CONDITIONAL => write_manifest(cfg, CONDITIONAL_MANIFEST, DIFF3D_COND_CKPT, DIFFSLICE_COND_CKPT)?,
        _ => {}
    }
    Ok(())
}

fn load_bundle(cfg: &RunConfig) -> Result<CascadeBundle> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "bundle manifest {} does not exist; train the diffusion stages first",
            path.display()
        )));
    }
    let mut manifest = BundleManifest::load(&path)?;
    if manifest.shape != cfg.shape {
        warn!("using the manifest's shape {} over the configured one", manifest.shape.describe().replace('\n', " "));
    }
    manifest.schedule.ddim_steps = cfg.schedule.ddim_steps;
    CascadeBundle::load(&manifest)
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let label = cfg.label.as_deref().map(load_labels).transpose()?;
    let bundle = load_bundle(cfg)?;
    if bundle.is_conditional() && label.is_none() {
        return Err(Error::validation("this bundle is conditional; pass --label"));
    }
    let count = cfg.count.unwrap_or(1);
    create_dir(&cfg.out)?;
    let mut summary = String::from("index,seed,path,refine,wall_seconds,peak_bytes\n");
    println!("index seed wall_s peak_bytes path");
    for i in 0..count {
        let seed = cfg.seed + i as u64;
        let path = cfg.out.join(format!("sample_{i:04}.raw"));
        let start = Instant::now();
        let mut sink = RawFileSink::new(&path);
        let (r, peak) = measure_peak(|| synthesize_volume(&bundle, seed, label.as_ref(), cfg.refine, &mut sink));
        r?;
        let wall = start.elapsed().as_secs_f64();
        let peak = peak.map(|p| p.to_string()).unwrap_or_else(|| "na".into());
        println!("{i} {seed} {wall:.2} {peak} {}", path.display());
        summary.push_str(&format!("{i},{seed},{},{},{wall:.3},{peak}\n", path.display(), cfg.refine));
    }
    write(&cfg.out.join("samples.csv"), &summary)
}

fn load_dir(dir: &Path, role: &str) -> Result<Vec<Volume>> {
    if !dir.is_dir() {
        return Err(Error::validation(format!("{role} directory {} does not exist", dir.display())));
    }
    let mut out = Vec::new();
    for p in volume_paths(dir)? {
        match load_volume(&p, VolumeLayout::detect(&p)) {
            Ok(v) => out.push(v),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::validation(format!("{role} directory {} holds no volumes", dir.display())));
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let real_dir = cfg.real.clone().unwrap_or_else(|| cfg.dataset.clone());
    let syn_dir = cfg.syn.clone().unwrap_or_else(|| cfg.out.clone());
    let real = load_dir(&real_dir, "real")?;
    let syn = load_dir(&syn_dir, "synthetic")?;
    let reference = real[0].shape();
    let mut skipped = Vec::new();
    let keep = |set: Vec<Volume>, role: &str, skipped: &mut Vec<String>| -> Vec<Volume> {
        set.into_iter()
            .enumerate()
            .filter_map(|(i, v)| {
                if v.shape() == reference {
                    Some(v)
                } else {
                    warn!("skipping {role} volume {i}: shape {:?} differs from {reference:?}", v.shape());
                    skipped.push(format!("{role}#{i}"));
                    None
                }
            })
            .collect()
    };
    let real = keep(real, "real", &mut skipped);
    let syn = keep(syn, "synthetic", &mut skipped);
    if syn.is_empty() {
        return Err(Error::validation("no synthetic volume matches the real volumes' shape"));
    }
    let fx = RandomConvFeatures::new(RandomConvFeatures::DEFAULT_SEED)?;
    let intra = slice_fid(&real, &syn, FidAxis::Intra, &fx)?;
    let inter = slice_fid(&real, &syn, FidAxis::Inter, &fx)?;
    let report = MetricsReport {
        intra_fid: intra,
        inter_fid: inter,
        tv: syn.iter().map(total_variation).collect(),
        skipped,
    };
    create_dir(&cfg.out)?;
    write(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    let text = report.to_key_values();
    write(&cfg.out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn profile(cfg: &RunConfig) -> Result<()> {
    let task: Task = cfg.task.parse()?;
    let bundle;
    let nhae;
    let subject = if task == Task::FullSynthesis || cfg.manifest_path().exists() {
        bundle = load_bundle(cfg)?;
        ProfileSubject::Bundle(&bundle)
    } else {
        nhae = load_nhae(cfg, "profile", &[STAGE_2D, STAGE_3D])?;
        ProfileSubject::Nhae(&nhae)
    };
    let opts = ProfileOptions {
        memory_limit: cfg.memory_limit,
        ddim_steps: Some(cfg.schedule.ddim_steps),
        seed: cfg.seed,
    };
    let mut reports = Vec::new();
    for strategy in [Strategy::Holistic3d, Strategy::SliceWise] {
        for &depth in &cfg.ladder {
            let r = profile_peak_memory(&subject, task, strategy, depth, &opts)?;
            if let Some(f) = &r.failure {
                warn!("{strategy} at depth {depth}: {f}");
            }
            reports.push(r);
        }
    }
    let csv = reports_csv(&reports);
    create_dir(&cfg.out)?;
    write(&cfg.out.join("profile.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
