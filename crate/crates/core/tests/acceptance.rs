//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use caldm::data::{generate_phantom, LabelVolume, PhantomSpec, Volume};
use caldm::diffusion::{
    ddim_sample, gaussian, make_schedule, q_sample, Conditioning, DenoiserConfig, DiffusionModel, DiffusionTrainOptions,
    ScheduleConfig, ScheduleKind,
};
use caldm::error::Result;
use caldm::eval::memory::{
    dry_run_shapes, profile_peak_memory, CountingAllocator, MemoryReport, ProfileOptions, ProfileSubject, Strategy, Task,
};
use caldm::eval::{frechet_distance, psnr, slice_fid, total_variation, FidAxis, GaussianStats, RandomConvFeatures};
use caldm::nhae::{
    train_stage_2d, train_stage_3d, train_stage_hr, LatentSlice, MemorySink, Nhae, NhaeConfig, ShapeConfig,
    TrainOptions, UpsampledLatent,
};
use caldm::pipeline::{
    finetune_conditional, global_training_data, slice_training_data, synthesize_volume,
    CascadeBundle,
};

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

const TRAIN_COUNT: u64 = 20;
const HELD_OUT_SEED: u64 = 1000;
const REAL_SEED: u64 = 2000;
const NHAE_BUDGET: Duration = Duration::from_secs(30 * 60);
const MEMORY_BUDGET: Duration = Duration::from_secs(10 * 60);
const CONDITIONAL_BUDGET: Duration = Duration::from_secs(30 * 60);

type Check = Result<(bool, String)>;

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn phantoms(first: u64, count: u64) -> Result<(Vec<Volume>, Vec<LabelVolume>)> {
    let pairs: Vec<_> = (first..first + count)
        .map(|s| generate_phantom(&PhantomSpec::desk(s)))
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn random_slice(shape: &ShapeConfig, rng: &mut ChaCha8Rng) -> Result<LatentSlice> {
    LatentSlice::new(gaussian(&[shape.channels, shape.latent[1], shape.latent[2]], rng)?)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn adaptor_identity() -> Check {
    let shape = ShapeConfig::desk();
    let nhae = Nhae::new(NhaeConfig::for_shape(shape), 11)?;
    nhae.set_adaptor_alpha(0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..100 {
        let window: Vec<LatentSlice> = (0..shape.window).map(|_| random_slice(&shape, &mut rng)).collect::<Result<_>>()?;
        let multi = nhae.decode_multislice(&window)?;
        let plain = nhae.decode_slice_2d(&window[shape.window / 2])?;
        if multi.pixels.iter().zip(&plain.pixels).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/100 windows differ bitwise")))
}

fn locality() -> Check {
    let shape = ShapeConfig::desk();
    let nhae = Nhae::new(NhaeConfig::for_shape(shape), 13)?;
    nhae.set_adaptor_alpha(0.5)?;
    let [c, d, h, w] = [shape.channels, shape.image[0], shape.latent[1], shape.latent[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = gaussian(&[c, d, h, w], &mut rng)?;
    let decode = |z: &Tensor| -> Result<Volume> {
        let mut sink = MemorySink::new();
        nhae.decode_volume(&UpsampledLatent::new(z.clone())?, &mut sink)?;
        sink.into_volume()
    };
    let base = decode(&z)?;
    let half = shape.window / 2;
    let plane = shape.image[1] * shape.image[2];
    let mut outside_max = 0f32;
    let mut inside_changed = true;
    for j in [0, 1, d / 2, d - 1] {
        let bump = Tensor::zeros((c, d, h, w), DType::F32, &Device::Cpu)?
            .slice_assign(&[0..c, j..j + 1, 0..h, 0..w], &Tensor::ones((c, 1, h, w), DType::F32, &Device::Cpu)?)?;
        let out = decode(&(&z + bump)?)?;
        for i in 0..d {
            let diff = max_abs_diff(&base.data()[i * plane..(i + 1) * plane], &out.data()[i * plane..(i + 1) * plane]);
            if i.abs_diff(j) <= half {
                inside_changed &= diff > 0.0;
            } else {
                outside_max = outside_max.max(diff);
            }
        }
    }
    Ok((
        outside_max == 0.0 && inside_changed,
        format!("max |diff| outside the window {outside_max:e}; every slice inside changed: {inside_changed}"),
    ))
}

fn diffusion_algebra() -> Check {
    let sched = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    let n = 100_000;
    let x0_value = 0.7f64;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0f64;
    for t in [1, 250, 500, 750, 1000] {
        let x0 = Tensor::full(x0_value as f32, (n, 1), &Device::Cpu)?;
        let eps = gaussian(&[n, 1], &mut rng)?;
        let xt: Vec<f32> = q_sample(&x0, &vec![t; n], &eps, &sched)?.flatten_all()?.to_vec1()?;
        let mean = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Independent closed form from the betas.
        let ab: f64 = (1..=t).map(|s| 1.0 - (1e-4 + (s - 1) as f64 * (0.02 - 1e-4) / 999.0)).product();
        let (m_true, v_true) = (ab.sqrt() * x0_value, 1.0 - ab);
        let scale = (v_true + m_true * m_true).sqrt();
        worst = worst.max((mean - m_true).abs() / scale).max((var - v_true).abs() / v_true);
    }
    let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).product();
    let ab_err = (sched.alpha_bar(1000) - direct).abs();
    let model = DiffusionModel::new(DenoiserConfig::global(4), 16)?;
    let shape = [1, 4, 8, 8, 8];
    let a: Vec<f32> = ddim_sample(&model, &shape, &sched, 200, 17, &Conditioning::none())?.flatten_all()?.to_vec1()?;
    let b: Vec<f32> = ddim_sample(&model, &shape, &sched, 200, 17, &Conditioning::none())?.flatten_all()?.to_vec1()?;
    let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        worst <= 0.01 && ab_err <= 1e-10 && identical,
        format!("worst relative moment error {worst:.4}; |alpha_bar[1000] - product| {ab_err:e}; DDIM bit-identical: {identical}"),
    ))
}

fn metric_identities() -> Check {
    let constant = Volume::filled([16, 16, 16], 0.3)?;
    let tv_const = total_variation(&constant);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = Volume::new([16, 16, 16], data.clone())?;
    let mut homogeneity = 0f64;
    for a in [0.5f32, 0.25, 0.125] {
        let scaled = Volume::new([16, 16, 16], data.iter().map(|x| a * x).collect())?;
        homogeneity = homogeneity.max((total_variation(&scaled) - a as f64 * total_variation(&v)).abs());
    }
    let (real, _) = phantoms(REAL_SEED, 2)?;
    let fx = RandomConvFeatures::default();
    let self_fid = slice_fid(&real, &real, FidAxis::Intra, &fx)?.value.abs();
    let stats = |m: f64, var: f64| GaussianStats {
        mean: DVector::from_element(1, m),
        cov: DMatrix::from_element(1, 1, var),
    };
    let mut gauss_err = 0f64;
    for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 1.0), (0.3, 2.0, -0.5, 0.5), (1.5, 0.04, 1.5, 9.0)] {
        let (fid, _) = frechet_distance(&stats(m1, v1), &stats(m2, v2))?;
        let closed = (m1 - m2) * (m1 - m2) + (f64::sqrt(v1) - f64::sqrt(v2)).powi(2);
        gauss_err = gauss_err.max((fid - closed).abs());
    }
    Ok((
        tv_const == 0.0 && homogeneity <= 1e-9 && self_fid <= 1e-6 && gauss_err <= 1e-9,
        format!("TV(const) {tv_const}; homogeneity error {homogeneity:e}; FID(X,X) {self_fid:e}; 1-D closed-form error {gauss_err:e}"),
    ))
}

fn train_nhae(train: &[Volume]) -> Result<Nhae> {
    let mut nhae = Nhae::new(NhaeConfig::for_shape(ShapeConfig::desk()), 1)?;
    let opts = |steps, batch_size, seed| TrainOptions {
        steps,
        batch_size,
        learning_rate: 1e-3,
        kl_weight: 1e-6,
        seed,
    };
    let r = train_stage_2d(&mut nhae, train, &opts(800, 8, 21))?;
    progress(&format!("nhae-2d loss {:?}", r.head_tail(50)));
    let r = train_stage_3d(&mut nhae, train, &opts(400, 2, 22))?;
    progress(&format!("nhae-3d loss {:?}", r.head_tail(50)));
    let r = train_stage_hr(&mut nhae, train, &opts(400, 8, 23))?;
    progress(&format!("nhae-hr loss {:?}", r.head_tail(50)));
    Ok(nhae)
}

fn reconstruction(nhae: &Nhae, elapsed: Duration) -> Check {
    let (held, _) = phantoms(HELD_OUT_SEED, 3)?;
    let scores: Vec<f64> = held
        .iter()
        .map(|v| {
            let mut sink = MemorySink::new();
            nhae.reconstruct(v, &mut sink)?;
            psnr(v, &sink.into_volume()?)
        })
        .collect::<Result<_>>()?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        min >= 20.0 && elapsed <= NHAE_BUDGET,
        format!(
            "held-out PSNR {:?} dB (min {min:.2}); training took {:.1} min",
            scores.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
            elapsed.as_secs_f64() / 60.0
        ),
    ))
}

fn memory_trend(nhae: &Nhae) -> Check {
    let start = Instant::now();
    let subject = ProfileSubject::Nhae(nhae);
    let opts = ProfileOptions::default();
    let ladder = [32, 64, 128];
    let run = |strategy| -> Result<Vec<MemoryReport>> {
        ladder
            .iter()
            .map(|&d| profile_peak_memory(&subject, Task::Decode, strategy, d, &opts))
            .collect()
    };
    let holistic = run(Strategy::Holistic3d)?;
    let slice = run(Strategy::SliceWise)?;
    let act = |r: &[MemoryReport], i: usize| r[i].activation_bytes() as f64;
    let slice_ratio = act(&slice, 2) / act(&slice, 0);
    let holistic_ratio = act(&holistic, 2) / act(&holistic, 0);
    let measured = |r: &[MemoryReport]| -> Option<Vec<u64>> { r.iter().map(|x| x.measured_bytes).collect() };
    let (mh, ms) = (measured(&holistic), measured(&slice));
    let ordering = match (&mh, &ms) {
        (Some(h), Some(s)) => {
            let analytic_h: Vec<u64> = holistic.iter().map(|r| r.peak_bytes).collect();
            let analytic_s: Vec<u64> = slice.iter().map(|r| r.peak_bytes).collect();
            (0..3).all(|i| (h[i] > s[i]) == (analytic_h[i] > analytic_s[i]))
                && h.windows(2).all(|p| p[1] > p[0])
                && analytic_h.windows(2).all(|p| p[1] > p[0])
        }
        _ => false,
    };
    let failures = holistic.iter().chain(&slice).filter(|r| !r.ok()).count();
    let elapsed = start.elapsed();
    Ok((
        slice_ratio <= 1.25 && holistic_ratio >= 3.0 && ordering && failures == 0 && elapsed <= MEMORY_BUDGET,
        format!(
            "activation ratio D=128/D=32: slice-wise {slice_ratio:.3}, holistic {holistic_ratio:.2}; measured holistic {mh:?} B vs slice-wise {ms:?} B agree with analytic ordering: {ordering}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn diffusion_options(steps: usize, batch_size: usize, seed: u64) -> DiffusionTrainOptions {
    DiffusionTrainOptions {
        steps,
        batch_size,
        learning_rate: 1e-3,
        seed,
    }
}

fn train_bundle(nhae: Nhae, train: &[Volume]) -> Result<CascadeBundle> {
    let sched_cfg = ScheduleConfig::default();
    let sched = sched_cfg.build()?;
    let (data, scale) = global_training_data(&nhae, train, None, None)?;
    let mut global = DiffusionModel::new(DenoiserConfig::global(4), 31)?;
    global.scale = scale;
    let r = global.train(&data, &sched, &diffusion_options(1000, 4, 32))?;
    progress(&format!("diff3d loss {:?}", r.head_tail(50)));
    let (data, scale) = slice_training_data(&nhae, train, None, None)?;
    let mut refiner = DiffusionModel::new(DenoiserConfig::slice(4), 33)?;
    refiner.scale = scale;
    let r = refiner.train(&data, &sched, &diffusion_options(4000, 16, 34))?;
    progress(&format!("diffslice loss {:?}", r.head_tail(50)));
    CascadeBundle::new(nhae, global, refiner, sched_cfg)
}

fn synthesize(bundle: &CascadeBundle, seed: u64, label: Option<&LabelVolume>, refine: bool) -> Result<Volume> {
    let mut sink = MemorySink::new();
    synthesize_volume(bundle, seed, label, refine, &mut sink)?;
    sink.into_volume()
}

fn cascade_efficacy(bundle: &CascadeBundle) -> Check {
    let (real, _) = phantoms(REAL_SEED, 20)?;
    let fx = RandomConvFeatures::default();
    let mut refined = Vec::new();
    let mut plain = Vec::new();
    for seed in 0..3u64 {
        let mut sets = [Vec::new(), Vec::new()];
        for i in 0..4 {
            for (k, refine) in [false, true].into_iter().enumerate() {
                sets[k].push(synthesize(bundle, 100 * seed + i, None, refine)?);
            }
        }
        plain.push(slice_fid(&real, &sets[0], FidAxis::Intra, &fx)?.value);
        refined.push(slice_fid(&real, &sets[1], FidAxis::Intra, &fx)?.value);
        progress(&format!("seed {seed}: Intra-FID unrefined {:.3}, refined {:.3}", plain[seed as usize], refined[seed as usize]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, r) = (mean(&plain), mean(&refined));
    Ok((r < p, format!("mean proxy Intra-FID over 3 seeds: refined {r:.3} vs unrefined {p:.3}")))
}

fn shape_fidelity(bundle: &CascadeBundle) -> Check {
    let v = synthesize(bundle, 7, None, true)?;
    let in_range = v.data().iter().all(|x| (-1.0..=1.0).contains(x));
    let dry = dry_run_shapes(&ShapeConfig::full())?;
    let expect: [(&str, &[usize]); 3] = [("latent", &[4, 64, 64, 64]), ("z_sr", &[4, 512, 64, 64]), ("image_slice", &[512, 512])];
    let dry_ok = expect.iter().all(|(name, dims)| dry.shape(name) == Some(*dims));
    Ok((
        v.shape() == [64, 64, 64] && in_range && dry_ok,
        format!(
            "desk volume {:?}, all voxels in [-1,1]: {in_range}; full-scale dry run latent {:?}, z_sr {:?}, slice {:?}",
            v.shape(),
            dry.shape("latent"),
            dry.shape("z_sr"),
            dry.shape("image_slice")
        ),
    ))
}

fn conditional_sanity(bundle: &CascadeBundle, train: &[Volume], labels: &[LabelVolume]) -> Check {
    let start = Instant::now();
    let sched = bundle.schedule_config().build()?;
    let (global, refiner, g, r) = finetune_conditional(
        bundle.nhae(),
        bundle.global(),
        bundle.refiner(),
        train,
        labels,
        4,
        &sched,
        &diffusion_options(400, 4, 41),
        &diffusion_options(400, 16, 42),
    )?;
    progress(&format!("conditional loss global {:?}, refiner {:?}", g.head_tail(50), r.head_tail(50)));
    let nhae = Nhae::from_params(bundle.nhae().config().clone(), copy(bundle.nhae())?)?;
    let conditional = CascadeBundle::new(nhae, global, refiner, *bundle.schedule_config())?;
    let (_, held_labels) = phantoms(HELD_OUT_SEED, 10)?;
    let vessel = PhantomSpec::desk(0).vessel_class();
    let mut gaps = Vec::new();
    for (i, label) in held_labels.iter().enumerate() {
        let v = synthesize(&conditional, 500 + i as u64, Some(label), true)?;
        let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
        for (x, &l) in v.data().iter().zip(label.labels()) {
            let acc = if l == vessel { &mut inside } else { &mut outside };
            acc.0 += *x as f64;
            acc.1 += 1;
        }
        gaps.push(inside.0 / inside.1.max(1) as f64 - outside.0 / outside.1.max(1) as f64);
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let elapsed = start.elapsed();
    Ok((
        gap >= 0.1 && elapsed <= CONDITIONAL_BUDGET,
        format!(
            "mean vessel minus background intensity {gap:.3} over 10 samples; fine-tuning and sampling took {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    ))
}

fn copy(nhae: &Nhae) -> Result<caldm::nn::ParamStore> {
    let mut p = caldm::nn::ParamStore::new(0);
    p.copy_prefix(nhae.params(), "", "")?;
    Ok(p)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u8, &str, Check)> = Vec::new();
    let mut run = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Check| {
        progress(&format!("criterion {id} ({name}) ..."));
        let r = f();
        match &r {
            Ok((pass, detail)) => progress(&format!("criterion {id}: {} {detail}", if *pass { "pass" } else { "fail" })),
            Err(e) => progress(&format!("criterion {id}: error {e}")),
        }
        results.push((id, name, r));
    };
    run(2, "adaptor identity", &mut adaptor_identity);
    run(3, "locality", &mut locality);
    run(4, "diffusion algebra", &mut diffusion_algebra);
    run(8, "metric identities", &mut metric_identities);

    let trained = phantoms(0, TRAIN_COUNT).and_then(|(train, labels)| {
        let t = Instant::now();
        let nhae = train_nhae(&train)?;
        Ok((train, labels, nhae, t.elapsed()))
    });
    match trained {
        Ok((train, labels, nhae, elapsed)) => {
            run(5, "NHAE training efficacy", &mut || reconstruction(&nhae, elapsed));
            run(7, "memory trend", &mut || memory_trend(&nhae));
            match train_bundle(nhae, &train) {
                Ok(bundle) => {
                    run(6, "cascade efficacy", &mut || cascade_efficacy(&bundle));
                    run(1, "shape fidelity", &mut || shape_fidelity(&bundle));
                    run(9, "conditional synthesis", &mut || conditional_sanity(&bundle, &train, &labels));
                }
                Err(e) => {
                    for (id, name) in [(6, "cascade efficacy"), (1, "shape fidelity"), (9, "conditional synthesis")] {
                        results_error(&mut run, id, name, &e);
                    }
                }
            }
        }
        Err(e) => {
            for (id, name) in [
                (5, "NHAE training efficacy"),
                (7, "memory trend"),
                (6, "cascade efficacy"),
                (1, "shape fidelity"),
                (9, "conditional synthesis"),
            ] {
                results_error(&mut run, id, name, &e);
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!(
        "{} of {} criteria passed in {:.1} min",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn results_error(
    run: &mut impl FnMut(u8, &'static str, &mut dyn FnMut() -> Check),
    id: u8,
    name: &'static str,
    e: &caldm::error::Error,
) {
    let msg = format!("prerequisite training failed: {e}");
    run(id, name, &mut || Err(caldm::error::Error::Compute(msg.clone())));
}
