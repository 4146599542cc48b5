//! Peak-memory accounting for decoding and synthesis.
//!
//! Two views of the same quantity. The analytic [`Ledger`] replays each
//! network's layer sequence on shapes alone and tracks the bytes of live
//! tensors under a simple liveness model (a tensor lives from the op that
//! produces it to its last use; conv scratch is transient). The
//! [`CountingAllocator`], when installed as the global allocator, records the
//! real high-water mark of a task.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{gaussian, DenoiserConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::nhae::{NhaeConfig, NullSink, ShapeConfig, UpsampledLatent};
use crate::nn::{Builder, Conv, GroupNorm, ParamStore, Rank, ResBlock};
use crate::ops::{conv_workspace, upsample_nearest, ConvGeometry};
use crate::pipeline::{self, CascadeBundle};

const F32: u64 = 4;
/// Windows decoded per pass in the profiled slice-wise decode.
const PROFILE_DECODE_BATCH: usize = 1;
/// Matches the pipeline's batch sizes.
const SYNTH_DECODE_BATCH: usize = 8;
const REFINE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Decode,
    FullSynthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// A 3D decoder over the whole latent volume at once.
    Holistic3d,
    /// The multi-slice decoder streamed one window at a time.
    SliceWise,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Decode => "decode",
            Task::FullSynthesis => "full-synthesis",
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Holistic3d => "holistic-3d-decode",
            Strategy::SliceWise => "slice-wise-decode",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decode" => Ok(Task::Decode),
            "full-synthesis" => Ok(Task::FullSynthesis),
            _ => Err(Error::Config(format!("unknown profiling task `{s}`"))),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holistic-3d-decode" => Ok(Strategy::Holistic3d),
            "slice-wise-decode" => Ok(Strategy::SliceWise),
            _ => Err(Error::Config(format!("unknown decoding strategy `{s}`"))),
        }
    }
}

/// Tracks live bytes, the overall peak, per-stage peaks and named shapes.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    live: u64,
    peak: u64,
    stages: Vec<(String, u64)>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts attributing peaks to `name`; its peak starts at the bytes already live.
    pub fn stage(&mut self, name: &str) {
        self.stages.push((name.to_string(), self.live));
    }

    pub fn alloc(&mut self, bytes: u64) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
        if let Some((_, p)) = self.stages.last_mut() {
            *p = (*p).max(self.live);
        }
    }

    pub fn free(&mut self, bytes: u64) {
        self.live = self.live.checked_sub(bytes).expect("ledger frees more than it allocated");
    }

    fn transient(&mut self, bytes: u64) {
        self.alloc(bytes);
        self.free(bytes);
    }

    fn tensor(&mut self, dims: &[usize]) -> Shape {
        let s = Shape(dims.to_vec());
        self.alloc(s.bytes());
        s
    }

    fn release(&mut self, s: &Shape) {
        self.free(s.bytes());
    }

    pub fn record(&mut self, name: &str, dims: &[usize]) {
        self.shapes.push((name.to_string(), dims.to_vec()));
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn stages(&self) -> &[(String, u64)] {
        &self.stages
    }

    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }
}

/// A 5-D activation shape `(N, C, D, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Shape(Vec<usize>);

impl Shape {
    fn bytes(&self) -> u64 {
        self.0.iter().product::<usize>() as u64 * F32
    }

    fn with_channels(&self, c: usize) -> Vec<usize> {
        let mut d = self.0.clone();
        d[1] = c;
        d
    }

    fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }
}

/// Shape-only replay of the layer primitives.
struct Walker<'a> {
    l: &'a mut Ledger,
    rank: Rank,
}

impl Walker<'_> {
    fn conv_geo(&mut self, x: &Shape, cout: usize, geo: ConvGeometry) -> Result<Shape> {
        let o = geo.output_dims(x.spatial())?;
        self.l
            .transient(conv_workspace(x.0[0], x.0[1], cout, geo.kernel, o) as u64 * F32);
        Ok(self.l.tensor(&[x.0[0], cout, o[0], o[1], o[2]]))
    }

    fn conv(&mut self, x: &Shape, cout: usize) -> Result<Shape> {
        let geo = ConvGeometry {
            kernel: self.rank.kernel(3),
            stride: [1; 3],
            padding: self.rank.same_padding(3),
        };
        self.conv_geo(x, cout, geo)
    }

    fn norm(&mut self, x: &Shape) -> Shape {
        self.l.tensor(&x.0)
    }

    /// Pre-activation residual block; `x` stays owned by the caller.
    fn resblock(&mut self, x: &Shape, cout: usize) -> Result<Shape> {
        let a = self.norm(x);
        let b = self.conv(&a, cout)?;
        self.l.release(&a);
        let c = self.norm(&b);
        self.l.release(&b);
        let d = self.conv(&c, cout)?;
        self.l.release(&c);
        let skip = if x.0[1] != cout {
            let geo = ConvGeometry {
                kernel: [1; 3],
                stride: [1; 3],
                padding: [0; 3],
            };
            Some(self.conv_geo(x, cout, geo)?)
        } else {
            None
        };
        let out = self.l.tensor(&d.0);
        self.l.release(&d);
        if let Some(s) = skip {
            self.l.release(&s);
        }
        Ok(out)
    }

    /// Nearest upsampling followed by a conv; frees `x`.
    fn up(&mut self, x: Shape, factors: [usize; 3], cout: usize) -> Result<Shape> {
        let s = x.spatial();
        let u = self.l.tensor(&[x.0[0], x.0[1], s[0] * factors[0], s[1] * factors[1], s[2] * factors[2]]);
        self.l.release(&x);
        let out = self.conv(&u, cout)?;
        self.l.release(&u);
        Ok(out)
    }

    /// Replaces `x` by `f(x)`, freeing the input afterwards.
    fn step(&mut self, x: Shape, f: impl FnOnce(&mut Self, &Shape) -> Result<Shape>) -> Result<Shape> {
        let y = f(self, &x)?;
        self.l.release(&x);
        Ok(y)
    }

    fn head(&mut self, x: Shape, cout: usize) -> Result<Shape> {
        let n = self.step(x, |w, x| Ok(w.norm(x)))?;
        self.step(n, |w, x| w.conv(x, cout))
    }

    /// Window-mixing adaptor on `(B·k, C, 1, H, W)`.
    fn adaptor(&mut self, h: Shape, k: usize, kernel: [usize; 3]) -> Result<Shape> {
        let [_, hh, ww] = h.spatial();
        let (n, c) = (h.0[0], h.0[1]);
        let stack = self.l.tensor(&[n / k, c, k, hh, ww]);
        let ns = self.norm(&stack);
        let geo = ConvGeometry {
            kernel,
            stride: [1; 3],
            padding: kernel.map(|v| v / 2),
        };
        let r = self.conv_geo(&ns, c, geo)?;
        self.l.release(&ns);
        let back = self.l.tensor(&h.0);
        self.l.release(&r);
        let scaled = self.l.tensor(&h.0);
        self.l.release(&back);
        let out = self.l.tensor(&h.0);
        self.l.release(&scaled);
        self.l.release(&stack);
        self.l.release(&h);
        Ok(out)
    }
}

/// Multi-slice decoder on `windows` windows of `k` slices.
fn walk_slice_decoder(l: &mut Ledger, cfg: &NhaeConfig, windows: usize) -> Result<()> {
    let s = cfg.shape;
    let k = s.window;
    let z = l.tensor(&[windows * k, s.channels, 1, s.latent[1], s.latent[2]]);
    l.record("window", &[k, s.channels, s.latent[1], s.latent[2]]);
    let mut w = Walker { l, rank: Rank::Two };
    let mut h = w.step(z, |w, z| w.conv(z, cfg.dec[0]))?;
    for (i, &width) in cfg.dec.iter().enumerate() {
        h = w.step(h, |w, h| w.resblock(h, width))?;
        h = w.adaptor(h, k, cfg.adaptor_kernel)?;
        if let Some(&next) = cfg.dec.get(i + 1) {
            h = w.up(h, [1, 2, 2], next)?;
        }
    }
    let centre = w.l.tensor(&[windows, h.0[1], 1, h.0[3], h.0[4]]);
    w.l.release(&h);
    let out = w.head(centre, 1)?;
    w.l.record("image_slice", &[out.0[3], out.0[4]]);
    w.l.release(&out);
    Ok(())
}

/// Per-level `(depth, 2, 2)` upsampling factors of the holistic decoder.
pub fn holistic_factors(shape: &ShapeConfig) -> Vec<[usize; 3]> {
    let levels = shape.levels();
    let mut depth = vec![1usize; levels];
    for (i, f) in shape.depth_stages().into_iter().rev().enumerate() {
        depth[i.min(levels.saturating_sub(1))] *= f;
    }
    depth.into_iter().map(|d| [d, 2, 2]).collect()
}

/// Holistic 3D decoder over the full latent volume.
fn walk_holistic_decoder(l: &mut Ledger, cfg: &NhaeConfig) -> Result<()> {
    let s = cfg.shape;
    let z = l.tensor(&[1, s.channels, s.latent[0], s.latent[1], s.latent[2]]);
    let factors = holistic_factors(&s);
    let mut w = Walker { l, rank: Rank::Three };
    let mut h = w.step(z, |w, z| w.conv(z, cfg.dec[0]))?;
    for (i, &width) in cfg.dec.iter().enumerate() {
        h = w.step(h, |w, h| w.resblock(h, width))?;
        if let Some(&next) = cfg.dec.get(i + 1) {
            h = w.up(h, factors[i], next)?;
        }
    }
    let out = w.head(h, 1)?;
    w.l.record("holistic_volume", &out.0[2..]);
    w.l.release(&out);
    Ok(())
}

fn walk_encoder3d(l: &mut Ledger, cfg: &NhaeConfig) -> Result<()> {
    let t = cfg.shape.thumbnail();
    l.record("thumbnail", &t);
    let x = l.tensor(&[1, 1, t[0], t[1], t[2]]);
    let mut w = Walker { l, rank: Rank::Three };
    let mut h = w.step(x, |w, x| w.conv(x, cfg.enc3d[0]))?;
    for (i, &width) in cfg.enc3d.iter().enumerate() {
        h = w.step(h, |w, h| w.resblock(h, width))?;
        if let Some(&next) = cfg.enc3d.get(i + 1) {
            let geo = ConvGeometry {
                kernel: [3; 3],
                stride: [2; 3],
                padding: [1; 3],
            };
            h = w.step(h, |w, h| w.conv_geo(h, next, geo))?;
        }
    }
    let out = w.head(h, 2 * cfg.shape.channels)?;
    w.l.record("latent", &out.with_channels(cfg.shape.channels)[1..]);
    w.l.release(&out);
    Ok(())
}

/// Uniaxial super-resolution; leaves the `(c, D, H', W')` result live.
fn walk_superres(l: &mut Ledger, cfg: &NhaeConfig) -> Result<Shape> {
    let s = cfg.shape;
    let z = l.tensor(&[1, s.channels, s.latent[0], s.latent[1], s.latent[2]]);
    let mut w = Walker { l, rank: Rank::Three };
    let h = w.conv(&z, cfg.fsr[0])?;
    let mut h = w.step(h, |w, h| w.resblock(h, cfg.fsr[0]))?;
    for (j, f) in s.depth_stages().into_iter().enumerate() {
        h = w.up(h, [f, 1, 1], cfg.fsr[j + 1])?;
        h = w.step(h, |w, h| w.resblock(h, cfg.fsr[j + 1]))?;
    }
    let residual = w.head(h, s.channels)?;
    let base = w.l.tensor(&residual.0);
    let out = w.l.tensor(&residual.0);
    w.l.release(&base);
    w.l.release(&residual);
    w.l.release(&z);
    w.l.record("z_sr", &out.0[1..]);
    Ok(out)
}

/// One denoiser evaluation on a batch shaped like `x` (`(N, C_in, ...)`).
fn walk_unet(l: &mut Ledger, cfg: &DenoiserConfig, x: &[usize]) -> Result<()> {
    let input = l.tensor(x);
    let mut w = Walker { l, rank: cfg.rank };
    let mut h = w.step(input, |w, x| w.conv(x, cfg.widths[0]))?;
    let mut skips = Vec::new();
    let levels = cfg.widths.len();
    for (i, &width) in cfg.widths.iter().enumerate() {
        h = w.step(h, |w, h| w.resblock(h, width))?;
        // The skip shares the block output's storage.
        skips.push(h.clone());
        if i + 1 < levels {
            let geo = ConvGeometry {
                kernel: cfg.rank.kernel(3),
                stride: cfg.rank.factor(2),
                padding: cfg.rank.same_padding(3),
            };
            h = w.conv_geo(&h, width, geo)?;
        }
    }
    h = w.resblock(&h, cfg.widths[levels - 1])?;
    for i in (0..levels).rev() {
        let skip = skips.pop().expect("one skip per level");
        let cat = w.l.tensor(&h.with_channels(h.0[1] + skip.0[1]));
        w.l.release(&h);
        w.l.release(&skip);
        h = w.step(cat, |w, c| w.resblock(c, cfg.widths[i]))?;
        if i > 0 {
            h = w.up(h, cfg.rank.factor(2), cfg.widths[i - 1])?;
        }
    }
    let out = w.head(h, cfg.channels)?;
    w.l.release(&out);
    Ok(())
}

/// Parameter bytes of a freshly built network.
fn param_bytes(build: impl FnOnce(&mut ParamStore) -> Result<()>) -> Result<u64> {
    let mut store = ParamStore::new(0);
    build(&mut store)?;
    Ok(store.element_count("") as u64 * F32)
}

fn nhae_param_bytes(cfg: &NhaeConfig, prefixes: &[&str]) -> Result<u64> {
    let model = crate::nhae::Nhae::new(cfg.clone(), 0)?;
    Ok(prefixes.iter().map(|p| model.params().element_count(p) as u64).sum::<u64>() * F32)
}

/// Shape-only replay of thumbnail encoding, super-resolution and slice
/// decoding: the named shapes of every stage of the pipeline, without weights.
pub fn dry_run_shapes(shape: &ShapeConfig) -> Result<Ledger> {
    shape.validate()?;
    let cfg = NhaeConfig::for_shape(*shape);
    let mut l = Ledger::new();
    walk_encoder3d(&mut l, &cfg)?;
    let zsr = walk_superres(&mut l, &cfg)?;
    l.record("latent_slice", &[shape.channels, shape.latent[1], shape.latent[2]]);
    walk_slice_decoder(&mut l, &cfg, 1)?;
    l.release(&zsr);
    l.record("volume", &shape.image);
    Ok(l)
}

/// The same geometry with depth `depth`, keeping `D/D'` fixed.
pub fn shape_at_depth(shape: &ShapeConfig, depth: usize) -> Result<ShapeConfig> {
    let f = shape.depth_factor();
    if depth == 0 || depth % f != 0 {
        return Err(Error::validation(format!(
            "depth {depth} is not a multiple of the depth factor {f}"
        )));
    }
    let s = ShapeConfig {
        image: [depth, shape.image[1], shape.image[2]],
        latent: [depth / f, shape.latent[1], shape.latent[2]],
        ..*shape
    };
    s.validate()?;
    Ok(s)
}

/// One row of the profiler's output.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub task: Task,
    pub strategy: Strategy,
    pub resolution: [usize; 3],
    /// Analytic peak: parameters, latents and live activations, sink excluded.
    pub peak_bytes: u64,
    /// Parameters alone.
    pub parameter_bytes: u64,
    /// Analytic peak within each stage.
    pub breakdown: Vec<(String, u64)>,
    /// Allocator high-water mark above the pre-task baseline, when measured.
    pub measured_bytes: Option<u64>,
    /// Set when the task could not run (e.g. over the memory budget).
    pub failure: Option<String>,
}

impl MemoryReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Peak of the activations and latents alone.
    pub fn activation_bytes(&self) -> u64 {
        self.peak_bytes - self.parameter_bytes
    }
}

/// Denoiser configurations used for full-synthesis accounting.
#[derive(Debug, Clone)]
pub struct SynthesisModels {
    pub global: DenoiserConfig,
    pub refiner: DenoiserConfig,
}

impl SynthesisModels {
    pub fn defaults(channels: usize) -> Self {
        Self {
            global: DenoiserConfig::global(channels),
            refiner: DenoiserConfig::slice(channels),
        }
    }
}

/// Analytic peak memory of `task` under `strategy` for `shape`.
pub fn analytic_profile(cfg: &NhaeConfig, task: Task, strategy: Strategy, models: &SynthesisModels) -> Result<MemoryReport> {
    cfg.validate()?;
    let s = cfg.shape;
    let mut l = Ledger::new();
    let holistic_params = || {
        param_bytes(|store| {
            HolisticDecoder::new(&mut Builder::new(store, "h"), cfg)?;
            Ok(())
        })
    };
    let dec_params = || nhae_param_bytes(cfg, &["dec.", "adapt."]);
    let denoiser_params = |d: &DenoiserConfig| -> Result<u64> {
        Ok(DiffusionModel::new(d.clone(), 0)?.params().element_count("") as u64 * F32)
    };
    let params = match (task, strategy) {
        (Task::Decode, Strategy::SliceWise) => dec_params()?,
        (Task::Decode, Strategy::Holistic3d) => holistic_params()?,
        (Task::FullSynthesis, Strategy::SliceWise) => {
            nhae_param_bytes(cfg, &["dec.", "adapt.", "fsr."])?
                + denoiser_params(&models.global)?
                + denoiser_params(&models.refiner)?
        }
        (Task::FullSynthesis, Strategy::Holistic3d) => holistic_params()? + denoiser_params(&models.global)?,
    };
    l.stage("parameters");
    l.alloc(params);
    let latent = [1, s.channels, s.latent[0], s.latent[1], s.latent[2]];
    match (task, strategy) {
        (Task::Decode, Strategy::SliceWise) => {
            l.stage("decode");
            let zsr = l.tensor(&[s.channels, s.image[0], s.latent[1], s.latent[2]]);
            walk_slice_decoder(&mut l, cfg, PROFILE_DECODE_BATCH)?;
            l.release(&zsr);
        }
        (Task::Decode, Strategy::Holistic3d) => {
            l.stage("decode");
            walk_holistic_decoder(&mut l, cfg)?;
        }
        (Task::FullSynthesis, strategy) => {
            l.stage("global diffusion");
            let x = l.tensor(&latent);
            walk_unet(&mut l, &models.global, &{
                let mut d = latent.to_vec();
                d[1] = models.global.input_channels();
                d
            })?;
            l.release(&x);
            if strategy == Strategy::Holistic3d {
                l.stage("decode");
                walk_holistic_decoder(&mut l, cfg)?;
            } else {
                l.stage("uniaxial super-resolution");
                let zsr = walk_superres(&mut l, cfg)?;
                l.stage("slice refinement");
                let refined = l.tensor(&zsr.0);
                let batch = REFINE_BATCH.min(s.image[0]);
                walk_unet(
                    &mut l,
                    &models.refiner,
                    &[batch, models.refiner.input_channels(), 1, s.latent[1], s.latent[2]],
                )?;
                l.release(&zsr);
                l.stage("decode");
                walk_slice_decoder(&mut l, cfg, SYNTH_DECODE_BATCH.min(s.image[0]))?;
                l.release(&refined);
            }
        }
    }
    Ok(MemoryReport {
        task,
        strategy,
        resolution: s.image,
        peak_bytes: l.peak(),
        parameter_bytes: params,
        breakdown: l.stages().to_vec(),
        measured_bytes: None,
        failure: None,
    })
}

/// 3D counterpart of the slice decoder that decodes the whole latent volume in one pass.
#[derive(Debug, Clone)]
pub struct HolisticDecoder {
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    factors: Vec<[usize; 3]>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl HolisticDecoder {
    pub fn new(b: &mut Builder, cfg: &NhaeConfig) -> Result<Self> {
        let w = &cfg.dec;
        let r = Rank::Three;
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for l in 0..w.len() {
            blocks.push(ResBlock::new(&mut b.sub(format!("res{l}")), r, w[l], w[l], None)?);
            if l + 1 < w.len() {
                ups.push(Conv::same(&mut b.sub(format!("up{l}")), r, w[l], w[l + 1], 3)?);
            }
        }
        let last = *w.last().expect("validated widths");
        Ok(Self {
            conv_in: Conv::same(&mut b.sub("conv_in"), r, cfg.shape.channels, w[0], 3)?,
            blocks,
            ups,
            factors: holistic_factors(&cfg.shape),
            norm_out: GroupNorm::new(&mut b.sub("norm_out"), last)?,
            conv_out: Conv::same(&mut b.sub("conv_out"), r, last, 1, 3)?,
        })
    }

    /// `(N, c, D', H', W')` to `(N, 1, D, H, W)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, None)?;
            if let Some(up) = self.ups.get(l) {
                h = up.forward(&upsample_nearest(&h, self.factors[l])?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward_silu(&h)?)?.tanh()?)
    }
}

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator wrapper that tracks live and peak bytes. Install with
/// `#[global_allocator]` in a binary to enable measured profiles.
pub struct CountingAllocator;

// SAFETY: every call forwards to `System` unchanged; only counters are added.
unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether a [`CountingAllocator`] is installed in this process.
pub fn allocator_active() -> bool {
    CURRENT.load(Ordering::Relaxed) > 0
}

/// Runs `f` and returns its result with the high-water mark of bytes
/// allocated above the level at entry (`None` without the counting allocator).
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<u64>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = f();
    let peak = PEAK.load(Ordering::Relaxed);
    (r, allocator_active().then(|| peak.saturating_sub(base) as u64))
}

/// Trained models available to measured profiles.
pub enum ProfileSubject<'a> {
    /// Only the autoencoder: supports the decode task.
    Nhae(&'a crate::nhae::Nhae),
    /// The whole cascade: supports both tasks.
    Bundle(&'a CascadeBundle),
}

impl ProfileSubject<'_> {
    fn nhae(&self) -> &crate::nhae::Nhae {
        match self {
            ProfileSubject::Nhae(n) => n,
            ProfileSubject::Bundle(b) => b.nhae(),
        }
    }
}

/// Options for [`profile_peak_memory`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ProfileOptions {
    /// Tasks whose analytic peak exceeds this are recorded as failures and not run.
    pub memory_limit: Option<u64>,
    /// DDIM steps for full synthesis (memory does not depend on it).
    pub ddim_steps: Option<usize>,
    pub seed: u64,
}

fn random_latent(shape: &[usize], seed: u64) -> Result<Tensor> {
    gaussian(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Analytic accounting plus, when the counting allocator is installed, a
/// measured run of `task` at image depth `depth` (slice resolution fixed).
pub fn profile_peak_memory(
    subject: &ProfileSubject,
    task: Task,
    strategy: Strategy,
    depth: usize,
    opts: &ProfileOptions,
) -> Result<MemoryReport> {
    let base = subject.nhae();
    let shape = shape_at_depth(base.shape(), depth)?;
    let cfg = NhaeConfig {
        shape,
        ..base.config().clone()
    };
    let models = match subject {
        ProfileSubject::Bundle(b) => SynthesisModels {
            global: b.global().config().clone(),
            refiner: b.refiner().config().clone(),
        },
        ProfileSubject::Nhae(_) => SynthesisModels::defaults(shape.channels),
    };
    let mut report = analytic_profile(&cfg, task, strategy, &models)?;
    if let Some(limit) = opts.memory_limit {
        if report.peak_bytes > limit {
            report.failure = Some(format!(
                "out of memory: analytic peak {} B exceeds the {limit} B budget",
                report.peak_bytes
            ));
            return Ok(report);
        }
    }
    let c = shape.channels;
    let outcome: Result<Option<u64>> = (|| match (task, strategy, subject) {
        (Task::Decode, Strategy::SliceWise, _) => {
            let mut params = ParamStore::new(0);
            params.copy_prefix(base.params(), "", "")?;
            let nhae = crate::nhae::Nhae::from_params(cfg.clone(), params)?;
            let z = UpsampledLatent::new(random_latent(&[c, depth, shape.latent[1], shape.latent[2]], opts.seed)?)?;
            let (r, m) = measure_peak(|| nhae.decode_volume_batched(&z, &mut NullSink::default(), PROFILE_DECODE_BATCH));
            r.map(|_| m)
        }
        (Task::Decode, Strategy::Holistic3d, _) => {
            let mut store = ParamStore::new(opts.seed);
            let dec = HolisticDecoder::new(&mut Builder::frozen(&mut store, "h"), &cfg)?;
            let z = random_latent(&[1, c, shape.latent[0], shape.latent[1], shape.latent[2]], opts.seed)?;
            let (r, m) = measure_peak(|| dec.forward(&z).map(|_| ()));
            r.map(|_| m)
        }
        (Task::FullSynthesis, strategy, ProfileSubject::Bundle(b)) => {
            let bundle = b.resized(depth, opts.ddim_steps)?;
            if strategy == Strategy::SliceWise {
                let (r, m) = measure_peak(|| {
                    pipeline::synthesize_volume(&bundle, opts.seed, None, true, &mut NullSink::default())
                });
                r.map(|_| m)
            } else {
                let mut store = ParamStore::new(opts.seed);
                let dec = HolisticDecoder::new(&mut Builder::frozen(&mut store, "h"), &cfg)?;
                let (r, m) = measure_peak(|| -> Result<()> {
                    let z = pipeline::synthesize_global_latent(&bundle, opts.seed, None)?;
                    dec.forward(&z.tensor().unsqueeze(0)?)?;
                    Ok(())
                });
                r.map(|_| m)
            }
        }
        (Task::FullSynthesis, _, ProfileSubject::Nhae(_)) => Ok(None),
    })();
    match outcome {
        Ok(m) => report.measured_bytes = m,
        Err(e) => report.failure = Some(e.to_string()),
    }
    Ok(report)
}

/// One CSV row per report.
pub fn reports_csv(reports: &[MemoryReport]) -> String {
    let mut out = String::from(
        "task,strategy,depth,height,width,analytic_peak_bytes,parameter_bytes,activation_bytes,measured_peak_bytes,status,breakdown\n",
    );
    for r in reports {
        let breakdown: Vec<String> = r.breakdown.iter().map(|(n, b)| format!("{n}={b}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.strategy,
            r.resolution[0],
            r.resolution[1],
            r.resolution[2],
            r.peak_bytes,
            r.parameter_bytes,
            r.activation_bytes(),
            r.measured_bytes.map(|m| m.to_string()).unwrap_or_default(),
            match &r.failure {
                None => "ok".to_string(),
                Some(f) => format!("failed: {}", f.replace(',', ";")),
            },
            breakdown.join(";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_geometry_dry_run() {
        let l = dry_run_shapes(&ShapeConfig::full()).unwrap();
        assert_eq!(l.shape("latent").unwrap(), &[4, 64, 64, 64]);
        assert_eq!(l.shape("z_sr").unwrap(), &[4, 512, 64, 64]);
        assert_eq!(l.shape("image_slice").unwrap(), &[512, 512]);
        assert_eq!(l.shape("volume").unwrap(), &[512, 512, 512]);
        assert_eq!(l.live(), 0);
    }

    #[test]
    fn peak_bounds_every_stage() {
        let cfg = NhaeConfig::for_shape(ShapeConfig::desk());
        for task in [Task::Decode, Task::FullSynthesis] {
            for strategy in [Strategy::SliceWise, Strategy::Holistic3d] {
                let r = analytic_profile(&cfg, task, strategy, &SynthesisModels::defaults(4)).unwrap();
                assert!(r.breakdown.iter().all(|(_, b)| *b <= r.peak_bytes));
                assert!(r.peak_bytes > r.parameter_bytes);
            }
        }
    }

    #[test]
    fn holistic_peak_is_monotone_and_slice_wise_flat() {
        let base = ShapeConfig::desk();
        let models = SynthesisModels::defaults(4);
        let peaks = |strategy| -> Vec<u64> {
            [32, 64, 128]
                .iter()
                .map(|&d| {
                    let cfg = NhaeConfig::for_shape(shape_at_depth(&base, d).unwrap());
                    analytic_profile(&cfg, Task::Decode, strategy, &models).unwrap().activation_bytes()
                })
                .collect()
        };
        let h = peaks(Strategy::Holistic3d);
        assert!(h.windows(2).all(|w| w[1] > w[0]), "{h:?}");
        let s = peaks(Strategy::SliceWise);
        assert!(s[2] as f64 <= 1.25 * s[0] as f64, "{s:?}");
    }

    #[test]
    fn holistic_factors_cover_the_depth_factor() {
        for shape in [ShapeConfig::desk(), ShapeConfig::full()] {
            let f = holistic_factors(&shape);
            assert_eq!(f.len(), shape.levels());
            assert_eq!(f.iter().map(|x| x[0]).product::<usize>(), shape.depth_factor());
        }
    }
}
