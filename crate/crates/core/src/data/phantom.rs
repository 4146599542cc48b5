use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

const BACKGROUND: f32 = -0.85;
const VESSEL: f32 = 0.95;

/// Parameters of one synthetic layered-tissue volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub layer_count: usize,
    pub vessel_count: usize,
    pub noise_level: f32,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            size: [64, 64, 64],
            layer_count: 6,
            vessel_count: 4,
            noise_level: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::validation(format!("phantom size {:?} has a zero dimension", self.size)));
        }
        if self.layer_count < 2 {
            return Err(Error::validation("phantom needs at least 2 layers"));
        }
        // One class per layer plus the vessel class must fit in a u8 label.
        if self.layer_count > 254 {
            return Err(Error::validation("phantom layer count exceeds 254"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::validation(format!("invalid noise level {}", self.noise_level)));
        }
        Ok(())
    }

    /// Number of label classes: one per layer plus one for vessels.
    pub fn class_count(&self) -> u8 {
        self.layer_count as u8 + 1
    }

    /// Label index used for vessel voxels.
    pub fn vessel_class(&self) -> u8 {
        self.layer_count as u8
    }
}

/// Mean intensity of layer `l`. Layer 0 is the dark region above the first surface.
pub(crate) fn layer_intensity(l: usize) -> f32 {
    if l == 0 {
        return BACKGROUND;
    }
    // Golden-ratio stepping gives distinct, well spread values for any count.
    let frac = (l as f64 * 0.618_033_988_75).fract() as f32;
    -0.5 + 1.1 * frac
}

struct Wave {
    amp: f64,
    freq_d: f64,
    freq_w: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, max_amp: f64) -> Self {
        Self {
            amp: rng.random_range(0.3..1.0) * max_amp,
            freq_d: rng.random_range(0.3..1.2),
            freq_w: rng.random_range(0.3..1.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * (self.freq_d * u + self.freq_w * v) + self.phase).sin()
    }
}

/// Produces a layered phantom and its voxel-aligned labels.
///
/// Layers are separated by smooth surfaces `h = s_j(d, w)`; bright tubular
/// vessels run through the first tissue layer. The output is a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [d, h, w] = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surfaces = spec.layer_count - 1;
    let hf = h as f64;

    let shared: Vec<Wave> = (0..2).map(|_| Wave::random(&mut rng, 0.05 * hf)).collect();
    let gap = 0.5 * hf / surfaces as f64;
    let own: Vec<Wave> = (0..surfaces)
        .map(|_| Wave::random(&mut rng, 0.2 * gap))
        .collect();

    // heights[(z * w + x) * surfaces + j], monotone in j
    let mut heights = vec![0f64; d * w * surfaces];
    for z in 0..d {
        let u = (z as f64 + 0.5) / d as f64;
        for x in 0..w {
            let v = (x as f64 + 0.5) / w as f64;
            let bend: f64 = shared.iter().map(|s| s.at(u, v)).sum();
            let mut prev = f64::NEG_INFINITY;
            for (j, wave) in own.iter().enumerate() {
                let base = hf * 0.25 + gap * (j as f64 + 0.5);
                let s = (base + bend + wave.at(u, v)).max(prev + 1.0);
                heights[(z * w + x) * surfaces + j] = s;
                prev = s;
            }
        }
    }

    let n = d * h * w;
    let mut labels = vec![0u8; n];
    let mut data = vec![0f32; n];
    for z in 0..d {
        for x in 0..w {
            let hs = &heights[(z * w + x) * surfaces..(z * w + x + 1) * surfaces];
            for y in 0..h {
                let yc = y as f64 + 0.5;
                let layer = hs.iter().take_while(|&&s| s <= yc).count();
                let i = (z * h + y) * w + x;
                labels[i] = layer as u8;
                data[i] = layer_intensity(layer);
            }
        }
    }

    let radius = (spec.size.iter().copied().min().unwrap_or(1) as f64 / 32.0).max(1.0);
    let vessel_class = spec.vessel_class();
    for _ in 0..spec.vessel_count {
        let path = vessel_path(&mut rng, spec.size, &heights, surfaces);
        rasterize_tube(&path, radius, spec.size, |i| {
            labels[i] = vessel_class;
            data[i] = VESSEL;
        });
    }

    if spec.noise_level > 0.0 {
        for v in data.iter_mut() {
            let e: f32 = rng.sample(StandardNormal);
            *v += spec.noise_level * e;
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }

    Ok((
        Volume::new(spec.size, data)?,
        LabelVolume::new(spec.size, labels, spec.class_count())?,
    ))
}

/// A wandering polyline across the `(d, w)` plane that stays inside the first tissue layer.
fn vessel_path(
    rng: &mut ChaCha8Rng,
    size: [usize; 3],
    heights: &[f64],
    surfaces: usize,
) -> Vec<[f64; 3]> {
    let [d, h, w] = size;
    let (df, wf) = (d as f64, w as f64);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dir_d, dir_w) = (angle.cos(), angle.sin());
    let (cd, cw) = (
        rng.random_range(0.3..0.7) * df,
        rng.random_range(0.3..0.7) * wf,
    );
    let half = 0.75 * df.hypot(wf);
    let steps = 8;
    let wiggle = 0.08 * df.min(wf);
    (0..=steps)
        .map(|s| {
            let t = -half + 2.0 * half * s as f64 / steps as f64;
            let off: f64 = rng.random_range(-1.0..1.0) * wiggle;
            let pd = cd + t * dir_d - off * dir_w;
            let pw = cw + t * dir_w + off * dir_d;
            let zi = (pd.floor().max(0.0) as usize).min(d - 1);
            let xi = (pw.floor().max(0.0) as usize).min(w - 1);
            let base = (zi * w + xi) * surfaces;
            let top = heights[base];
            let bottom = if surfaces > 1 {
                heights[base + 1]
            } else {
                h as f64
            };
            [pd, 0.5 * (top + bottom), pw]
        })
        .collect()
}

fn rasterize_tube(path: &[[f64; 3]], radius: f64, size: [usize; 3], mut mark: impl FnMut(usize)) {
    let [d, h, w] = size;
    let r2 = radius * radius;
    let reach = radius.ceil() as isize;
    for seg in path.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        let samples = (len / 0.5).ceil().max(1.0) as usize;
        for s in 0..=samples {
            let t = s as f64 / samples as f64;
            let p = [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ];
            let c = [p[0].floor() as isize, p[1].floor() as isize, p[2].floor() as isize];
            for oz in -reach..=reach {
                for oy in -reach..=reach {
                    for ox in -reach..=reach {
                        let (z, y, x) = (c[0] + oz, c[1] + oy, c[2] + ox);
                        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        let dz = z as f64 + 0.5 - p[0];
                        let dy = y as f64 + 0.5 - p[1];
                        let dx = x as f64 + 0.5 - p[2];
                        if dz * dz + dy * dy + dx * dx <= r2 {
                            mark((z as usize * h + y as usize) * w + x as usize);
                        }
                    }
                }
            }
        }
    }
}
