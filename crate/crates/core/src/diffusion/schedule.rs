use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `beta` linear in `t`.
    Linear,
    /// `sqrt(beta)` linear in `t`.
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled-linear" => Ok(Self::ScaledLinear),
            _ => Err(Error::Config(format!("unknown schedule kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::ScaledLinear => "scaled-linear",
        })
    }
}

/// Diffusion coefficients for `t = 1..=T`; index 0 holds the `t = 0` boundary
/// (`alpha_bar = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "invalid schedule: T={steps}, beta {beta_start}..{beta_end}"
        )));
    }
    let frac = |t: usize| {
        if steps == 1 {
            0.0
        } else {
            (t - 1) as f64 / (steps - 1) as f64
        }
    };
    let mut beta = vec![0.0];
    for t in 1..=steps {
        beta.push(match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(t),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(t)).powi(2)
            }
        });
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Evenly strided, strictly increasing subset of `[1, T]` ending at `T`.
    pub fn ddim_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if num_steps == 0 || num_steps > t {
            return Err(Error::validation(format!("DDIM needs 1..={t} steps, got {num_steps}")));
        }
        Ok((1..=num_steps).map(|i| i * t / num_steps).collect())
    }
}

/// Schedule parameters plus the DDIM step count used at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
            ddim_steps: 200,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    /// Builds the schedule, also checking `1 <= ddim_steps <= T`.
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)?;
        s.ddim_timesteps(self.ddim_steps)?;
        Ok(s)
    }
}

/// Per-sample coefficient tensor of shape `(N, 1, 1, 1, 1)` (rank follows `like`).
fn per_sample(values: Vec<f32>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`, with one timestep per
/// batch entry (the leading axis of `x0`).
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::validation(format!("eps {:?} differs from x0 {:?}", eps.dims(), x0.dims())));
    }
    if x0.rank() == 0 || t.len() != x0.dims()[0] {
        return Err(Error::validation(format!("{} timesteps for batch {:?}", t.len(), x0.dims())));
    }
    for &s in t {
        schedule.check_step(s)?;
    }
    let a: Vec<f32> = t.iter().map(|&s| schedule.alpha_bar(s).sqrt() as f32).collect();
    let b: Vec<f32> = t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt() as f32).collect();
    Ok((x0.broadcast_mul(&per_sample(a, x0)?)? + eps.broadcast_mul(&per_sample(b, x0)?)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_alpha_bar_matches_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut prod = 1f64;
        for t in 1..=1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
        }
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 1e-6, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn single_step_and_monotonicity() {
        let s = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = make_schedule(50, 1e-3, 0.2, kind).unwrap();
            for t in 1..=50 {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                if t > 1 {
                    assert!(s.beta(t) >= s.beta(t - 1));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn ddim_subsets() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let ts = s.ddim_timesteps(200).unwrap();
        assert_eq!(ts.len(), 200);
        assert_eq!(ts[0], 5);
        assert!(ts.windows(2).all(|w| w[1] - w[0] == 5));
        assert_eq!(s.ddim_timesteps(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn q_sample_limits_and_validation() {
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let eps_v: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps_v, (2, 4), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((2, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let xt = q_sample(&zero, &[3, 3], &eps, &s).unwrap();
        let want = (&eps * (1.0 - s.alpha_bar(3)).sqrt()).unwrap();
        let diff = (xt - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-7);
        assert!(q_sample(&zero, &[0, 3], &eps, &s).is_err());
        assert!(q_sample(&zero, &[11, 3], &eps, &s).is_err());
        assert!(q_sample(&zero, &[3], &eps, &s).is_err());
    }
}
