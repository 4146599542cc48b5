//! Run configuration: a plain-text `key=value` file whose every key can be
//! overridden by a command-line flag of the same name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use caldm::diffusion::{ScheduleConfig, ScheduleKind};
use caldm::error::{Error, Result};
use caldm::nhae::ShapeConfig;
use caldm::pipeline::parse_key_values;

/// Every configuration key with its default (empty means unset) and help text.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("image", "64,64,64", "volume shape D,H,W"),
    ("latent", "8,8,8", "latent shape D',H',W'"),
    ("channels", "4", "latent channels c"),
    ("window", "5", "slice window k of the multi-slice decoder (odd)"),
    ("T", "1000", "diffusion timesteps"),
    ("beta_start", "0.0001", "first noise variance"),
    ("beta_end", "0.02", "last noise variance"),
    ("schedule", "linear", "beta schedule: linear or scaled-linear"),
    ("ddim_steps", "200", "DDIM sampling steps (at most T)"),
    ("steps", "", "training steps (stage default when unset)"),
    ("batch_size", "", "training batch size (stage default when unset)"),
    ("learning_rate", "", "AdamW learning rate (stage default when unset)"),
    ("kl_weight", "0.000001", "KL weight of the autoencoder stages"),
    ("label_channels", "4", "label-encoder output channels for conditional fine-tuning"),
    ("dataset", "data", "phantom dataset directory"),
    ("checkpoints", "checkpoints", "checkpoint directory"),
    ("out", "out", "output directory"),
    ("seed", "0", "base random seed"),
    ("count", "", "number of phantoms or samples (command default when unset)"),
    ("layers", "6", "phantom tissue layers"),
    ("vessels", "4", "phantom vessels"),
    ("noise", "0.05", "phantom speckle noise level"),
    ("stage", "", "training stage"),
    ("manifest", "", "bundle manifest (defaults to the checkpoint directory's)"),
    ("label", "", "label volume for conditional sampling"),
    ("refine", "true", "run slice refinement when sampling"),
    ("real", "", "directory of real volumes for eval (defaults to dataset)"),
    ("syn", "", "directory of synthetic volumes for eval (defaults to out)"),
    ("ladder", "32,64,128", "depths profiled by `profile`"),
    ("task", "decode", "profiled task: decode or full-synthesis"),
    ("memory_limit", "", "analytic byte budget above which profile rows are marked failed"),
];

/// Fully parsed and validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub shape: ShapeConfig,
    pub schedule: ScheduleConfig,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub kl_weight: f64,
    pub label_channels: usize,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub count: Option<usize>,
    pub layers: usize,
    pub vessels: usize,
    pub noise: f32,
    pub stage: Option<String>,
    pub manifest: Option<PathBuf>,
    pub label: Option<PathBuf>,
    pub refine: bool,
    pub real: Option<PathBuf>,
    pub syn: Option<PathBuf>,
    pub ladder: Vec<usize>,
    pub task: String,
    pub memory_limit: Option<u64>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse(key, x)).collect()
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    list(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs three comma-separated values, got `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Defaults, then the file at `config` (if any), then `overrides`.
    pub fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_key_values(&text)? {
                if !map.contains_key(&k) {
                    return Err(Error::Config(format!("{}: unknown key `{k}`", path.display())));
                }
                map.insert(k, v);
            }
        }
        for (k, v) in overrides {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(&map)
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m[k].as_str();
        let opt = |k: &str| Some(get(k)).filter(|v| !v.trim().is_empty());
        let path = |k: &str| opt(k).map(PathBuf::from);
        let shape = ShapeConfig {
            channels: parse("channels", get("channels"))?,
            image: triple("image", get("image"))?,
            latent: triple("latent", get("latent"))?,
            window: parse("window", get("window"))?,
        };
        shape.validate()?;
        let schedule = ScheduleConfig {
            steps: parse("T", get("T"))?,
            beta_start: parse("beta_start", get("beta_start"))?,
            beta_end: parse("beta_end", get("beta_end"))?,
            kind: get("schedule").trim().parse::<ScheduleKind>()?,
            ddim_steps: parse("ddim_steps", get("ddim_steps"))?,
        };
        schedule.validate()?;
        let cfg = Self {
            shape,
            schedule,
            steps: opt("steps").map(|v| parse("steps", v)).transpose()?,
            batch_size: opt("batch_size").map(|v| parse("batch_size", v)).transpose()?,
            learning_rate: opt("learning_rate").map(|v| parse("learning_rate", v)).transpose()?,
            kl_weight: parse("kl_weight", get("kl_weight"))?,
            label_channels: parse("label_channels", get("label_channels"))?,
            dataset: PathBuf::from(get("dataset")),
            checkpoints: PathBuf::from(get("checkpoints")),
            out: PathBuf::from(get("out")),
            seed: parse("seed", get("seed"))?,
            count: opt("count").map(|v| parse("count", v)).transpose()?,
            layers: parse("layers", get("layers"))?,
            vessels: parse("vessels", get("vessels"))?,
            noise: parse("noise", get("noise"))?,
            stage: opt("stage").map(|s| s.trim().to_string()),
            manifest: path("manifest"),
            label: path("label"),
            refine: boolean("refine", get("refine"))?,
            real: path("real"),
            syn: path("syn"),
            ladder: list("ladder", get("ladder"))?,
            task: get("task").trim().to_string(),
            memory_limit: opt("memory_limit").map(|v| parse("memory_limit", v)).transpose()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let positive = |k: &str, v: Option<usize>| match v {
            Some(0) => Err(Error::Config(format!("`{k}` must be positive"))),
            _ => Ok(()),
        };
        positive("steps", self.steps)?;
        positive("batch_size", self.batch_size)?;
        positive("count", self.count)?;
        positive("label_channels", Some(self.label_channels))?;
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
            }
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight must be non-negative, got {}", self.kl_weight)));
        }
        if self.ladder.is_empty() || self.ladder.contains(&0) {
            return Err(Error::Config("ladder needs positive depths".into()));
        }
        if !matches!(self.task.as_str(), "decode" | "full-synthesis") {
            return Err(Error::Config(format!("unknown task `{}`", self.task)));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.checkpoints.join(crate::commands::BUNDLE_MANIFEST))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_the_desk_profile() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.shape, ShapeConfig::desk());
        assert_eq!(c.schedule, ScheduleConfig::default());
        assert_eq!(c.ladder, vec![32, 64, 128]);
        assert!(c.refine);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=5\nddim_steps=50\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &kv(&[("seed", "9")])).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.schedule.ddim_steps, 50);
    }

    #[test]
    fn invariant_violations_are_rejected() {
        for bad in [
            ("window", "4"),
            ("latent", "7,8,8"),
            ("ddim_steps", "2000"),
            ("image", "64,64"),
            ("steps", "0"),
            ("task", "train"),
            ("nonsense", "1"),
        ] {
            assert!(RunConfig::resolve(None, &kv(&[bad])).is_err(), "{bad:?} accepted");
        }
    }
}
