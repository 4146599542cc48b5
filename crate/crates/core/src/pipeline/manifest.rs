//! Plain-text bundle manifest: `key=value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nhae::ShapeConfig;

/// Checkpoint locations plus the schedule and shape they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleManifest {
    pub nhae: PathBuf,
    pub diff3d: PathBuf,
    pub diffslice: PathBuf,
    pub schedule: ScheduleConfig,
    pub shape: ShapeConfig,
}

fn triple(v: &str, key: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("`{key}` must be three integers, got `{v}`")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` must be three integers, got `{v}`")))
}

fn number<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))?;
    v.parse()
        .map_err(|_| Error::Config(format!("manifest `{key}` has invalid value `{v}`")))
}

/// Parses `key=value` lines, rejecting duplicates.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(map)
}

impl BundleManifest {
    /// Relative checkpoint paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let map = parse_key_values(text)?;
        let path = |key: &str| -> Result<PathBuf> {
            let p = PathBuf::from(
                map.get(key)
                    .ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))?,
            );
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let known = [
            "nhae", "diff3d", "diffslice", "T", "beta_start", "beta_end", "schedule", "ddim_steps", "channels",
            "image", "latent", "window",
        ];
        if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown manifest key `{k}`")));
        }
        let schedule = ScheduleConfig {
            steps: number(&map, "T")?,
            beta_start: number(&map, "beta_start")?,
            beta_end: number(&map, "beta_end")?,
            kind: number(&map, "schedule")?,
            ddim_steps: number(&map, "ddim_steps")?,
        };
        let field = |key: &str| map.get(key).ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")));
        let shape = ShapeConfig {
            channels: number(&map, "channels")?,
            image: triple(field("image")?, "image")?,
            latent: triple(field("latent")?, "latent")?,
            window: number(&map, "window")?,
        };
        shape.validate()?;
        schedule.validate()?;
        Ok(Self {
            nhae: path("nhae")?,
            diff3d: path("diff3d")?,
            diffslice: path("diffslice")?,
            schedule,
            shape,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let join = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let s = &self.schedule;
        format!(
            "nhae={}\ndiff3d={}\ndiffslice={}\nT={}\nbeta_start={}\nbeta_end={}\nschedule={}\nddim_steps={}\nchannels={}\nimage={}\nlatent={}\nwindow={}\n",
            self.nhae.display(),
            self.diff3d.display(),
            self.diffslice.display(),
            s.steps,
            s.beta_start,
            s.beta_end,
            s.kind,
            s.ddim_steps,
            self.shape.channels,
            join(self.shape.image),
            join(self.shape.latent),
            self.shape.window
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BundleManifest {
        BundleManifest {
            nhae: "/ck/nhae.safetensors".into(),
            diff3d: "/ck/diff3d.safetensors".into(),
            diffslice: "/ck/diffslice.safetensors".into(),
            schedule: ScheduleConfig::default(),
            shape: ShapeConfig::desk(),
        }
    }

    #[test]
    fn text_form_parses_back() {
        let m = sample();
        assert_eq!(BundleManifest::parse(&m.to_text(), Path::new("/")).unwrap(), m);
    }

    #[test]
    fn relative_paths_resolve_against_the_manifest_directory() {
        let text = sample().to_text().replace("/ck/", "");
        let m = BundleManifest::parse(&text, Path::new("/runs/a")).unwrap();
        assert_eq!(m.nhae, PathBuf::from("/runs/a/nhae.safetensors"));
    }

    #[test]
    fn invalid_manifests_are_config_errors() {
        let text = sample().to_text();
        for bad in [
            text.replace("window=5", "window=4"),
            text.replace("ddim_steps=200", "ddim_steps=2000"),
            text.replace("latent=8,8,8", "latent=7,8,8"),
            text.replace("T=1000\n", ""),
            format!("{text}extra=1\n"),
            format!("{text}T=10\n"),
        ] {
            let err = BundleManifest::parse(&bad, Path::new("/")).unwrap_err();
            assert!(matches!(err, Error::Config(_) | Error::Validation(_)), "{err}");
        }
    }
}
