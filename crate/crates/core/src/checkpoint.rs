//! Self-describing checkpoint files: safetensors payload plus string metadata.
//!
//! Every checkpoint carries `format`, `kind`, `stage` and a `fingerprint` of the
//! shape configuration it was trained under. Loading checks the format tag and,
//! when asked, the fingerprint and the completed stages.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "caldm-checkpoint/1";

/// Hex SHA-256 of `text`, truncated to 16 characters.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("{digest:x}")[..16].to_string()
}

/// Digest over the exact bits of every parameter under `prefix`.
pub fn params_digest(store: &ParamStore, prefix: &str) -> Result<String> {
    let mut h = Sha256::new();
    for (name, bits) in store.snapshot(prefix)? {
        h.update(name.as_bytes());
        for b in bits {
            h.update(b.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize())[..16].to_string())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, stage: &str, config_fingerprint: &str, params: ParamStore) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("kind".into(), kind.into());
        meta.insert("stage".into(), stage.into());
        meta.insert("fingerprint".into(), config_fingerprint.into());
        Self { meta, params }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}` metadata")))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn kind(&self) -> &str {
        self.get("kind").unwrap_or("")
    }

    /// Completed stages, recorded as a comma list under `stages`.
    pub fn stages(&self) -> Vec<&str> {
        self.get("stages")
            .map(|s| s.split(',').filter(|x| !x.is_empty()).collect())
            .unwrap_or_default()
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages().contains(&stage)
    }

    pub fn add_stage(&mut self, stage: &str) {
        let mut stages: Vec<String> = self.stages().into_iter().map(String::from).collect();
        if !stages.iter().any(|s| s == stage) {
            stages.push(stage.to_string());
        }
        self.set("stages", stages.join(","));
        self.set("stage", stage);
    }

    pub fn expect(&self, kind: &str, config_fingerprint: &str) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind()
            )));
        }
        let fp = self.require("fingerprint")?;
        if fp != config_fingerprint {
            return Err(Error::Checkpoint(format!(
                "configuration fingerprint {fp} does not match current configuration {config_fingerprint}"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.to_string(), v.as_tensor().contiguous()?)))
            .collect::<Result<_>>()?;
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!(
                "{} is not a {FORMAT} file",
                path.display()
            )));
        }
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            tensors.push((name, view.load(&Device::Cpu)?));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let seed = meta
            .get("seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(Self {
            meta,
            params: ParamStore::from_tensors(tensors, seed)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let mut store = ParamStore::new(4);
        Builder::new(&mut store, "a")
            .tensor("w", &[3, 2], Init::Uniform { fan_in: 2 })
            .unwrap();
        let digest = params_digest(&store, "").unwrap();
        let mut ck = Checkpoint::new("nhae", "nhae-2d", "abc", store);
        ck.add_stage("nhae-2d");
        ck.add_stage("nhae-3d");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stages(), vec!["nhae-2d", "nhae-3d"]);
        assert_eq!(back.get("stage"), Some("nhae-3d"));
        assert_eq!(params_digest(&back.params, "").unwrap(), digest);
        back.expect("nhae", "abc").unwrap();
        assert!(back.expect("nhae", "abd").is_err());
        assert!(back.expect("diff3d", "abc").is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
