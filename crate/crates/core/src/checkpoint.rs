//! Weights on disk as safetensors with a JSON sidecar.
//!
//! A checkpoint named `stem` consists of `stem.safetensors` and `stem.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    /// Model role, e.g. `attribute-predictor`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub params_digest: String,
    pub config: serde_json::Value,
    /// Training outcome: selected epoch, validation metrics and so on.
    pub metadata: serde_json::Value,
    /// Role → params digest of every frozen model this one was trained on.
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
}

impl Sidecar {
    pub fn new<C: Serialize>(
        kind: &str,
        config: &C,
        seed: u64,
        store: &ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash(config)?,
            seed,
            params_digest: store.digest()?,
            config: serde_json::to_value(config)?,
            metadata: serde_json::Value::Null,
            upstream: BTreeMap::new(),
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{} sidecar config unreadable: {e}", self.kind)))
    }

    pub fn metadata_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone()).map_err(|e| {
            Error::Checkpoint(format!("{} sidecar metadata unreadable: {e}", self.kind))
        })
    }
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

pub fn weights_path(stem: &Path) -> PathBuf {
    stem.with_extension("safetensors")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn exists(stem: &Path) -> bool {
    weights_path(stem).exists() && sidecar_path(stem).exists()
}

pub fn write(stem: &Path, store: &ParamStore, sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    store.save(&weights_path(stem))?;
    fs::write(sidecar_path(stem), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(stem: &Path, kind: &str) -> Result<Sidecar> {
    let path = sidecar_path(stem);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "{kind} checkpoint {} not found",
            path.display()
        )));
    }
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version:?}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let sidecar: Sidecar = serde_json::from_value(value)?;
    if sidecar.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            path.display(),
            sidecar.kind
        )));
    }
    Ok(sidecar)
}

/// Loads weights into `store` and checks them against the sidecar digest.
pub fn load_weights(stem: &Path, store: &mut ParamStore, sidecar: &Sidecar) -> Result<()> {
    store.load(&weights_path(stem))?;
    let digest = store.digest()?;
    if digest != sidecar.params_digest {
        return Err(Error::Checkpoint(format!(
            "{}: weights do not match sidecar digest",
            stem.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use candle_nn::Init;

    #[derive(Serialize)]
    struct Cfg {
        b: u32,
        a: f64,
    }

    #[test]
    fn hash_ignores_field_order_but_not_values() {
        let h1 = config_hash(&Cfg { b: 1, a: 0.5 }).unwrap();
        let h2 = config_hash(&serde_json::json!({"a": 0.5, "b": 1})).unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1, config_hash(&Cfg { b: 2, a: 0.5 }).unwrap());
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let store = ParamStore::new(3, DType::F32);
        store.var("w", (2, 3), Init::Const(0.25)).unwrap();
        let side = Sidecar::new("test", &Cfg { b: 1, a: 2.0 }, 3, &store).unwrap();
        write(&stem, &store, &side).unwrap();
        assert!(exists(&stem));

        let mut fresh = ParamStore::new(9, DType::F32);
        fresh.var("w", (2, 3), Init::Const(0.0)).unwrap();
        let back = read_sidecar(&stem, "test").unwrap();
        assert_eq!(back, side);
        load_weights(&stem, &mut fresh, &back).unwrap();
        assert_eq!(fresh.digest().unwrap(), store.digest().unwrap());

        assert!(matches!(
            read_sidecar(&stem, "other"),
            Err(Error::Checkpoint(_))
        ));
        let mut bumped = serde_json::to_value(&side).unwrap();
        bumped["format_version"] = 99.into();
        fs::write(sidecar_path(&stem), bumped.to_string()).unwrap();
        assert!(matches!(
            read_sidecar(&stem, "test"),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            read_sidecar(&dir.path().join("absent"), "test"),
            Err(Error::MissingDependency(_))
        ));
    }
}
