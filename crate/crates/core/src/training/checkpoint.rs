//! Single-file checkpoints in the safetensors container.
//!
//! Tensors are stored under `model.<name>`, `ema.<name>`, `adam_m.<name>`
//! and `adam_v.<name>`, where `<name>` is the parameter path in the model.
//! The header metadata holds one key, `mcdiff`, whose value is the JSON
//! form of [`CheckpointMeta`]: format tag, version, iteration counter,
//! optimizer step, EMA update count, the training configuration and the
//! RNG description. Every random draw of iteration `i` comes from streams
//! keyed by `(seed, i)`, so the iteration counter is the full RNG state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mcdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "mcdiff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    /// Completed iterations.
    pub iteration: usize,
    pub adam_step: u64,
    pub ema_updates: u64,
    pub rng: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

const GROUPS: [&str; 4] = ["model", "ema", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn config(&self) -> &TrainConfig {
        &self.meta.config
    }

    pub fn iteration(&self) -> usize {
        self.meta.iteration
    }

    fn groups(&self) -> [&BTreeMap<String, Tensor>; 4] {
        [&self.params, &self.ema, &self.adam_m, &self.adam_v]
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (group, map) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in map {
                entries.push((format!("{group}.{name}"), t));
            }
        }
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        let bytes = safetensors::serialize(entries, Some(meta)).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(text)?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} version {}",
                meta.format, meta.version
            )));
        }
        let mut maps: [BTreeMap<String, Tensor>; 4] = Default::default();
        for name in st.names() {
            let (group, rest) = name
                .split_once('.')
                .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
            let slot = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| bad(format!("unexpected tensor group `{group}`")))?;
            let view = st.tensor(name).map_err(|e| bad(e.to_string()))?;
            let t = candle_core::safetensors::Load::load(&view, device)?;
            maps[slot].insert(rest.to_string(), t);
        }
        let [params, ema, adam_m, adam_v] = maps;
        for (group, map) in GROUPS.iter().skip(1).zip([&ema, &adam_m, &adam_v]) {
            if map.keys().ne(params.keys()) {
                return Err(bad(format!("`{group}` tensors do not match the model parameters")));
            }
        }
        Ok(Self {
            meta,
            params,
            ema,
            adam_m,
            adam_v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn sample() -> Checkpoint {
        let dev = Device::Cpu;
        let t = |v: f64| Tensor::full(v, (2, 3), &dev).unwrap();
        let map = |v: f64| BTreeMap::from([("a.weight".to_string(), t(v)), ("b".to_string(), t(v + 0.5))]);
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                iteration: 12,
                adam_step: 12,
                ema_updates: 12,
                rng: "test".into(),
                config: TrainConfig::desk(),
            },
            params: map(1.0),
            ema: map(2.0),
            adam_m: map(3.0),
            adam_v: map(4.0),
        }
    }

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.safetensors");
        let p2 = dir.path().join("b.safetensors");
        let ck = sample();
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = Checkpoint::load(&p1, &Device::Cpu).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (a, b) in back.groups().into_iter().zip(ck.groups()) {
            assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
            for (x, y) in a.values().zip(b.values()) {
                assert_eq!(x.dtype(), DType::F64);
                assert_eq!(
                    x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                    y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
                );
            }
        }
    }

    #[test]
    fn rejects_garbage_and_mismatched_groups() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        fs::write(&p, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&p, &Device::Cpu).is_err());
        let mut ck = sample();
        ck.ema.remove("b");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p, &Device::Cpu).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing"), &Device::Cpu).is_err());
    }
}
