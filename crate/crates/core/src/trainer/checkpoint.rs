//! Checkpoint directories: `weights.cbor` holds every array, `meta.json`
//! holds the iteration, config, sampler position and integrity hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::data::{EpochSampler, SamplerState};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Array;

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.cbor";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_array(a: &Array, kind: Option<ParamKind>) -> Self {
        StoredTensor {
            shape: a.shape().to_vec(),
            kind,
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array> {
        let shape: [usize; 4] = self
            .shape
            .clone()
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("expected a 4-d tensor, got shape {:?}", self.shape)))?;
        Array::from_shape_vec(shape, self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor data does not fit shape {shape:?}: {e}")))
    }
}

pub type WeightMap = BTreeMap<String, StoredTensor>;

pub fn encode_weights(map: &WeightMap) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::into_writer(map, &mut out).expect("in-memory CBOR write");
    out
}

/// Reads a CBOR weight container (checkpoints and external encoder weights
/// share the format).
pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ciborium::from_reader(&bytes[..]).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn write_weights(path: impl AsRef<Path>, map: &WeightMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(map)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    iteration: u64,
    config: TrainConfig,
    config_hash: String,
    sampler: SamplerState,
    adam_g_step: u64,
    adam_d_step: u64,
    weights_sha256: String,
    checksum: String,
}

impl Meta {
    fn digest(&self) -> String {
        let mut unsigned = self.clone();
        unsigned.checksum = String::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&unsigned).expect("meta serializes")))
    }
}

fn collect(state: &TrainState) -> WeightMap {
    let mut map = WeightMap::new();
    for store in [&state.generator, &state.discriminator] {
        for (name, p) in store.iter() {
            map.insert(name.clone(), StoredTensor::from_array(&p.value, Some(p.kind)));
        }
    }
    for (tag, adam) in [("g", &state.adam_g), ("d", &state.adam_d)] {
        for (moment, entries) in [("m", &adam.first), ("v", &adam.second)] {
            for (name, a) in entries {
                map.insert(format!("adam.{tag}.{moment}/{name}"), StoredTensor::from_array(a, None));
            }
        }
    }
    map
}

/// Writes `state` into directory `dir`, replacing any previous checkpoint
/// there only once both files are complete.
pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let weights = encode_weights(&collect(state));
    let mut meta = Meta {
        format_version: FORMAT_VERSION,
        iteration: state.iteration,
        config: state.config.clone(),
        config_hash: state.config.hash(),
        sampler: state.sampler.state(),
        adam_g_step: state.adam_g.step,
        adam_d_step: state.adam_d.step,
        weights_sha256: hex::encode(Sha256::digest(&weights)),
        checksum: String::new(),
    };
    meta.checksum = meta.digest();
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");

    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let staging = dir.with_file_name(format!(".{name}.partial"));
    let _ = fs::remove_dir_all(&staging);
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    fs::write(staging.join(WEIGHTS_FILE), &weights).map_err(|e| Error::io(staging.join(WEIGHTS_FILE), e))?;
    fs::write(staging.join(META_FILE), meta_json).map_err(|e| Error::io(staging.join(META_FILE), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

/// Reads a checkpoint, verifying its format version and integrity hashes.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        let found = version.map_or_else(|| "missing".to_string(), |v| v.to_string());
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {found} is not supported; this build reads version {FORMAT_VERSION}"
        )));
    }
    let meta: Meta =
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.digest() != meta.checksum {
        return Err(Error::Checkpoint(format!("{}: metadata checksum mismatch", meta_path.display())));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != meta.weights_sha256 {
        return Err(Error::Checkpoint(format!("{}: weights hash mismatch", weights_path.display())));
    }
    let map: WeightMap =
        ciborium::from_reader(&bytes[..]).map_err(|e| Error::Checkpoint(format!("{}: {e}", weights_path.display())))?;

    let mut generator = ParamStore::new();
    let mut discriminator = ParamStore::new();
    let mut adam_g = Adam { step: meta.adam_g_step, ..Adam::default() };
    let mut adam_d = Adam { step: meta.adam_d_step, ..Adam::default() };
    for (name, t) in &map {
        let value = t.to_array()?;
        if let Some(rest) = name.strip_prefix("adam.") {
            let (head, param) = rest
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("malformed optimizer entry `{name}`")))?;
            let (adam, moment) = match head {
                "g.m" => (&mut adam_g, true),
                "g.v" => (&mut adam_g, false),
                "d.m" => (&mut adam_d, true),
                "d.v" => (&mut adam_d, false),
                _ => return Err(Error::Checkpoint(format!("malformed optimizer entry `{name}`"))),
            };
            let slot = if moment { &mut adam.first } else { &mut adam.second };
            slot.insert(param.to_string(), value);
            continue;
        }
        let kind = t.kind.ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` has no kind")))?;
        match name.split('.').next() {
            Some("g") => generator.insert(name.clone(), value, kind),
            Some("d") => discriminator.insert(name.clone(), value, kind),
            _ => return Err(Error::Checkpoint(format!("unknown parameter namespace in `{name}`"))),
        }
    }
    Ok(TrainState {
        iteration: meta.iteration,
        config: meta.config,
        generator,
        discriminator,
        adam_g,
        adam_d,
        sampler: EpochSampler::from_state(&meta.sampler)?,
    })
}

/// Stored config hash of a checkpoint, for comparing against a resume config.
pub fn checkpoint_config_hash(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    raw.get("config_hash")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing config_hash", path.display())))
}
