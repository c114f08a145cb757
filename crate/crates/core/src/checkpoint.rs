//! Checkpoint container: a directory holding `manifest.json` (format version,
//! network kind, spec, tensor index) and `params.bin` (little-endian `f32`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::{DiscriminatorNet, DiscriminatorSpec};
use crate::error::{DehazeError, Result};
use crate::generator::{GeneratorNet, GeneratorSpec};
use crate::loss::FeatureExtractor;
use crate::tensor::{AdamConfig, AdamState, ParamKind, ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    FeatureExtractor,
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkKind::Generator => "generator",
            NetworkKind::Discriminator => "discriminator",
            NetworkKind::FeatureExtractor => "feature_extractor",
        })
    }
}

/// Location of one tensor inside the blob, in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingIndex {
    pub epoch: usize,
    pub step: u64,
    pub adam: AdamConfig,
    pub first_moments: Vec<TensorEntry>,
    pub second_moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: NetworkKind,
    pub spec: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingIndex>,
}

/// Optimizer state saved alongside a network.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub adam: AdamState,
}

/// Any network's parameters together with its kind and spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub spec: serde_json::Value,
    pub params: ParamSet,
    pub training: Option<TrainingState>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, kind: ParamKind, t: &Tensor) -> TensorEntry {
        let offset = self.bytes.len() as u64;
        for &v in t.data() {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            kind,
            offset,
            length: self.bytes.len() as u64 - offset,
        }
    }
}

fn read_tensor(blob: &[u8], e: &TensorEntry) -> Result<Tensor> {
    let count: usize = e.shape.iter().product();
    if e.length != 4 * count as u64 {
        return Err(DehazeError::BlobMismatch(format!(
            "{}: shape {:?} needs {} bytes, index says {}",
            e.name,
            e.shape,
            4 * count,
            e.length
        )));
    }
    let end = e
        .offset
        .checked_add(e.length)
        .filter(|&end| end <= blob.len() as u64)
        .ok_or_else(|| {
            DehazeError::BlobMismatch(format!(
                "{}: bytes {}..{} lie beyond the {}-byte blob",
                e.name,
                e.offset,
                e.offset.saturating_add(e.length),
                blob.len()
            ))
        })?;
    let data = blob[e.offset as usize..end as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(e.shape.clone(), data)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DehazeError::io(dir, e))?;
        let mut blob = BlobWriter { bytes: Vec::new() };
        let tensors = self.params.iter().map(|(n, k, t)| blob.push(n, k, t)).collect();
        let training = self.training.as_ref().map(|s| {
            let mut moments = |m: &BTreeMap<String, Tensor>| {
                m.iter()
                    .map(|(n, t)| blob.push(n, ParamKind::Buffer, t))
                    .collect::<Vec<_>>()
            };
            let first_moments = moments(&s.adam.first);
            let second_moments = moments(&s.adam.second);
            TrainingIndex {
                epoch: s.epoch,
                step: s.adam.step,
                adam: s.adam.config,
                first_moments,
                second_moments,
            }
        });
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            spec: self.spec.clone(),
            tensors,
            training,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| DehazeError::invalid(e.to_string()))?;
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, text).map_err(|e| DehazeError::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        std::fs::write(&bp, &blob.bytes).map_err(|e| DehazeError::io(&bp, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let mp = dir.join(MANIFEST_FILE);
        if !dir.exists() {
            return Err(DehazeError::NotFound(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&mp).map_err(|e| DehazeError::io(&mp, e))?;
        let corrupt = |reason: String| DehazeError::CorruptManifest {
            path: mp.clone(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(DehazeError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let bp = dir.join(BLOB_FILE);
        let blob = std::fs::read(&bp).map_err(|e| DehazeError::io(&bp, e))?;

        let mut expected = 0u64;
        let mut params = ParamSet::new();
        for e in &manifest.tensors {
            params.insert(e.name.clone(), e.kind, read_tensor(&blob, e)?);
            expected += e.length;
        }
        let training = match &manifest.training {
            None => None,
            Some(ti) => {
                let mut moments = |entries: &[TensorEntry]| -> Result<BTreeMap<String, Tensor>> {
                    entries
                        .iter()
                        .map(|e| {
                            expected += e.length;
                            Ok((e.name.clone(), read_tensor(&blob, e)?))
                        })
                        .collect()
                };
                let first = moments(&ti.first_moments)?;
                let second = moments(&ti.second_moments)?;
                Some(TrainingState {
                    epoch: ti.epoch,
                    adam: AdamState {
                        config: ti.adam,
                        step: ti.step,
                        first,
                        second,
                    },
                })
            }
        };
        if expected != blob.len() as u64 {
            return Err(DehazeError::BlobMismatch(format!(
                "index covers {expected} bytes but {} holds {}",
                bp.display(),
                blob.len()
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            spec: manifest.spec,
            params,
            training,
        })
    }

    fn expect_kind(&self, kind: NetworkKind) -> Result<()> {
        if self.kind != kind {
            return Err(DehazeError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    fn spec_as<T: serde::de::DeserializeOwned>(&self, dir: &Path) -> Result<T> {
        serde_json::from_value(self.spec.clone()).map_err(|e| DehazeError::CorruptManifest {
            path: dir.join(MANIFEST_FILE),
            reason: format!("spec: {e}"),
        })
    }
}

fn to_value<T: Serialize>(spec: &T) -> Result<serde_json::Value> {
    serde_json::to_value(spec).map_err(|e| DehazeError::invalid(e.to_string()))
}

pub fn save_generator(net: &GeneratorNet, training: Option<&TrainingState>, dir: &Path) -> Result<()> {
    Checkpoint {
        kind: NetworkKind::Generator,
        spec: to_value(net.spec())?,
        params: net.params.clone(),
        training: training.cloned(),
    }
    .save(dir)
}

pub fn load_generator(dir: &Path) -> Result<(GeneratorNet, Option<TrainingState>)> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_kind(NetworkKind::Generator)?;
    let spec: GeneratorSpec = ck.spec_as(dir)?;
    Ok((GeneratorNet::from_parts(spec, ck.params)?, ck.training))
}

pub fn save_discriminator(net: &DiscriminatorNet, training: Option<&TrainingState>, dir: &Path) -> Result<()> {
    Checkpoint {
        kind: NetworkKind::Discriminator,
        spec: to_value(net.spec())?,
        params: net.params.clone(),
        training: training.cloned(),
    }
    .save(dir)
}

pub fn load_discriminator(dir: &Path) -> Result<(DiscriminatorNet, Option<TrainingState>)> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_kind(NetworkKind::Discriminator)?;
    let spec: DiscriminatorSpec = ck.spec_as(dir)?;
    Ok((DiscriminatorNet::from_parts(spec, ck.params)?, ck.training))
}

#[derive(Serialize, Deserialize)]
struct ExtractorSpec {
    id: String,
}

pub fn save_feature_extractor(ext: &FeatureExtractor, dir: &Path) -> Result<()> {
    Checkpoint {
        kind: NetworkKind::FeatureExtractor,
        spec: to_value(&ExtractorSpec {
            id: ext.id().to_owned(),
        })?,
        params: ext.to_params(),
        training: None,
    }
    .save(dir)
}

pub fn load_feature_extractor(dir: &Path) -> Result<FeatureExtractor> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_kind(NetworkKind::FeatureExtractor)?;
    let spec: ExtractorSpec = ck.spec_as(dir)?;
    FeatureExtractor::from_params(spec.id, &ck.params)
}
