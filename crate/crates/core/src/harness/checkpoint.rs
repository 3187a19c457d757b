use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::metrics::MetricRow;
use super::model::{Model, BANK_NAME};
use crate::diffcore::{Element, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::textknow::{LmConfig, SmallLm, TextCorpus};

pub const MAGIC: &[u8; 8] = b"HNFCKPT1";
/// Manifest entry holding the UTF-8 JSON run metadata as raw bytes.
pub const META_NAME: &str = "__meta__";
const META_DTYPE: &str = "u8";
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the data section, which starts right after the manifest.
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    categories: Vec<String>,
    epoch: usize,
    history: Vec<MetricRow>,
}

/// A trained model with the run metadata needed to resume or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub model: Model<T>,
    /// Epoch the parameters were taken from (1-based).
    pub epoch: usize,
    pub history: Vec<MetricRow>,
}

/// Serializes named tensors plus an opaque metadata blob into the
/// checkpoint container.
pub fn encode_container<'a, T: Element>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    meta: &[u8],
) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        if name == META_NAME {
            return Err(Error::InvalidArgument(format!("`{META_NAME}` is a reserved name")));
        }
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.as_str().to_string(),
            byte_offset: data.len(),
        });
        for &x in t.data() {
            x.write_le(&mut data);
        }
    }
    manifest.push(ManifestEntry {
        name: META_NAME.to_string(),
        shape: vec![meta.len()],
        dtype: META_DTYPE.to_string(),
        byte_offset: data.len(),
    });
    data.extend_from_slice(meta);

    let manifest = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + manifest.len() + data.len() + HASH_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    Ok(out)
}

/// Inverse of [`encode_container`]: verifies the hash and the manifest
/// extents, returns the tensors and the metadata blob.
pub fn decode_container<T: Element>(bytes: &[u8]) -> Result<(ParamSet<T>, Vec<u8>)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 + HASH_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != hash {
        return Err(corrupt("SHA-256 mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("manifest length past end of file"))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&body[16..data_start]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    let data = &body[data_start..];

    let mut tensors = ParamSet::new();
    let mut meta = None;
    let mut expected_offset = 0;
    for e in &manifest {
        let (width, is_meta) = match e.dtype.as_str() {
            META_DTYPE if e.name == META_NAME => (1, true),
            s if s == T::DTYPE.as_str() && e.name != META_NAME => (T::DTYPE.size_of(), false),
            other => return Err(corrupt(&format!("entry `{}` has dtype {other}", e.name))),
        };
        let len = e.shape.iter().product::<usize>() * width;
        if e.byte_offset != expected_offset || e.byte_offset + len > data.len() {
            return Err(corrupt(&format!("entry `{}` has a bad extent", e.name)));
        }
        let raw = &data[e.byte_offset..e.byte_offset + len];
        expected_offset += len;
        if is_meta {
            if meta.replace(raw.to_vec()).is_some() {
                return Err(corrupt("duplicate metadata"));
            }
            continue;
        }
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?).is_some() {
            return Err(corrupt(&format!("duplicate entry `{}`", e.name)));
        }
    }
    if expected_offset != data.len() {
        return Err(corrupt("trailing bytes after the last entry"));
    }
    Ok((tensors, meta.ok_or_else(|| corrupt("missing metadata"))?))
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.model.cfg.clone(),
            categories: self.model.categories.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        })?;
        if self.model.params.contains(BANK_NAME) {
            return Err(Error::InvalidArgument(format!("`{BANK_NAME}` is a reserved name")));
        }
        let tensors = self
            .model
            .params
            .iter()
            .chain(std::iter::once((BANK_NAME, &self.model.bank)));
        encode_container(tensors, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut params, meta) = decode_container::<T>(bytes)?;
        let meta: Meta = serde_json::from_slice(&meta)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let bank = params
            .remove(BANK_NAME)
            .ok_or_else(|| Error::CorruptCheckpoint("missing text bank".into()))?;
        let model = Model {
            cfg: meta.config,
            categories: meta.categories,
            params,
            bank,
        };
        model.check()?;
        Ok(Checkpoint {
            model,
            epoch: meta.epoch,
            history: meta.history,
        })
    }

    /// Loads and checks that every shape-determining field agrees with `cfg`.
    pub fn load_compatible(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if let Some(why) = cfg.shape_mismatch(&ck.model.cfg) {
            return Err(Error::IncompatibleConfig(why));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint<T: Element>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    vocabulary: Vec<String>,
    trace: Vec<f64>,
}

/// Writes a pretrained language model together with the vocabulary its
/// embedding rows are indexed by and its pretraining loss trace.
pub fn save_language_model<T: Element>(lm: &SmallLm<T>, corpus: &TextCorpus, trace: &[f64], path: &Path) -> Result<()> {
    if lm.vocab_size != corpus.vocab_size() {
        return Err(Error::ShapeMismatch(format!(
            "model vocabulary {} vs corpus {}",
            lm.vocab_size,
            corpus.vocab_size()
        )));
    }
    let meta = serde_json::to_vec(&LmMeta {
        config: lm.cfg,
        vocabulary: corpus.vocabulary().to_vec(),
        trace: trace.to_vec(),
    })?;
    std::fs::write(path, encode_container(lm.params.iter(), &meta)?)?;
    Ok(())
}

/// Loads a language model written by [`save_language_model`]. Fails with
/// `IncompatibleConfig` unless it was trained on exactly `corpus`'s
/// vocabulary.
pub fn load_language_model<T: Element>(path: &Path, corpus: &TextCorpus) -> Result<(SmallLm<T>, Vec<f64>)> {
    let (params, meta) = decode_container::<T>(&std::fs::read(path)?)?;
    let meta: LmMeta =
        serde_json::from_slice(&meta).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    if meta.vocabulary != corpus.vocabulary() {
        return Err(Error::IncompatibleConfig(format!(
            "language model vocabulary ({} tokens) differs from the corpus ({} tokens)",
            meta.vocabulary.len(),
            corpus.vocab_size()
        )));
    }
    Ok((SmallLm::from_params(meta.config, &params)?, meta.trace))
}
