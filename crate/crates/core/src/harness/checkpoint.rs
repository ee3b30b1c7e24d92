//! Model checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "FKMD"
//! version    u32      1
//! meta_len   u32      followed by meta_len bytes of UTF-8 JSON model description
//! count      u32      parameter blocks, sorted by name
//! blocks:
//!   name_len u32      followed by name_len bytes of UTF-8 name
//!   rows     u32
//!   cols     u32
//!   values   rows * cols f64, row-major
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! Optimizer slots are not stored; a loaded store starts a fresh optimizer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParameterStore;
use crate::embedding::{EmbeddingIndex, GatedDenoiserBank, PipelineModel, SiameseNet};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::fusion::{FusionConfig, FusionModel};
use crate::matrix::Matrix;
use crate::mvrnn::{MvrnnConfig, MvrnnModel};

pub const MODEL_MAGIC: &[u8; 4] = b"FKMD";
pub const MODEL_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const INDEX_POINTS: &str = "index.points";

pub fn encode_checkpoint(meta: &str, store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, entry) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(entry.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(entry.value.cols() as u32).to_le_bytes());
        for v in entry.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Load("model file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Load("string is not UTF-8".into()))
    }
}

/// Checks magic, version and checksum before parsing anything else, so a
/// damaged file never yields a partial store.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParameterStore)> {
    if bytes.len() < MODEL_MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Load("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Load(format!("model version {version}, expected {MODEL_VERSION}")));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Load("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let meta = r.string()?;
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if store.contains(&name) {
            return Err(Error::Load(format!("duplicate block {name}")));
        }
        store.insert(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(Error::Load("trailing bytes after parameter blocks".into()));
    }
    Ok((meta, store))
}

/// Structure of a saved model; the weights live in the parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum Meta {
    Fusion {
        config: FusionConfig,
    },
    Mvrnn {
        config: MvrnnConfig,
    },
    Embedding {
        net: SiameseNet,
        bank: GatedDenoiserBank,
        labels: Vec<usize>,
    },
}

/// Any trained model together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Fusion { model: FusionModel, store: ParameterStore },
    Mvrnn { model: MvrnnModel, store: ParameterStore },
    Embedding(PipelineModel),
}

impl SavedModel {
    pub fn family(&self) -> &'static str {
        match self {
            SavedModel::Fusion { .. } => "fusion",
            SavedModel::Mvrnn { .. } => "mvrnn",
            SavedModel::Embedding(_) => "embedding",
        }
    }
}

fn copy_into(dst: &mut ParameterStore, src: &ParameterStore) {
    for (name, entry) in src.iter() {
        dst.insert(name.clone(), entry.value.clone());
    }
}

pub fn encode_model(model: &SavedModel) -> Result<Vec<u8>> {
    let (meta, store) = match model {
        SavedModel::Fusion { model, store } => (Meta::Fusion { config: model.config.clone() }, store.clone()),
        SavedModel::Mvrnn { model, store } => (Meta::Mvrnn { config: model.config.clone() }, store.clone()),
        SavedModel::Embedding(p) => {
            let mut store = ParameterStore::new();
            copy_into(&mut store, &p.net_store);
            if p.bank_store.names().any(|n| store.contains(n)) {
                return Err(Error::Contract("embedding and denoiser parameters share a name".into()));
            }
            copy_into(&mut store, &p.bank_store);
            store.insert(INDEX_POINTS, p.index.points.clone());
            let meta = Meta::Embedding {
                net: p.net.clone(),
                bank: p.bank.clone(),
                labels: p.index.labels.clone(),
            };
            (meta, store)
        }
    };
    let meta = serde_json::to_string(&meta).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(encode_checkpoint(&meta, &store))
}

/// Parameter names and shapes a model expects, taken from a throwaway init.
fn expected<F: FnOnce(&mut ParameterStore, &mut ChaCha8Rng)>(init: F) -> ParameterStore {
    let mut store = ParameterStore::new();
    init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    store
}

fn check_blocks(want: &ParameterStore, got: &ParameterStore) -> Result<()> {
    for (name, entry) in want.iter() {
        match got.get(name) {
            Some(v) if v.shape() == entry.value.shape() => {}
            Some(v) => {
                return Err(Error::Load(format!(
                    "block {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    entry.value.shape()
                )))
            }
            None => return Err(Error::Load(format!("block {name} missing"))),
        }
    }
    match got.names().find(|n| !want.contains(n)) {
        Some(extra) => Err(Error::Load(format!("unexpected block {extra}"))),
        None => Ok(()),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    let (meta, store) = decode_checkpoint(bytes)?;
    let meta: Meta = serde_json::from_str(&meta).map_err(|e| Error::Load(format!("model description: {e}")))?;
    let load = |e: Error| Error::Load(e.to_string());
    match meta {
        Meta::Fusion { config } => {
            let model = FusionModel::new(config).map_err(load)?;
            check_blocks(&expected(|s, r| model.init(s, r)), &store)?;
            Ok(SavedModel::Fusion { model, store })
        }
        Meta::Mvrnn { config } => {
            let model = MvrnnModel::new(config).map_err(load)?;
            check_blocks(&expected(|s, r| model.init(s, r)), &store)?;
            Ok(SavedModel::Mvrnn { model, store })
        }
        Meta::Embedding { net, bank, labels } => {
            let points = store
                .get(INDEX_POINTS)
                .cloned()
                .ok_or_else(|| Error::Load("embedding index missing".into()))?;
            let net_want = expected(|s, r| net.init(s, r));
            let bank_want = expected(|s, r| bank.init(s, r));
            let mut net_store = ParameterStore::new();
            let mut bank_store = ParameterStore::new();
            let mut rest = ParameterStore::new();
            for (name, entry) in store.iter() {
                let dst = if net_want.contains(name) {
                    &mut net_store
                } else if bank_want.contains(name) {
                    &mut bank_store
                } else if name == INDEX_POINTS {
                    continue;
                } else {
                    &mut rest
                };
                dst.insert(name.clone(), entry.value.clone());
            }
            check_blocks(&net_want, &net_store)?;
            check_blocks(&bank_want, &bank_store)?;
            if let Some(extra) = rest.names().next() {
                return Err(Error::Load(format!("unexpected block {extra}")));
            }
            Ok(SavedModel::Embedding(PipelineModel {
                net,
                net_store,
                bank,
                bank_store,
                index: EmbeddingIndex::new(points, labels).map_err(load)?,
            }))
        }
    }
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    atomic_write(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    decode_model(&std::fs::read(path)?)
}
