//! Model files: `<name>` holds the binary parameters, `<name>.meta.json` a
//! readable copy of the header plus the filter-bank channel layout.
//!
//! Binary layout (little endian): 8-byte magic, then `u32` version, token
//! width `d`, channel count `K`, heads `H`, layer count; then every block's
//! tensors in the order `wq wk wv wo w1 w2 scale_attn scale_ff`, each as
//! row-major `f64`; then the `K` raw filter gains as `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attention::{AttentionParams, Block, LAYERS};
use crate::eqfeatures::{ChannelSpec, FilterBank};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"SPAERMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: AttentionParams,
    pub bank: FilterBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub magic: String,
    pub version: u32,
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub layers: usize,
    pub channels: Vec<ChannelSpec>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

impl Model {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            magic: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
            version: MODEL_VERSION,
            d: self.params.d,
            k: self.bank.len(),
            heads: self.params.heads,
            layers: self.params.blocks.len(),
            channels: self.bank.channels.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta();
        let mut out = Vec::with_capacity(28 + 8 * (self.params.num_params() + meta.k));
        out.extend_from_slice(MODEL_MAGIC);
        for v in [MODEL_VERSION, meta.d as u32, meta.k as u32, meta.heads as u32, meta.layers as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.params.tensors() {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        for g in &self.bank.raw_gains {
            out.extend_from_slice(&g.to_le_bytes());
        }
        out
    }

    /// Decodes a binary blob; `channels` supplies the filter layout the
    /// gains belong to.
    pub fn from_bytes(bytes: &[u8], channels: Vec<ChannelSpec>) -> std::result::Result<Self, String> {
        if bytes.len() < 28 || &bytes[..8] != MODEL_MAGIC {
            return Err("not a model file".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (version, d, k, heads, layers) = (word(0), word(1), word(2), word(3), word(4));
        if version != MODEL_VERSION as usize {
            return Err(format!("unsupported model version {version}"));
        }
        if layers != LAYERS || d != 3 * k || k != channels.len() {
            return Err(format!(
                "inconsistent header: d={d}, K={k}, layers={layers}, {} channels",
                channels.len()
            ));
        }
        let mut params = AttentionParams {
            d,
            heads,
            blocks: (0..layers).map(|_| Block::zeros(d)).collect(),
        };
        let expected = 28 + 8 * (params.num_params() + k);
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        let mut floats = bytes[28..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for t in params.tensors_mut() {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    t[(r, c)] = floats.next().unwrap();
                }
            }
        }
        let gains: Vec<f64> = floats.collect();
        params.validate().map_err(|e| e.to_string())?;
        let bank = FilterBank::new(channels, gains).map_err(|e| e.to_string())?;
        Ok(Self { params, bank })
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&model.meta()).expect("meta serializes");
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = Model::from_bytes(&bytes, meta.channels.clone()).map_err(|r| Error::format(path, r))?;
    if model.meta() != meta {
        return Err(Error::format(&mp, "metadata does not match the binary header"));
    }
    Ok(model)
}
