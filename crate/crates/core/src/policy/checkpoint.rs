//! Checkpoint directories.
//!
//! `params.bin` layout, all integers little-endian:
//! magic `STPO`, format version u32, tensor count u32, then per tensor
//! name length u16, UTF-8 name, rank u8, dims u32 each, and the f64 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Transformer};
use super::train::EpochLog;
use super::{PolicyMode, PolicyModel, Tokenizer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STPO";
const VERSION: u32 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";

/// A named tensor view into a flat buffer.
pub struct Tensor<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

pub fn encode_tensors(tensors: &[Tensor<'_>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Owned decoded tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated parameter file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<OwnedTensor>> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(OwnedTensor { name, shape, data });
    }
    if r.at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct PolicyConfigFile {
    model: ModelConfig,
    mode: PolicyMode,
}

/// Serializes the transformer's parameters in layout order.
pub fn transformer_bytes(net: &Transformer) -> Vec<u8> {
    let tensors: Vec<Tensor<'_>> = net
        .index()
        .tensors
        .iter()
        .map(|(name, off, shape)| Tensor {
            name,
            shape,
            data: &net.params[*off..off + shape.iter().product::<usize>()],
        })
        .collect();
    encode_tensors(&tensors)
}

pub fn transformer_from_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Transformer> {
    let tensors = decode_tensors(bytes)?;
    let index = super::model::ParamIndex::new(&config);
    if tensors.len() != index.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            index.tensors.len(),
            tensors.len()
        )));
    }
    let mut params = Vec::with_capacity(index.total);
    for (t, (name, _, shape)) in tensors.iter().zip(&index.tensors) {
        if &t.name != name || &t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                t.name, t.shape, name, shape
            )));
        }
        params.extend_from_slice(&t.data);
    }
    Transformer::from_params(config, params)
}

/// Writes `params.bin`, `tokenizer.json`, `config.json` and `train_log.jsonl`.
pub fn save_policy(dir: &Path, model: &PolicyModel, log: &[EpochLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(PARAMS_FILE), &transformer_bytes(&model.transformer))?;
    write_json(&dir.join(TOKENIZER_FILE), &model.tokenizer)?;
    write_json(
        &dir.join(CONFIG_FILE),
        &PolicyConfigFile {
            model: model.transformer.config.clone(),
            mode: model.mode,
        },
    )?;
    crate::paraphraser::write_jsonl(&dir.join(LOG_FILE), log)
}

pub fn load_policy(dir: &Path) -> Result<PolicyModel> {
    let cfg: PolicyConfigFile = read_json(&dir.join(CONFIG_FILE))?;
    let tokenizer: Tokenizer = read_json(&dir.join(TOKENIZER_FILE))?;
    if tokenizer.vocab_size() != cfg.model.vocab_size {
        return Err(Error::Checkpoint("tokenizer does not match model vocabulary".into()));
    }
    let transformer = transformer_from_bytes(cfg.model, &read_file(&dir.join(PARAMS_FILE))?)?;
    if !transformer.all_finite() {
        return Err(Error::Checkpoint("non-finite parameters".into()));
    }
    Ok(PolicyModel {
        transformer,
        tokenizer,
        mode: cfg.mode,
    })
}
