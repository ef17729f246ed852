//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `PDETCKPT`, `u32` LE format version, `u64` LE header
//! length, a UTF-8 JSON header, then every array of the header's `arrays`
//! list in order as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::PromptDetModel;
use crate::nn::ParamGroup;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 8] = b"PDETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    /// `base`, `prompter` or `optimizer`.
    pub group: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    /// Number of completed epochs.
    epoch: usize,
    /// Per-parameter Adam step counts, present in resume checkpoints.
    adam_steps: Option<Vec<u64>>,
    arrays: Vec<ArrayMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: PromptDetModel,
    pub optimizer: Option<AdamW>,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Base => "base",
        ParamGroup::Prompter => "prompter",
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint".into(), reason: reason.into() }
}

pub fn save(path: &Path, config: &TrainConfig, epoch: usize, model: &PromptDetModel, optimizer: Option<&AdamW>) -> Result<()> {
    let mut arrays = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (id, e) in model.store.ids().zip(model.store.entries()) {
        arrays.push(ArrayMeta { name: e.name.clone(), group: group_name(e.group).into(), shape: e.value.shape().to_vec() });
        tensors.push(model.store.get(id));
    }
    if let Some(opt) = optimizer {
        for (prefix, list) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
            for (e, t) in model.store.entries().iter().zip(list) {
                arrays.push(ArrayMeta { name: format!("{prefix}/{}", e.name), group: "optimizer".into(), shape: t.shape().to_vec() });
                tensors.push(t);
            }
        }
    }
    let header = Header { config: config.clone(), epoch, adam_steps: optimizer.map(|o| o.steps.clone()), arrays };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * tensors.iter().map(|t| t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp).and_then(|mut f| f.write_all(&buf).and_then(|_| f.sync_all())).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).at(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version} is not supported")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;
    let mut data = &bytes[20 + hlen..];
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad("truncated data"));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        Ok(Tensor::new(shape.to_vec(), values))
    };

    let cfg = &header.config;
    let mut model = PromptDetModel::new(cfg.mode, cfg.grid.clone(), cfg.world.n_classes(), cfg.seed);
    let n = model.store.len();
    let expected = n * if header.adam_steps.is_some() { 3 } else { 1 };
    if header.arrays.len() != expected {
        return Err(bad(format!("expected {expected} arrays, found {}", header.arrays.len())));
    }
    for (i, meta) in header.arrays[..n].iter().enumerate() {
        let id = model.store.find(&meta.name).ok_or_else(|| bad(format!("unknown parameter `{}`", meta.name)))?;
        if id.index() != i || model.store.get(id).shape() != meta.shape.as_slice() {
            return Err(bad(format!("parameter `{}` does not match the architecture", meta.name)));
        }
        *model.store.get_mut(id) = read(&meta.shape)?;
    }
    let optimizer = match header.adam_steps {
        Some(steps) => {
            let mut state = Vec::with_capacity(2 * n);
            for meta in &header.arrays[n..] {
                state.push(read(&meta.shape)?);
            }
            let v = state.split_off(n);
            Some(AdamW { m: state, v, steps })
        }
        None => None,
    };
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { config: header.config, epoch: header.epoch, model, optimizer })
}
