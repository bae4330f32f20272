//! Checkpoint archive.
//!
//! Layout: magic `UMSC`, little-endian `u32` entry count, then per entry a
//! `u32` name length, the UTF-8 name, a `u64` payload length and the payload.
//! Entries:
//!
//! * `config`: the run's TOML config text,
//! * `meta`: JSON [`CheckpointMeta`],
//! * `param/<layer>.weight|bias`: `UMS1` float32 arrays (rows = output channels),
//! * `opt/<layer>.weight|bias`: RMSprop running averages, same shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::optim::RmsProp;
use crate::datasets::RawArray;
use crate::error::{Error, Result};
use crate::model::{Model, ParamLayout};
use crate::scalar::Scalar;

const ARCHIVE_MAGIC: &[u8; 4] = b"UMSC";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub global_step: usize,
    pub config_hash: String,
    /// Wall-clock training seconds summed over `timed_epochs` epochs.
    pub train_seconds: f64,
    pub timed_epochs: usize,
}

impl CheckpointMeta {
    pub fn minutes_per_epoch(&self) -> Option<f64> {
        (self.timed_epochs > 0).then(|| self.train_seconds / 60.0 / self.timed_epochs as f64)
    }
}

pub struct Checkpoint<T> {
    pub config_text: String,
    pub config: Config,
    pub meta: CheckpointMeta,
    pub model: Model<T>,
    pub optimizer_state: Vec<T>,
}

fn array_rows(name: &str, layout: &ParamLayout) -> usize {
    let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name);
    layout
        .layers()
        .iter()
        .find(|l| l.name == layer)
        .map(|l| l.out_ch)
        .unwrap_or(1)
}

fn encode_slices<T: Scalar>(prefix: &str, values: &[T], layout: &ParamLayout, out: &mut Vec<(String, Vec<u8>)>) {
    for (name, offset, len) in layout.arrays() {
        let rows = array_rows(&name, layout);
        let raw = RawArray::Float32 {
            height: rows,
            width: len / rows,
            data: values[offset..offset + len].iter().map(|v| v.as_f64() as f32).collect(),
        };
        out.push((format!("{prefix}/{name}"), raw.encode()));
    }
}

/// Serializes a checkpoint. Parameters are stored as float32.
pub fn encode_checkpoint<T: Scalar>(config_text: &str, meta: &CheckpointMeta, model: &Model<T>, opt: &RmsProp<T>) -> Vec<u8> {
    let mut entries = vec![
        ("config".to_owned(), config_text.as_bytes().to_vec()),
        ("meta".to_owned(), serde_json::to_vec(meta).expect("meta serializes")),
    ];
    encode_slices("param", model.params(), model.layout(), &mut entries);
    encode_slices("opt", opt.state(), model.layout(), &mut entries);

    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, payload) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("checkpoint truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, &[u8], u64)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != ARCHIVE_MAGIC {
        return Err(Error::format(0, "not a checkpoint archive (bad magic)"));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at, "entry name is not UTF-8"))?
            .to_owned();
        let plen = r.u64()? as usize;
        let start = r.pos as u64;
        entries.push((name, r.take(plen)?, start));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last entry"));
    }
    Ok(entries)
}

fn gather<T: Scalar>(prefix: &str, entries: &[(String, &[u8], u64)], layout: &ParamLayout) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); layout.total()];
    for (name, offset, len) in layout.arrays() {
        let key = format!("{prefix}/{name}");
        let (_, payload, at) = entries
            .iter()
            .find(|(n, _, _)| *n == key)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no entry {key:?}")))?;
        match RawArray::decode(payload).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(at + offset, format!("{key}: {message}")),
            other => other,
        })? {
            RawArray::Float32 { data, .. } if data.len() == len => {
                for (dst, v) in out[offset..offset + len].iter_mut().zip(data) {
                    *dst = T::of(v as f64);
                }
            }
            _ => return Err(Error::format(*at, format!("{key}: expected {len} float32 values"))),
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let entries = decode_entries(bytes)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, p, _)| *p)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no {name:?} entry")))
    };
    let config_text = String::from_utf8(find("config")?.to_vec()).map_err(|_| Error::format(0, "config is not UTF-8"))?;
    let config = Config::parse(&config_text)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(find("meta")?).map_err(|e| Error::format(0, format!("bad meta entry: {e}")))?;
    config.model.validate()?;
    let layout = ParamLayout::for_config(&config.model);
    let params = gather::<T>("param", &entries, &layout)?;
    let optimizer_state = gather::<T>("opt", &entries, &layout)?;
    let model = Model::from_params(config.model.clone(), params)?;
    Ok(Checkpoint {
        config_text,
        config,
        meta,
        model,
        optimizer_state,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config_text: &str, meta: &CheckpointMeta, model: &Model<T>, opt: &RmsProp<T>) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode_checkpoint(config_text, meta, model, opt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
