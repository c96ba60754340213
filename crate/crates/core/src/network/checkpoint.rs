//! Binary checkpoint files.
//!
//! ```text
//! "HMAM" | u32 version | u32 n | n bytes JSON ModelConfig
//! u32 count | count x entry          (parameters, sorted by name)
//! u32 count | count x entry          (buffers, sorted by name)
//!
//! entry = u32 name_len | name | u32 rank | rank x u32 dim | numel x f32
//! ```
//!
//! All integers and floats are little-endian. Optimizer state lives in a
//! separate file with magic `"HMOP"`: version, u64 step, the JSON
//! [`AdamWConfig`], then first and second moments as entry lists.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::optim::{AdamW, AdamWConfig};
use super::{HeroMamba, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMAM";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"HMOP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entries(out: &mut Vec<u8>, entries: &BTreeMap<String, Tensor<f32>>) {
    put_u32(out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn entries(&mut self, section: &str) -> Result<BTreeMap<String, Tensor<f32>>> {
        let count = self.u32(section)? as usize;
        let mut out = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let len = self.u32("entry name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "entry name")?)
                .map_err(|_| Error::Format(format!("{section}: entry name is not UTF-8")))?
                .to_string();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Format(format!("{section}: entries not sorted at {name:?}")));
            }
            let rank = self.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("{name}: rank {rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = self.u32("dimension")? as usize;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= self.remaining() / 4)
                    .ok_or_else(|| Error::Format(format!("{name}: tensor larger than file")))?;
                shape.push(d);
            }
            let raw = self.take(numel * 4, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.insert(name.clone(), Tensor::new(&shape, data)?);
            prev = Some(name);
        }
        Ok(out)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4, "magic")? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{what}: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn check_finite(entries: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    match entries.iter().find(|(_, t)| !t.all_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("{name} contains NaN or infinity"))),
        None => Ok(()),
    }
}

/// Serialises a model. Refuses stores holding non-finite values.
pub fn encode_checkpoint(config: &ModelConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    check_finite(store.params())?;
    check_finite(store.buffers())?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_entries(&mut out, store.params());
    put_entries(&mut out, store.buffers());
    Ok(out)
}

/// Parses a checkpoint and validates it against the network its config
/// describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let config: ModelConfig = r.json("model config")?;
    let params = r.entries("parameters")?;
    let buffers = r.entries("buffers")?;
    r.finish()?;
    check_finite(&params)?;
    check_finite(&buffers)?;
    let mut store = ParamStore::new();
    for (k, v) in params {
        store.insert(k, v);
    }
    for (k, v) in buffers {
        store.insert_buffer(k, v);
    }
    let model = HeroMamba::new(config.clone())?;
    precheck_large_tensors(&config, &store)?;
    model.check_store(&store)?;
    Ok(Checkpoint { config, store })
}

/// Verifies the largest expected tensors before the full structural check
/// allocates a reference parameter set, so a small file cannot request a
/// huge allocation through its config alone.
fn precheck_large_tensors(cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let w = cfg.widths();
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for i in 1..4 {
        expected.push((format!("enc{}.down.weight", i + 1), vec![w[i], w[i - 1], 3, 3]));
    }
    for (k, skip) in (0..4).rev().enumerate() {
        let out = if skip == 0 { w[0] } else { w[skip - 1] };
        expected.push((format!("dec{}.conv1.weight", k + 1), vec![out, 2 * w[skip], 3, 3]));
    }
    if cfg.use_ss2d {
        for (i, &wi) in w.iter().enumerate() {
            let di = cfg.expand * wi;
            expected.push((format!("enc{}.ss2d.dir0.dt_proj.weight", i + 1), vec![di, di, 1, 1]));
        }
    }
    for (name, shape) in expected {
        match store.get(&name) {
            Ok(t) if t.shape() == shape.as_slice() => {}
            Ok(t) => {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::Format(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

/// Writes through a temporary file so a failed write never replaces a good
/// checkpoint.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_optimizer(opt: &AdamW<f32>) -> Result<Vec<u8>> {
    check_finite(&opt.m)?;
    check_finite(&opt.v)?;
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&opt.step.to_le_bytes());
    let cfg = serde_json::to_vec(&opt.cfg)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_entries(&mut out, &opt.m);
    put_entries(&mut out, &opt.v);
    Ok(out)
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<AdamW<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(OPTIMIZER_MAGIC)?;
    let step = r.u64("step")?;
    let cfg: AdamWConfig = r.json("optimizer config")?;
    let m = r.entries("first moments")?;
    let v = r.entries("second moments")?;
    r.finish()?;
    if m.len() != v.len() || m.iter().zip(&v).any(|((ka, ta), (kb, tb))| ka != kb || ta.shape() != tb.shape()) {
        return Err(Error::Format("moment tables disagree".into()));
    }
    Ok(AdamW { cfg, step, m, v })
}

pub fn save_optimizer(path: &Path, opt: &AdamW<f32>) -> Result<()> {
    write_atomic(path, &encode_optimizer(opt)?)
}

pub fn load_optimizer(path: &Path) -> Result<AdamW<f32>> {
    decode_optimizer(&fs::read(path)?)
}
