//! Binary checkpoint format:
//! `"ASYM"`, `u32` version, `u64` header length, JSON header, then the raw
//! little-endian `f32` data of every tensor listed in the header, in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use asymgan_autograd::{Adam, AdamConfig, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::pool::ImagePool;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nets::NetHandle;

pub const MAGIC: &[u8; 4] = b"ASYM";
pub const FORMAT_VERSION: u32 = 1;

/// Mutable training state beyond the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// One optimizer per generator-side network (`G`, `F`, `E`).
    pub optim_gen: Vec<Adam<S>>,
    /// One optimizer per discriminator (`D_X`, `D_Y`, `D_Z`).
    pub optim_disc: Vec<Adam<S>>,
    pub pool_x: ImagePool<S>,
    pub pool_y: ImagePool<S>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub epoch: u64,
    pub config: TrainConfig,
    pub bundle: ModelBundle<S>,
    pub state: TrainState<S>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    epoch: u64,
    config: TrainConfig,
    rng: ChaCha8Rng,
    optim_gen_steps: Vec<u64>,
    optim_disc_steps: Vec<u64>,
    pool_capacity: usize,
    pool_x_len: usize,
    pool_y_len: usize,
    tensors: Vec<TensorMeta>,
}

/// Every stored tensor in file order.
fn entries<S: Scalar>(c: &Checkpoint<S>) -> Vec<(String, &Tensor<S>)> {
    let mut out = Vec::new();
    for (prefix, net) in c.bundle.all_nets() {
        for (name, t) in net.params().iter() {
            out.push((format!("{prefix}/{name}"), t));
        }
    }
    for (label, nets, optims) in [
        ("opt", c.bundle.generator_nets(), &c.state.optim_gen),
        ("opt", c.bundle.discriminator_nets(), &c.state.optim_disc),
    ] {
        for ((net, _), adam) in nets.iter().zip(optims.iter()) {
            for (moment, list) in [("m", &adam.first), ("v", &adam.second)] {
                for (i, t) in list.iter().enumerate() {
                    out.push((format!("{label}/{net}/{moment}/{i}"), t));
                }
            }
        }
    }
    for (label, pool) in [("pool_x", &c.state.pool_x), ("pool_y", &c.state.pool_y)] {
        for (i, t) in pool.images().iter().enumerate() {
            out.push((format!("{label}/{i}"), t));
        }
    }
    out
}

pub fn encode_checkpoint<S: Scalar>(c: &Checkpoint<S>) -> Vec<u8> {
    let list = entries(c);
    let header = Header {
        step: c.state.step,
        epoch: c.epoch,
        config: c.config.clone(),
        rng: c.state.rng.clone(),
        optim_gen_steps: c.state.optim_gen.iter().map(|a| a.step).collect(),
        optim_disc_steps: c.state.optim_disc.iter().map(|a| a.step).collect(),
        pool_capacity: c.state.pool_x.capacity(),
        pool_x_len: c.state.pool_x.len(),
        pool_y_len: c.state.pool_y.len(),
        tensors: list
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let numel: usize = list.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * numel);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in list {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint<S: Scalar>(c: &Checkpoint<S>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().unwrap());
    let header_at = cur.pos;
    let len = usize::try_from(len).map_err(|_| format_err(8, "header length overflow"))?;
    let raw = cur.take(len, "header")?;
    let header: Header =
        serde_json::from_slice(raw).map_err(|e| format_err(header_at, format!("bad header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        if meta.dtype != "f32" {
            return Err(format_err(cur.pos, format!("{}: unsupported dtype {}", meta.name, meta.dtype)));
        }
        let numel: usize = meta.shape.iter().product();
        let at = cur.pos;
        let blob = cur.take(numel * 4, &format!("tensor {}", meta.name))?;
        let data = blob
            .chunks_exact(4)
            .map(|b| S::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(meta.shape.clone(), data).map_err(|e| format_err(at, e.to_string()))?;
        tensors.push((meta.name.clone(), t));
    }
    if cur.pos != bytes.len() {
        return Err(format_err(cur.pos, "trailing bytes after last tensor"));
    }
    assemble(header, tensors)
}

struct Queue<S> {
    items: std::vec::IntoIter<(String, Tensor<S>)>,
}

impl<S: Scalar> Queue<S> {
    fn next(&mut self, expected: &str, shape: Option<&[usize]>) -> Result<Tensor<S>> {
        let (name, t) = self
            .items
            .next()
            .ok_or_else(|| format_err(0, format!("missing tensor {expected}")))?;
        if name != expected || shape.is_some_and(|s| s != t.shape()) {
            return Err(format_err(
                0,
                format!("expected {expected} {shape:?}, found {name} {:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    fn optims(&mut self, nets: Vec<(&'static str, &NetHandle<S>)>, steps: &[u64]) -> Result<Vec<Adam<S>>> {
        if steps.len() != nets.len() {
            return Err(format_err(0, "optimizer count mismatch"));
        }
        let mut out = Vec::new();
        for ((label, net), &step) in nets.into_iter().zip(steps) {
            let mut adam = Adam::new(AdamConfig::default(), net.params().values());
            adam.step = step;
            for (moment, slot) in [("m", &mut adam.first), ("v", &mut adam.second)] {
                for (i, t) in slot.iter_mut().enumerate() {
                    *t = self.next(&format!("opt/{label}/{moment}/{i}"), Some(t.shape()))?;
                }
            }
            out.push(adam);
        }
        Ok(out)
    }

    fn pool(&mut self, label: &str, capacity: usize, n: usize) -> Result<ImagePool<S>> {
        let images = (0..n)
            .map(|i| self.next(&format!("{label}/{i}"), None))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImagePool::from_images(capacity, images))
    }
}

fn assemble<S: Scalar>(header: Header, tensors: Vec<(String, Tensor<S>)>) -> Result<Checkpoint<S>> {
    let config = header.config;
    config.validate()?;
    let mut bundle = ModelBundle::<S>::init(config.architecture(), config.seed)?;
    let mut q = Queue {
        items: tensors.into_iter(),
    };
    for (prefix, net) in bundle.all_nets_mut() {
        let names: Vec<String> = net.params().names().to_vec();
        for (name, slot) in names.iter().zip(net.params_mut().values_mut()) {
            *slot = q.next(&format!("{prefix}/{name}"), Some(slot.shape()))?;
        }
    }
    let optim_gen = q.optims(bundle.generator_nets(), &header.optim_gen_steps)?;
    let optim_disc = q.optims(bundle.discriminator_nets(), &header.optim_disc_steps)?;
    let pool_x = q.pool("pool_x", header.pool_capacity, header.pool_x_len)?;
    let pool_y = q.pool("pool_y", header.pool_capacity, header.pool_y_len)?;
    if q.items.next().is_some() {
        return Err(format_err(0, "unexpected extra tensors"));
    }
    Ok(Checkpoint {
        epoch: header.epoch,
        config,
        bundle,
        state: TrainState {
            step: header.step,
            rng: header.rng,
            optim_gen,
            optim_disc,
            pool_x,
            pool_y,
        },
    })
}
