//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "BCAN" | version u32 | config_len u64 | config JSON bytes
//! param_count u32
//!   per tensor: name_len u32 | name | extents 4 x u32 | data f32 x count
//! velocity_count u32
//!   per buffer: name_len u32 | name | len u32 | data f32 x len
//! iteration u64
//! rng_word_count u32 | words u64 x count
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"BCAN";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<(String, Shape, Vec<f32>)>,
    pub velocities: Vec<(String, Vec<f32>)>,
    pub iteration: u64,
    pub rng_words: Vec<u64>,
}

pub fn encode(store: &ParamStore, config_json: &str, iteration: u64, rng_words: &[u64]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());

    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        let value = store.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = value.shape();
        for extent in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let learnable: Vec<_> = store.ids().filter(|&id| store.kind(id).learnable()).collect();
    out.extend_from_slice(&(learnable.len() as u32).to_le_bytes());
    for id in learnable {
        let name = store.name(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let v = store.velocity(id);
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for &x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(rng_words.len() as u32).to_le_bytes());
    for &w in rng_words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    config_json: &str,
    iteration: u64,
    rng_words: &[u64],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(fs::write(path, encode(store, config_json, iteration, rng_words))?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not valid utf-8".into()))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected BCAN)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.u64()? as usize;
    let config_json = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config snapshot is not valid utf-8".into()))?;

    let param_count = r.u32()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name = r.string()?;
        let extents: Vec<usize> = (0..4)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        let data = r.f32_vec(shape.count())?;
        params.push((name, shape, data));
    }

    let velocity_count = r.u32()? as usize;
    let mut velocities = Vec::with_capacity(velocity_count);
    for _ in 0..velocity_count {
        let name = r.string()?;
        let len = r.u32()? as usize;
        velocities.push((name, r.f32_vec(len)?));
    }

    let iteration = r.u64()?;
    let rng_count = r.u32()? as usize;
    let rng_words = (0..rng_count).map(|_| r.u64()).collect::<Result<_>>()?;
    Ok(Checkpoint {
        config_json,
        params,
        velocities,
        iteration,
        rng_words,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Fill a freshly-registered store from a decoded checkpoint. Every stored
/// tensor must exist with a matching shape, and the store must not carry
/// parameters the checkpoint lacks.
pub fn apply_to_store(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors but the model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, shape, data) in &ckpt.params {
        let id = store
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.value(id).shape() != *shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {} but the model expects {}",
                shape,
                store.value(id).shape()
            )));
        }
        store.set_value(id, Tensor::new(*shape, data.clone())?)?;
    }
    for (name, data) in &ckpt.velocities {
        let id = store
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown velocity buffer `{name}`")))?;
        store.set_velocity(id, data.clone())?;
    }
    store.mark_initialized();
    Ok(())
}
