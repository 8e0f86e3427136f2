//! Versioned binary checkpoints with integrity checking.
//!
//! Layout: magic `TNRF`, version `u32`, SHA-256 checksum of the payload,
//! then the payload: step counter, RNG seed and position, the training
//! config as TOML text, and named parameter blocks (name, dtype flag,
//! count, raw little-endian scalars). Loading restores training bit-exactly
//! in deterministic mode.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::adam::AdamMoments;
use super::{TrainConfig, TrainState};
use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::fields::{FieldModel, LatentPair};

pub const MAGIC: &[u8; 4] = b"TNRF";
pub const VERSION: u32 = 1;

fn push_block<T: Real>(out: &mut Vec<u8>, name: &str, values: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE_FLAG);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        if T::DTYPE_FLAG == 0 {
            out.extend_from_slice(&(Real::to_f64(*v) as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&Real::to_f64(*v).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

fn read_block<T: Real>(r: &mut Reader) -> Result<(String, Vec<T>)> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Checkpoint("block name is not valid UTF-8".into()))?
        .to_string();
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE_FLAG {
        return Err(Error::Checkpoint(format!(
            "block `{name}` has dtype flag {dtype}, expected {}",
            T::DTYPE_FLAG
        )));
    }
    let count = r.u64()? as usize;
    let width = if dtype == 0 { 4 } else { 8 };
    let raw = r.take(count * width)?;
    let values = raw
        .chunks_exact(width)
        .map(|c| {
            if dtype == 0 {
                T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::from_f64(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect();
    Ok((name, values))
}

/// Serialize the complete training state to `path`.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&state.step.to_le_bytes());
    payload.extend_from_slice(&state.rng.get_seed());
    payload.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let config = toml::to_string(&state.config).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    payload.extend_from_slice(&(config.len() as u32).to_le_bytes());
    payload.extend_from_slice(config.as_bytes());

    let mut blocks: Vec<(String, Vec<T>)> = Vec::new();
    state.model.visit_params(&mut |p| {
        blocks.push((format!("param.{}", p.name), p.values.clone()));
    });
    for pair in &state.latents {
        blocks.push((format!("param.{}", pair.shape_code.name), pair.shape_code.values.clone()));
        blocks.push((
            format!("param.{}", pair.appearance_code.name),
            pair.appearance_code.values.clone(),
        ));
    }
    for (name, m) in &state.moments {
        blocks.push((format!("adam_m.{name}"), m.m.clone()));
        blocks.push((format!("adam_v.{name}"), m.v.clone()));
        blocks.push((format!("adam_t.{name}"), vec![T::from_f64(m.step as f64)]));
    }
    payload.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in &blocks {
        push_block(&mut payload, name, values);
    }

    let checksum = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(payload.len() + 40);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&checksum);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn verified_payload(data: &[u8]) -> Result<&[u8]> {
    if data.len() < 40 {
        return Err(Error::Checkpoint("file too short for a checkpoint header".into()));
    }
    if &data[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let stored: [u8; 32] = data[8..40].try_into().unwrap();
    let payload = &data[40..];
    let computed: [u8; 32] = Sha256::digest(payload).into();
    if stored != computed {
        return Err(Error::Checkpoint("checksum mismatch, file truncated or corrupt".into()));
    }
    Ok(payload)
}

/// Read only the embedded training config, without reconstructing the
/// model; useful to learn the numeric precision before a typed load.
pub fn peek_config(path: &Path) -> Result<TrainConfig> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = verified_payload(&data)?;
    let mut r = Reader { data: payload, pos: 0 };
    r.u64()?;
    r.take(32)?;
    r.u128()?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not valid UTF-8".into()))?;
    toml::from_str(config_text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Restore a training state saved by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = verified_payload(&data)?;
    let mut r = Reader { data: payload, pos: 0 };
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not valid UTF-8".into()))?;
    let config: TrainConfig = toml::from_str(config_text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let block_count = r.u32()? as usize;
    let mut blocks: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for _ in 0..block_count {
        let (name, values) = read_block(&mut r)?;
        blocks.insert(name, values);
    }

    let take = |blocks: &mut BTreeMap<String, Vec<T>>, name: &str, expected: usize| -> Result<Vec<T>> {
        let values = blocks
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "block `{name}` has {} scalars, expected {expected}",
                values.len()
            )));
        }
        Ok(values)
    };

    // rebuild structures at the configured shapes, then overwrite values
    let mut shape_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = FieldModel::new(config.model.clone(), &mut shape_rng);
    let mut restore_err = None;
    model.visit_params_mut(&mut |group| {
        if restore_err.is_some() {
            return;
        }
        match take(&mut blocks, &format!("param.{}", group.name), group.values.len()) {
            Ok(values) => group.values = values,
            Err(e) => restore_err = Some(e),
        }
    });
    if let Some(e) = restore_err {
        return Err(e);
    }

    let latent_count = blocks
        .keys()
        .filter(|k| k.starts_with("param.latent.") && k.ends_with(".shape"))
        .count();
    let mut latents = Vec::with_capacity(latent_count);
    for i in 0..latent_count {
        let shape = take(&mut blocks, &format!("param.latent.{i}.shape"), config.model.shape_dim)?;
        let appearance = take(
            &mut blocks,
            &format!("param.latent.{i}.appearance"),
            config.model.appearance_dim,
        )?;
        latents.push(LatentPair::new(i, shape, appearance));
    }

    let mut moments = BTreeMap::new();
    let moment_names: Vec<String> = blocks
        .keys()
        .filter_map(|k| k.strip_prefix("adam_m.").map(str::to_string))
        .collect();
    for name in moment_names {
        let m = blocks
            .remove(&format!("adam_m.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing block `adam_m.{name}`")))?;
        let v = take(&mut blocks, &format!("adam_v.{name}"), m.len())?;
        let t = take(&mut blocks, &format!("adam_t.{name}"), 1)?;
        moments.insert(
            name,
            AdamMoments {
                m,
                v,
                step: Real::to_f64(t[0]) as u64,
            },
        );
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block `{extra}`")));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        config,
        model,
        latents,
        moments,
        step,
        rng,
    })
}
