//! Binary checkpoint format.
//!
//! `"LPYR"`, `u32` version, one ordering byte, then records until end of
//! file: `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32` dims, raw
//! `f32` data. All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ModelBundle, ModelConfig, Ordering, ParamGroup};
use crate::error::{CheckpointError, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LPYR";
const MAX_RANK: usize = 8;

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[bundle.ordering.to_byte()])?;
    for (name, t) in bundle.named_params() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint for the default architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    load_checkpoint_with(path, &ModelConfig::default())
}

/// Loads a checkpoint, requiring every entry of `config`'s architecture to be
/// present with a matching shape and nothing else.
pub fn load_checkpoint_with(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    Ok(parse(&bytes, config)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse(bytes: &[u8], config: &ModelConfig) -> Result<ModelBundle, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let flag = r.take(1)?[0];
    let ordering = Ordering::from_byte(flag).ok_or(CheckpointError::Ordering(flag))?;

    let mut entries: HashMap<String, Tensor> = HashMap::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims {shape:?}")))?;
        let raw = r.take(count.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
    }

    let mut bundle = ModelBundle::zeros(config, ordering);
    let names: Vec<String> = bundle.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(bundle.params_mut(ParamGroup::All)) {
        let found = entries
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.clone()))?;
        if found.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                found: found.shape().to_vec(),
            });
        }
        *slot = found;
    }
    if let Some(name) = entries.into_keys().min() {
        return Err(CheckpointError::UnexpectedEntry(name));
    }
    Ok(bundle)
}
