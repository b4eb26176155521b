//! "CFCK" checkpoint files.
//!
//! Layout (little-endian):
//!   magic "CFCK" | version: u16 | count: u32 | count x entry
//!   entry: name_len: u16 | name bytes | rank: u8 | extents: u32 x rank
//!          | payload: f64 x prod(extents)
//!
//! Entries are written in sorted name order so identical parameter sets
//! serialize to identical bytes. The optimizer step counter rides along as
//! the rank-1 entry "meta/step".

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const STEP_KEY: &str = "meta/step";

pub fn serialize(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = params.iter().count() as u32 + 1;
    out.extend_from_slice(&count.to_le_bytes());
    let step_tensor = Tensor::scalar(params.step() as f64);
    let mut write_entry = |name: &str, value: &Tensor| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.shape().len() as u8);
        for &e in value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    // "meta/step" sorts among the entries; keep global sorted order.
    let mut emitted_step = false;
    for (name, p) in params.iter() {
        if !emitted_step && name > STEP_KEY {
            write_entry(STEP_KEY, &step_tensor);
            emitted_step = true;
        }
        write_entry(name, &p.value);
    }
    if !emitted_step {
        write_entry(STEP_KEY, &step_tensor);
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<ParamSet> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CFCK checkpoint".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported CFCK version {version}")));
    }
    let count = cur.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if name == STEP_KEY {
            params.set_step(data[0] as u64);
        } else {
            params.insert(&name, Tensor::new(shape, data)?);
        }
    }
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last checkpoint entry",
            cur.remaining()
        )));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, serialize(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    deserialize(&fs::read(path)?)
}

/// Byte cursor shared by the binary file formats.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
