//! `.ckpt` container (little-endian):
//!
//! ```text
//! "XCTC" | u32 version | u32 count | count * tensor      parameters
//!        | u32 count | count * tensor                    optimizer state
//!        | u32 len | len bytes of JSON                   run metadata
//! tensor = u16 name_len | name | u8 rank | u32 * rank dims | f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::format::{push_f32s, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

fn write_section(out: &mut Vec<u8>, entries: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        out.extend_from_slice(&u16::try_from(bytes.len()).expect("tensor name fits u16").to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        push_f32s(out, t.data());
    }
}

fn read_section(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.u32("tensor_count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::format("name", e.to_string()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(Error::format("rank", format!("{name}: rank {rank} exceeds maximum")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dims", format!("{name}: element count overflows")))?;
        let data = r.f32s(n, "data")?;
        entries.push((name, Tensor::new(dims, data)?));
    }
    Ok(entries)
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_section(&mut out, &self.params);
        write_section(&mut out, &self.optimizer);
        let json = serde_json::to_vec(&self.meta).expect("json values serialize");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let v = r.u32("version")?;
        if v != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported checkpoint version {v}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let params = read_section(&mut r)?;
        let optimizer = read_section(&mut r)?;
        let len = r.u32("meta_len")? as usize;
        let meta = serde_json::from_slice(r.take(len, "meta")?)
            .map_err(|e| Error::format("meta", e.to_string()))?;
        r.finish()?;
        Ok(Self {
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
