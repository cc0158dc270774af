//! `LKCK` parameter container. Little-endian throughout:
//!
//! ```text
//! "LKCK" | version u32 = 1 | param_count u32
//! per parameter: name_len u16 | UTF-8 name | rank u8 | dims u32×rank | f32 data
//! CRC-64/XZ u64 over every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"LKCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CHECKSUM.checksum(bytes)
}

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        if !t.is_finite() {
            return Err(Error::Validation(format!("parameter `{name}` is not finite")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Validation(format!("parameter name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::format(0, format!("file of {} bytes is shorter than a header", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"LKCK\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("parameter count")?;
    let mut out: Vec<(String, Tensor<f32>)> = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::format(at, format!("duplicate parameter `{name}`")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4, "parameter data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != payload.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `entries`; nothing is changed
/// unless the whole set fits.
pub fn restore(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut by_name: HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    let mut updates = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks parameter `{name}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: store.get(id).shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        updates.push((id, t));
    }
    if let Some(name) = by_name.keys().min() {
        return Err(Error::format(0, format!("unknown parameter `{name}` in checkpoint")));
    }
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load_checkpoint(store: &mut ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    restore(store, decode(&bytes)?)
}
