//! `LKDS` dataset container. Little-endian throughout:
//!
//! ```text
//! "LKDS" | version u32 = 1 | count u32
//! per sample: H u16 | W u16 | C u8 | label u8 | N_lm u16
//!             | C·H·W f32 pixels (channel-major) | N_lm×2 f32 coordinates
//! ```

use std::fs;
use std::path::Path;

use super::synth::{Label, Sample};
use crate::error::{Error, Result};
use crate::lakan::LandmarkSet;
use crate::ndiff::Tensor;

pub const MAGIC: &[u8; 4] = b"LKDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub fn encode(samples: &[Sample]) -> Result<Vec<u8>> {
    let count = u32::try_from(samples.len())
        .map_err(|_| Error::Validation(format!("{} samples exceed the u32 count field", samples.len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let Some(first) = samples.first() else {
        return Ok(out);
    };
    let geometry = |s: &Sample| (s.image.shape().to_vec(), s.landmarks.len());
    let reference = geometry(first);
    for (i, s) in samples.iter().enumerate() {
        if geometry(s) != reference {
            return Err(Error::Validation(format!(
                "sample {i} has image {:?} with {} landmarks; sample 0 has {:?} with {}",
                s.image.shape(),
                s.landmarks.len(),
                reference.0,
                reference.1
            )));
        }
        let shape = s.image.shape();
        if shape.len() != 3 {
            return Err(Error::Validation(format!("sample {i} image is not C×H×W: {shape:?}")));
        }
        let field = |v: usize, max: usize, what: &str| {
            if v > max {
                Err(Error::Validation(format!("sample {i}: {what} {v} does not fit its field")))
            } else {
                Ok(v)
            }
        };
        out.extend_from_slice(&(field(shape[1], u16::MAX as usize, "height")? as u16).to_le_bytes());
        out.extend_from_slice(&(field(shape[2], u16::MAX as usize, "width")? as u16).to_le_bytes());
        out.push(field(shape[0], u8::MAX as usize, "channels")? as u8);
        out.push(s.label.as_u8());
        out.extend_from_slice(&(field(s.landmarks.len(), u16::MAX as usize, "landmark count")? as u16).to_le_bytes());
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in s.landmarks.coords() {
            out.extend_from_slice(&c[0].to_le_bytes());
            out.extend_from_slice(&c[1].to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated payload: {what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"LKDS\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.pos as u64;
        let h = r.u16("height")? as usize;
        let w = r.u16("width")? as usize;
        let c = r.u8("channels")? as usize;
        let label_at = r.pos as u64;
        let label = r.u8("label")?;
        let label = Label::from_u8(label)
            .ok_or_else(|| Error::format(label_at, format!("sample {i}: label {label} is not 0 or 1")))?;
        let n_lm = r.u16("landmark count")? as usize;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::format(start, format!("sample {i}: empty image {c}×{h}×{w}")));
        }
        let pixels = r.f32s(c * h * w, "pixels")?;
        let coords_at = r.pos as u64;
        let coords = r.f32s(2 * n_lm, "landmarks")?;
        let landmarks = LandmarkSet::new(coords.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
            .map_err(|e| Error::format(coords_at, format!("sample {i}: {e}")))?;
        samples.push(Sample {
            image: Tensor::new([c, h, w], pixels)?,
            landmarks,
            label,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after {count} samples", bytes.len() - r.pos),
        ));
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(samples)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode(&fs::read(path)?)
}
