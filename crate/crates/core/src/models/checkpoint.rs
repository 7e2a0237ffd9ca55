//! Little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! "DVGN" | version u32 | z_dim u32 | arch hash u64
//! | arch text length u32 | arch text (UTF-8)
//! | record count u32
//! | per record: name length u32 | name | rank u32 | extents u32×rank | values f32×numel
//! ```

use std::fs;
use std::path::Path;

use super::arch::ArchSpec;
use super::hybrid::HybridModel;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVGN";
pub const VERSION: u32 = 1;

fn state(model: &HybridModel) -> Vec<(String, &Tensor)> {
    let mut s = model.encoder.state();
    s.extend(model.generator.state());
    s.extend(model.discriminator.state());
    s
}

fn state_mut(model: &mut HybridModel) -> Vec<(String, &mut Tensor)> {
    let mut s = model.encoder.state_mut();
    s.extend(model.generator.state_mut());
    s.extend(model.discriminator.state_mut());
    s
}

/// Serializes the model. Values are written as `f32`; models keep their state
/// on the `f32` grid, so save/load is exact.
pub fn to_bytes(model: &HybridModel) -> Vec<u8> {
    let mut out = Vec::new();
    let arch = model.arch.to_text();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.z_dim() as u32).to_le_bytes());
    out.extend_from_slice(&model.arch.hash().to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    let records = state(model);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    version: u32,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            version: self.version,
            detail: format!("{} (byte offset {})", detail.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("invalid UTF-8"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<HybridModel> {
    let mut r = Reader { bytes, pos: 0, version: 0 };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    r.version = r.u32()?;
    if r.version != VERSION {
        return Err(r.fail(format!("unsupported version, this build reads version {VERSION}")));
    }
    let z_dim = r.u32()? as usize;
    let hash = r.u64()?;
    let arch_text = r.string()?;
    let arch = ArchSpec::from_text(&arch_text).map_err(|e| r.fail(e.to_string()))?;
    if arch.hash() != hash {
        return Err(r.fail("architecture hash does not match its description"));
    }
    if arch.z_dim != z_dim {
        return Err(r.fail(format!("z_dim {z_dim} disagrees with architecture ({})", arch.z_dim)));
    }
    let mut model = HybridModel::new(arch, 0)?;
    let count = r.u32()? as usize;
    let version = r.version;
    let slots = state_mut(&mut model);
    if count != slots.len() {
        return Err(Error::Checkpoint {
            version,
            detail: format!("expected {} records, found {count}", slots.len()),
        });
    }
    for (name, slot) in slots {
        let got = r.string()?;
        if got != name {
            return Err(r.fail(format!("expected record `{name}`, found `{got}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(r.fail(format!("record `{name}` has shape {shape:?}, expected {:?}", slot.shape())));
        }
        let raw = r.take(4 * slot.numel())?;
        for (v, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the last record"));
    }
    Ok(model)
}

pub fn save(model: &HybridModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HybridModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
