//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TGCVAE\0\0"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of CvaeConfig
//! step       u64
//! count      u32      number of tensors
//! tensor     u16 name length, name, u32 rows, u32 cols, rows*cols f64
//! ```

use std::path::Path;

use crate::model::{CvaeConfig, CvaeModel};
use crate::tensor::Mat;
use crate::CvaeError;

pub const MAGIC: &[u8; 8] = b"TGCVAE\0\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &CvaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&(model.params.values.len() as u32).to_le_bytes());
    for (name, m) in model.params.names.iter().zip(&model.params.values) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CvaeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CvaeError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CvaeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CvaeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CvaeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks every tensor against the layout its
/// config implies.
pub fn from_bytes(bytes: &[u8]) -> Result<CvaeModel, CvaeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CvaeError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CvaeError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: CvaeConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CvaeError::Checkpoint(format!("config: {e}")))?;
    let step = r.u64()?;
    let mut model = CvaeModel::new(config)?;
    model.step = step;
    let count = r.u32()? as usize;
    if count != model.params.values.len() {
        return Err(CvaeError::Checkpoint(format!(
            "{count} tensors, config implies {}",
            model.params.values.len()
        )));
    }
    for i in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CvaeError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        if name != model.params.names[i] {
            return Err(CvaeError::Checkpoint(format!(
                "tensor {i} is {name}, expected {}",
                model.params.names[i]
            )));
        }
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != model.params.values[i].shape() {
            return Err(CvaeError::Checkpoint(format!("tensor {name} has shape {rows}x{cols}")));
        }
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        model.params.values[i] = Mat::from_vec(rows, cols, data);
    }
    if r.pos != bytes.len() {
        return Err(CvaeError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &CvaeModel, path: &Path) -> Result<(), CvaeError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CvaeModel, CvaeError> {
    from_bytes(&std::fs::read(path)?)
}
