//! Bit-exact binary checkpoint format.
//!
//! Layout: magic `QAVT`, format version u32 LE, entry count u32 LE, then
//! per entry: name length u16 LE, UTF-8 name, dtype byte (0 = f32,
//! 1 = f64), rank u8, dims u32 LE each, raw little-endian scalars. The
//! file ends with a CRC32 (IEEE) of all prior bytes, verified on load.
//! Optimizer state rides along under the reserved `opt.` name prefix so
//! training is resumable at checkpoint boundaries.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::QaVitModel;
use crate::tensor::{Dtype, Element, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"QAVT";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Scalars widened to f64 (exact for both supported dtypes).
    pub data: Vec<f64>,
}

fn push_scalar(out: &mut Vec<u8>, dtype: Dtype, v: f64) {
    match dtype {
        Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

/// Serialize entries in the given order.
pub fn checkpoint_bytes(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("parameter name too long: {}", e.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype.tag());
        if e.shape.len() > u8::MAX as usize {
            return Err(Error::Config("tensor rank exceeds format limit".into()));
        }
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            push_scalar(&mut out, e.dtype, v);
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse and CRC-verify a checkpoint image.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Integrity("checkpoint too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Integrity(format!("CRC mismatch: stored {:08x}, computed {:08x}", stored, actual)));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {}", version)));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("entry name is not UTF-8".into()))?;
        let dtype = Dtype::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Integrity("unknown dtype tag".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match dtype {
            Dtype::F32 => {
                let raw = r.take(4 * numel)?;
                for c in raw.chunks_exact(4) {
                    data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                }
            }
            Dtype::F64 => {
                let raw = r.take(8 * numel)?;
                for c in raw.chunks_exact(8) {
                    data.push(f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]));
                }
            }
        }
        entries.push(CheckpointEntry { name, dtype, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

fn tensor_entry<T: Element>(name: &str, t: &Tensor<T>) -> CheckpointEntry {
    CheckpointEntry {
        name: name.to_string(),
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| v.to_f64()).collect(),
    }
}

/// Every registry parameter (in registry order) plus optional optimizer
/// moments and the step counter under the `opt.` prefix.
pub fn model_entries<T: Element>(model: &QaVitModel<T>, opt: Option<&OptimizerState<T>>) -> Vec<CheckpointEntry> {
    let mut entries: Vec<CheckpointEntry> =
        model.registry.iter().map(|(name, e)| tensor_entry(name, &e.tensor)).collect();
    if let Some(opt) = opt {
        for (name, buf) in &opt.m {
            entries.push(CheckpointEntry {
                name: format!("opt.m.{}", name),
                dtype: T::DTYPE,
                shape: vec![buf.len()],
                data: buf.iter().map(|&v| v.to_f64()).collect(),
            });
        }
        for (name, buf) in &opt.v {
            entries.push(CheckpointEntry {
                name: format!("opt.v.{}", name),
                dtype: T::DTYPE,
                shape: vec![buf.len()],
                data: buf.iter().map(|&v| v.to_f64()).collect(),
            });
        }
        entries.push(CheckpointEntry {
            name: "opt.step".into(),
            dtype: T::DTYPE,
            shape: vec![],
            data: vec![opt.step as f64],
        });
    }
    entries
}

pub fn save_model<T: Element>(path: &Path, model: &QaVitModel<T>, opt: Option<&OptimizerState<T>>) -> Result<()> {
    let bytes = checkpoint_bytes(&model_entries(model, opt))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Load parameters into a freshly constructed model of the same config.
/// Shape, dtype or coverage mismatches are rejected; returns the restored
/// optimizer state (empty when the checkpoint has none).
pub fn load_into_model<T: Element>(path: &Path, model: &QaVitModel<T>) -> Result<OptimizerState<T>> {
    let bytes = fs::read(path)?;
    let entries = parse_checkpoint(&bytes)?;
    apply_entries(&entries, model)
}

pub fn apply_entries<T: Element>(entries: &[CheckpointEntry], model: &QaVitModel<T>) -> Result<OptimizerState<T>> {
    use std::collections::BTreeMap;
    let mut by_name: BTreeMap<&str, &CheckpointEntry> = BTreeMap::new();
    for e in entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Integrity(format!("duplicate entry `{}`", e.name)));
        }
    }

    for (name, reg_entry) in model.registry.iter() {
        let e = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing parameter `{}`", name)))?;
        if e.dtype != T::DTYPE || e.shape != reg_entry.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint_load",
                detail: format!(
                    "`{}`: checkpoint {:?} {:?} vs model {:?} {:?}",
                    name,
                    e.dtype,
                    e.shape,
                    T::DTYPE,
                    reg_entry.tensor.shape()
                ),
            });
        }
        let data: Vec<T> = e.data.iter().map(|&v| T::from_f64(v)).collect();
        reg_entry.tensor.set_data(&data);
    }

    let mut opt = OptimizerState::default();
    for (name, e) in by_name {
        if let Some(param) = name.strip_prefix("opt.m.") {
            check_moment(model, param, e)?;
            opt.m.insert(param.to_string(), e.data.iter().map(|&v| T::from_f64(v)).collect());
        } else if let Some(param) = name.strip_prefix("opt.v.") {
            check_moment(model, param, e)?;
            opt.v.insert(param.to_string(), e.data.iter().map(|&v| T::from_f64(v)).collect());
        } else if name == "opt.step" {
            opt.step = e.data[0] as u64;
        } else {
            return Err(Error::Integrity(format!("unknown checkpoint entry `{}`", name)));
        }
    }
    Ok(opt)
}

fn check_moment<T: Element>(model: &QaVitModel<T>, param: &str, e: &CheckpointEntry) -> Result<()> {
    let reg = model
        .registry
        .get(param)
        .ok_or_else(|| Error::Integrity(format!("optimizer state for unknown parameter `{}`", param)))?;
    if e.data.len() != reg.tensor.numel() {
        return Err(Error::ShapeMismatch {
            op: "checkpoint_load",
            detail: format!("optimizer moment `{}` length {} vs {}", param, e.data.len(), reg.tensor.numel()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vectors() {
        assert_eq!(crc32(b""), 0x0000_0000);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn bytes_round_trip() {
        let entries = vec![
            CheckpointEntry { name: "a.weight".into(), dtype: Dtype::F32, shape: vec![2, 3], data: vec![1.0, -2.5, 0.0, 3.25, 1e-7f32 as f64, 9.0] },
            CheckpointEntry { name: "b".into(), dtype: Dtype::F64, shape: vec![], data: vec![0.123456789012345] },
        ];
        let bytes = checkpoint_bytes(&entries).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "a.weight");
        assert_eq!(back[0].shape, vec![2, 3]);
        assert_eq!(back[0].data, entries[0].data);
        assert_eq!(back[1].data, entries[1].data);
        // Re-serialization is byte-identical.
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let entries = vec![CheckpointEntry { name: "x".into(), dtype: Dtype::F32, shape: vec![4], data: vec![1.0; 4] }];
        let mut bytes = checkpoint_bytes(&entries).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(parse_checkpoint(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let entries = vec![CheckpointEntry { name: "x".into(), dtype: Dtype::F32, shape: vec![4], data: vec![1.0; 4] }];
        let bytes = checkpoint_bytes(&entries).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 5]).is_err());
    }
}
