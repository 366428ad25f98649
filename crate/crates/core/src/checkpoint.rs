//! Binary checkpoint format: a named-tensor table with an integrity footer.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"HAAN"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u32      name length, then UTF-8 name bytes
//!   u32      rank (always 4)
//!   u32 x 4  dims (n, c, h, w)
//!   f32 x *  row-major values
//! u64    FNV-1a of every preceding byte
//! ```
//!
//! Values are stored as 32-bit floats regardless of the in-memory dtype.
//! Small metadata (config echo, seeds) rides along as tiny tensors under
//! `meta.*` / `config.*` names; u64 seeds are split into four 16-bit chunks
//! so they survive the f32 round trip exactly.

use std::path::Path;

use crate::backbone::{NetConfig, NetWeights};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"HAAN";
pub const VERSION: u32 = 1;

/// Serialize a named-tensor table.
pub fn to_bytes(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&4u32.to_le_bytes());
        let s = tensor.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crate::util::fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Parse and verify a named-tensor table.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 8 + 4 + 8 {
        return Err(fail("truncated checkpoint"));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(footer.try_into().unwrap());
    let actual = crate::util::fnv1a64(body);
    if stored != actual {
        return Err(fail(&format!("checksum mismatch: stored {stored:#x}, computed {actual:#x}")));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > body.len() {
            return Err(Error::Checkpoint("truncated checkpoint body".into()));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let read_u32 = |b: &[u8]| -> u32 { u32::from_le_bytes(b.try_into().expect("4-byte slice")) };

    if take(4)? != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let version = read_u32(take(4)?);
    if version != VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let count = read_u32(take(4)?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(take(4)?) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = read_u32(take(4)?);
        if rank != 4 {
            return Err(fail(&format!("tensor {name}: unsupported rank {rank}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(take(4)?) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = take(shape.numel() * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    if pos != body.len() {
        return Err(fail("trailing bytes after tensor table"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, to_bytes(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    from_bytes(&std::fs::read(path)?)
}

// ── Metadata helpers ─────────────────────────────────────────────────

/// One scalar riding in the table.
pub fn meta_scalar(v: f64) -> Tensor<f32> {
    Tensor::scalar(v as f32)
}

pub fn read_meta_scalar(entries: &[(String, Tensor<f32>)], name: &str) -> Result<f64> {
    let t = find(entries, name)?;
    if t.numel() != 1 {
        return Err(Error::Checkpoint(format!("{name} is not a scalar")));
    }
    Ok(t.data()[0] as f64)
}

/// A u64 split into four 16-bit chunks (little-endian chunk order), each
/// exactly representable as f32.
pub fn meta_u64(v: u64) -> Tensor<f32> {
    let data: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::from_vec(Shape::new(1, 4, 1, 1), data).expect("meta shape")
}

pub fn read_meta_u64(entries: &[(String, Tensor<f32>)], name: &str) -> Result<u64> {
    let t = find(entries, name)?;
    if t.numel() != 4 {
        return Err(Error::Checkpoint(format!("{name} is not a u64 record")));
    }
    let mut v = 0u64;
    for (i, &chunk) in t.data().iter().enumerate() {
        v |= (chunk as u64 & 0xffff) << (16 * i);
    }
    Ok(v)
}

fn find<'a>(entries: &'a [(String, Tensor<f32>)], name: &str) -> Result<&'a Tensor<f32>> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
}

// ── Network assembly ─────────────────────────────────────────────────

/// Build the full table for a network: topology metadata, any extra
/// entries the caller supplies (config echo, seeds), then every parameter.
pub fn net_table(
    net: &NetWeights<f32>,
    extra: &[(String, Tensor<f32>)],
) -> Vec<(String, Tensor<f32>)> {
    let cfg = net.cfg;
    let mut entries: Vec<(String, Tensor<f32>)> = vec![
        ("meta.base_channels".into(), meta_scalar(cfg.base_channels as f64)),
        ("meta.num_haab".into(), meta_scalar(cfg.num_haab as f64)),
        ("meta.use_haam".into(), meta_scalar(cfg.use_haam as u8 as f64)),
        ("meta.use_mfem".into(), meta_scalar(cfg.use_mfem as u8 as f64)),
        ("meta.use_fusion".into(), meta_scalar(cfg.use_fusion as u8 as f64)),
    ];
    entries.extend(extra.iter().cloned());
    for (name, t) in net.named() {
        entries.push((name, t.clone()));
    }
    entries
}

/// Rebuild a network from a table produced by [`net_table`]. Returns the
/// network plus the full entry list for callers that need the metadata.
pub fn net_from_table(
    entries: Vec<(String, Tensor<f32>)>,
) -> Result<(NetWeights<f32>, Vec<(String, Tensor<f32>)>)> {
    let cfg = NetConfig {
        base_channels: read_meta_scalar(&entries, "meta.base_channels")? as usize,
        num_haab: read_meta_scalar(&entries, "meta.num_haab")? as usize,
        use_haam: read_meta_scalar(&entries, "meta.use_haam")? != 0.0,
        use_mfem: read_meta_scalar(&entries, "meta.use_mfem")? != 0.0,
        use_fusion: read_meta_scalar(&entries, "meta.use_fusion")? != 0.0,
    };
    let mut net = NetWeights::<f32>::init(cfg, 0);
    let mut mismatches = Vec::new();
    for (name, slot) in net.named_mut() {
        match entries.iter().find(|(n, _)| *n == name) {
            Some((_, stored)) if stored.shape() == slot.shape() => {
                let grad = slot.requires_grad();
                *slot = stored.clone();
                slot.set_requires_grad(grad);
            }
            Some((_, stored)) => mismatches
                .push(format!("{name}: expected {}, stored {}", slot.shape(), stored.shape())),
            None => mismatches.push(format!("{name}: missing from checkpoint")),
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Checkpoint(format!(
            "network/checkpoint shape table mismatch:\n  {}",
            mismatches.join("\n  ")
        )));
    }
    Ok((net, entries))
}
