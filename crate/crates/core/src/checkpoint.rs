//! Binary checkpoints: `"CLKB"`, version `u32`, architecture fingerprint
//! `u64`, then one record per tensor until end of file. A record is the name
//! length `u32`, the UTF-8 name, a dtype tag `u8`, the rank `u8`, `rank`
//! dims as `u32` and the raw values. Everything is little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"CLKB";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Values widened to `f64`; exact for both stored precisions.
    pub values: Vec<f64>,
}

fn push_record<T: Scalar>(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[T]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

/// Serializes every parameter and BN running statistic of `model`.
pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(model.fingerprint().to_le_bytes());
    for (name, p) in model.named_params() {
        push_record(&mut out, &name, &p.dims, p.data);
    }
    for (name, b) in model.named_buffers() {
        push_record(&mut out, &name, &[b.len()], b);
    }
    out
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never leaves a half-written checkpoint behind.
pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the header, returning `(version, fingerprint)`.
pub fn decode_header(bytes: &[u8]) -> Result<(u32, u64)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CLKB checkpoint".into()));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    Ok((version, u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"))))
}

pub fn decode(bytes: &[u8]) -> Result<(u64, Vec<Record>)> {
    let (_, fingerprint) = decode_header(bytes)?;
    let mut r = Reader {
        bytes,
        pos: HEADER_BYTES,
    };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let head = r.take(2)?;
        let dtype = DType::from_tag(head[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {}", head[0])))?;
        let dims = (0..head[1]).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * dtype.size())?;
        let values = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        records.push(Record {
            name,
            dtype,
            dims,
            values,
        });
    }
    Ok((fingerprint, records))
}

/// Restores `model` from `bytes`. The fingerprint must match and every
/// parameter and buffer of the model must be present with matching dims.
pub fn restore<T: Scalar>(model: &mut Model<T>, bytes: &[u8]) -> Result<()> {
    let (fingerprint, records) = decode(bytes)?;
    if fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: model.fingerprint(),
            found: fingerprint,
        });
    }
    let find = |name: &str, dims: &[usize]| -> Result<&Record> {
        let rec = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if rec.dims != dims {
            return Err(Error::Checkpoint(format!("{name}: dims {:?}, expected {dims:?}", rec.dims)));
        }
        Ok(rec)
    };
    for (name, p) in model.named_params_mut() {
        let rec = find(&name, &p.dims)?;
        for (d, &v) in p.data.iter_mut().zip(&rec.values) {
            *d = T::lit(v);
        }
    }
    for (name, b) in model.named_buffers_mut() {
        let rec = find(&name, &[b.len()])?;
        for (d, &v) in b.iter_mut().zip(&rec.values) {
            *d = T::lit(v);
        }
    }
    Ok(())
}

pub fn load<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    restore(model, &fs::read(path)?)
}

/// Architecture fingerprint stored in the checkpoint at `path`.
pub fn read_fingerprint(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)?;
    Ok(decode_header(&bytes)?.1)
}
