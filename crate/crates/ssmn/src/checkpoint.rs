//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! magic `SSMNCKPT`, version u32, config hash u64, phase tag (u16 length +
//! utf8), parameter count u32, then per parameter: name (u16 length + utf8),
//! rank u8, dims u32 each, data f64 each. Writing is deterministic; loading
//! validates the magic, version, and every shape against the expected
//! architecture when one is supplied.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SsmnError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSMNCKPT";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub phase: String,
    pub store: ParamStore,
}

pub fn save(path: &Path, store: &ParamStore, phase: &str, config_hash: u64) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    write_str(&mut buf, phase)?;
    let n = u32::try_from(store.len())
        .map_err(|_| SsmnError::Checkpoint("too many parameters".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    for (name, t) in store.iter() {
        write_str(&mut buf, name)?;
        let shape = t.shape();
        buf.push(
            u8::try_from(shape.len())
                .map_err(|_| SsmnError::Checkpoint(format!("{name}: rank too large")))?,
        );
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| SsmnError::Checkpoint(format!("{name}: dim too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| SsmnError::Checkpoint(format!("string too long: {s}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| SsmnError::Checkpoint("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| SsmnError::Checkpoint("invalid utf8 string".into()))
    }
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(SsmnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SsmnError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_hash = r.u64()?;
    let phase = r.string()?;
    let count = r.u32()? as usize;
    if count > 1 << 20 {
        return Err(SsmnError::Checkpoint("implausible parameter count".into()));
    }
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        if name.is_empty() {
            return Err(SsmnError::Checkpoint("empty parameter name".into()));
        }
        if store.try_get(&name).is_some() {
            return Err(SsmnError::Checkpoint(format!("duplicate parameter {name}")));
        }
        let rank = r.u8()? as usize;
        if rank > 8 {
            return Err(SsmnError::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| SsmnError::Checkpoint(format!("{name}: shape overflow")))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        store.insert(&name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(SsmnError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        version,
        config_hash,
        phase,
        store,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

/// Validate name-set and shapes against the expected architecture.
pub fn validate_against(ckpt: &Checkpoint, expected: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        match ckpt.store.try_get(name) {
            None => {
                return Err(SsmnError::Checkpoint(format!("missing parameter {name}")));
            }
            Some(got) if got.shape() != t.shape() => {
                return Err(SsmnError::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            _ => {}
        }
    }
    for (name, _) in ckpt.store.iter() {
        if expected.try_get(name).is_none() {
            return Err(SsmnError::Checkpoint(format!("unexpected parameter {name}")));
        }
    }
    Ok(())
}
