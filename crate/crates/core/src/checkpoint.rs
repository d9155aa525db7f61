//! `IQVC` named-tensor checkpoints.
//!
//! ```text
//! "IQVC" | version u32 | records until EOF:
//!     name_len u16 | name (utf-8) | rank u32 | rank x extent u32 | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IQVC";
pub const VERSION: u32 = 1;

pub type Record = (String, Tensor);

pub fn encode_checkpoint(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + records.iter().map(|(_, t)| 64 + 4 * t.numel()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format("checkpoint", format!("tensor name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::format("checkpoint", format!("extent {e} of {name} overflows u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
                "checkpoint",
                format!("truncated while reading {what} at byte {}", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, not an IQVC file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    while r.pos < bytes.len() {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format("checkpoint", format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format("checkpoint", format!("{name}: size overflow")))?;
        let payload = r.take(count, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, records: &[Record]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(records)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Record>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            ("w".into(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-30, 7.0]).unwrap()),
            ("scalar".into(), Tensor::scalar(0.25)),
            ("empty".into(), Tensor::new(&[0, 4], vec![]).unwrap()),
        ]
    }

    #[test]
    fn roundtrip_is_exact() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"IQVC");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), sample());
    }

    #[test]
    fn layout_matches_format() {
        let bytes = encode_checkpoint(&[("ab".into(), Tensor::new(&[1], vec![1.0]).unwrap())]).unwrap();
        let mut expect = b"IQVC".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
        for cut in [2, 6, 9, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "{cut}: {err}");
        }
        let twice = [sample(), sample()].concat();
        assert!(decode_checkpoint(&encode_checkpoint(&twice).unwrap()).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
