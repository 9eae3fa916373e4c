//! Named-tensor container format.
//!
//! ```text
//! "MSTN" | version u8 = 1 | count u32
//! per entry: name_len u16 | name (UTF-8) | rank u8 | dims u32 * rank | dtype u8 | payload
//! ```
//! All integers are little-endian. Only dtype 1 (f32, row-major) exists.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(entries.len()).map_err(|_| Error::DimensionOverflow)?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Parse(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::DimensionOverflow)?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow)?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::DimensionOverflow)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
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
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            elems = elems.checked_mul(d).ok_or(Error::DimensionOverflow)?;
            shape.push(d);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let bytes = elems.checked_mul(4).ok_or(Error::DimensionOverflow)?;
        let payload = r.take(bytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            (
                "a".into(),
                Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.25, 3.0, 1e-3f32 as f64, 7.0]).unwrap(),
            ),
            ("scalar".into(), Tensor::from_vec(&[], vec![42.0]).unwrap()),
            ("empty".into(), Tensor::zeros(&[0, 4])),
        ]
    }

    #[test]
    fn roundtrip_exact() {
        let e = sample();
        assert_eq!(decode(&encode(&e).unwrap()).unwrap(), e);
    }

    #[test]
    fn empty_list_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes, b"MSTN\x01\x00\x00\x00\x00");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode(&[("x".into(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]).unwrap();
        let want: Vec<u8> = [
            &b"MSTN"[..],
            &[1],
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"x",
            &[1],
            &1u32.to_le_bytes(),
            &[1],
            &1f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, want);
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic)));
        assert!(matches!(decode(b"MS"), Err(Error::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(Error::UnsupportedVersion(2))));

        let mut huge = b"MSTN\x01".to_vec();
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&1u16.to_le_bytes());
        huge.push(b'h');
        huge.push(3);
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        huge.push(1);
        assert!(matches!(decode(&huge), Err(Error::DimensionOverflow)));

        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mstn");
        write_tensors(&p, &sample()).unwrap();
        assert_eq!(read_tensors(&p).unwrap(), sample());
        assert!(matches!(
            read_tensors(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
