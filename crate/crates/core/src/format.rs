//! Binary tensor files.
//!
//! `LSRT` holds one tensor; `LSRC` is a named-tensor container used for
//! checkpoints. Both are little-endian with dtype codes 0 = float32, 1 = int32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LSRT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"LSRC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn f32(dims: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorRecord {
            dims: dims.to_vec(),
            data: TensorData::F32(data),
        }
    }

    pub fn i32(dims: &[usize], data: Vec<i32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorRecord {
            dims: dims.to_vec(),
            data: TensorData::I32(data),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I32(_) => Err(Error::Format("expected float32 tensor".into())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected int32 tensor".into())),
        }
    }

    fn write_body(&self, out: &mut Vec<u8>) -> Result<()> {
        out.push(self.data.dtype_code());
        let rank = u8::try_from(self.dims.len()).map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
        out.push(rank);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(())
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype {
            0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            1 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        Ok(TensorRecord { dims, data })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &TensorRecord) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    t.write_body(&mut out)?;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorRecord> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(TENSOR_MAGIC)?;
    let t = TensorRecord::read_body(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn encode_container(tensors: &[(String, TensorRecord)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_body(&mut out)?;
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(String, TensorRecord)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CONTAINER_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        out.push((name, TensorRecord::read_body(&mut r)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_tensor(path: &Path, t: &TensorRecord) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorRecord> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn write_container(path: &Path, tensors: &[(String, TensorRecord)]) -> Result<()> {
    let bytes = encode_container(tensors)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, TensorRecord)>> {
    let bytes = fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_bit_exact() {
        let t = TensorRecord::f32(&[1, 2], vec![1.0, -2.5]);
        let bytes = encode_tensor(&t).unwrap();
        let mut expect = b"LSRT".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&[0, 2]);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn container_layout_is_bit_exact() {
        let items = vec![("ab".to_string(), TensorRecord::i32(&[1], vec![7]))];
        let bytes = encode_container(&items).unwrap();
        let mut expect = b"LSRC".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&[1, 1]);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&7i32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = TensorRecord::f32(&[3], vec![1.0, 2.0, 3.0]);
        let mut bytes = encode_tensor(&t).unwrap();
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_tensor(&bytes).is_err());
        assert!(decode_container(&encode_tensor(&t).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip(
            entries in proptest::collection::vec(
                ("[a-z.]{0,12}", proptest::collection::vec(-1e6f32..1e6, 0..20), any::<bool>()),
                0..5,
            )
        ) {
            let items: Vec<(String, TensorRecord)> = entries
                .into_iter()
                .map(|(name, vals, as_int)| {
                    let n = vals.len();
                    let rec = if as_int {
                        TensorRecord::i32(&[n], vals.iter().map(|v| *v as i32).collect())
                    } else {
                        TensorRecord::f32(&[1, n], vals)
                    };
                    (name, rec)
                })
                .collect();
            let bytes = encode_container(&items).unwrap();
            prop_assert_eq!(decode_container(&bytes).unwrap(), items);
        }
    }
}
