//! Binary tensor blobs (`NWT1`) and named-tensor checkpoints (`NWK1`).
//!
//! Tensor layout, little-endian: magic `NWT1`, u8 dtype tag (0 = f32,
//! 1 = f64), u8 rank, rank x u32 extents, raw values.
//!
//! Checkpoint layout: magic `NWK1`, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name and one tensor blob.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::engine::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"NWT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NWK1";

/// Cursor over a byte slice that reports the offset of malformed input.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            detail: detail.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: at as u64,
                detail: format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap()),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }
}

pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE as u8);
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.write_u32::<LittleEndian>(e as u32).expect("vec write");
    }
    out.reserve(tensor.len() * T::DTYPE.size());
    for &v in tensor.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(tensor, &mut out);
    out
}

/// Parse one blob; values stored in the other precision are converted.
pub(crate) fn read_tensor<T: Scalar>(r: &mut ByteReader<'_>) -> Result<Tensor<T>> {
    r.magic(TENSOR_MAGIC)?;
    let tag_at = r.offset();
    let tag = r.u8("dtype")?;
    let Some(dtype) = DType::from_tag(tag) else {
        return Err(Error::Format {
            offset: tag_at,
            detail: format!("unknown dtype tag {tag}"),
        });
    };
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return r.fail("rank 0 tensor");
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u32("extent")? as usize;
        if e == 0 {
            return r.fail("zero extent");
        }
        shape.push(e);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format {
            offset: r.offset(),
            detail: format!("extent product overflows for {shape:?}"),
        })?;
    let bytes = r.take(
        len.checked_mul(dtype.size()).unwrap_or(usize::MAX),
        "tensor payload",
    )?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::read_le(b) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::read_le(b)))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}

pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(bytes);
    let t = read_tensor(&mut r)?;
    if !r.is_at_end() {
        return r.fail("trailing bytes after tensor");
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, tensor_to_bytes(tensor))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn checkpoint_to_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(store.len() as u32).expect("vec write");
    for (_, name, tensor) in store.iter() {
        out.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        write_tensor(tensor, &mut out);
    }
    out
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format {
            offset: at,
            detail: "parameter name is not UTF-8".into(),
        })?;
        let tensor = read_tensor(&mut r)?;
        store.insert(name, tensor).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
    }
    if !r.is_at_end() {
        return r.fail("trailing bytes after checkpoint");
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_both_precisions() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2);
        let back: Tensor<f64> = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert_eq!(back, t);
        let s = Tensor::<f32>::from_fn(&[4], |i| i as f32 / 3.0);
        let back: Tensor<f32> = tensor_from_bytes(&tensor_to_bytes(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::zeros(&[3]);
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"NWT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..10], &3u32.to_le_bytes());
        assert_eq!(b.len(), 10 + 12);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f64>::ones(&[4]);
        let b = tensor_to_bytes(&t);
        let err = tensor_from_bytes::<f64>(&b[..b.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 10),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("ernn1.wxz", Tensor::full(&[2, 2], 0.5)).unwrap();
        s.insert("ernn1.bz", Tensor::zeros(&[2])).unwrap();
        let back: ParamStore<f32> = checkpoint_from_bytes(&checkpoint_to_bytes(&s)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.name(back.id("ernn1.bz").unwrap()), "ernn1.bz");
        assert_eq!(back.tensors(), s.tensors());
    }
}
