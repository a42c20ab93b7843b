//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BEFU" | version u32 = 1 | count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! dtype 0 is `f32` and 1 is `f64`. The payload is the row-major data.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"BEFU";
pub const VERSION: u32 = 1;

/// Header size of the file: magic, version and count.
pub const HEADER_BYTES: usize = 12;

/// Bytes one tensor entry occupies.
pub fn entry_bytes(name: &str, shape: &[usize], dtype_bytes: usize) -> usize {
    2 + name.len() + 2 + 4 * shape.len() + dtype_bytes * shape.iter().product::<usize>()
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(|_| Error::Contract("too many tensors".into()))?.to_le_bytes());
    for (_, name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("rank of `{name}` too large")))?);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim of `{name}` too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Io(io::Error::new(
                ErrorKind::UnexpectedEof,
                format!("checkpoint truncated at byte {} (needed {n} more)", self.bytes.len()),
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_payload<S: Real, T: Real>(c: &mut Cursor<'_>, n: usize) -> Result<Vec<T>> {
    let bytes = c.take(n.checked_mul(S::BYTES).ok_or_else(|| Error::format(c.pos, "tensor too large"))?)?;
    Ok(bytes.chunks_exact(S::BYTES).map(|b| T::from_f64(S::read_le(b).as_f64())).collect())
}

/// Decodes named tensors, converting stored values to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected BEFU"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let dtype_at = c.pos;
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(dtype_at, format!("shape {shape:?} of `{name}` overflows")))?;
        let data = match dtype {
            0 => read_payload::<f32, T>(&mut c, n)?,
            1 => read_payload::<f64, T>(&mut c, n)?,
            d => return Err(Error::format(dtype_at, format!("unknown dtype {d} for `{name}`"))),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

/// Overwrites every parameter of `store` from `tensors`. Names and shapes
/// must match one to one.
pub fn restore<T: Real>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::config(format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len())));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::config(format!("checkpoint tensor `{name}` is not a model parameter")))?;
        let dst = store.get(id);
        if dst.shape() != t.shape() {
            return Err(Error::config(format!("`{name}` has shape {:?} in checkpoint, {:?} in model", t.shape(), dst.shape())));
        }
        store.set_values(id, t.data())?;
    }
    Ok(())
}

impl<T: Real> Model<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save(&self.params, path)
    }

    /// Builds the architecture for `cfg` and fills it from a checkpoint.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Model::new(cfg, 0)?;
        restore(&mut model.params, decode(&fs::read(path)?)?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("a", Tensor::new(&[2, 3], (0..6).map(|i| i as f32 * 0.25).collect()).unwrap()).unwrap();
        s.register("b.bias", Tensor::new(&[1], vec![-1.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn hand_layout_of_one_tensor() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut expected = b"BEFU".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend([1, 0, b'w', 0, 1, 2, 0, 0, 0]);
        expected.extend(1f32.to_le_bytes());
        expected.extend(2f32.to_le_bytes());
        assert_eq!(encode(&s).unwrap(), expected);
    }

    #[test]
    fn round_trip_and_size() {
        let s = store();
        let bytes = encode(&s).unwrap();
        let sizes: usize = s.iter().map(|(_, n, t)| entry_bytes(n, t.shape(), 4)).sum();
        assert_eq!(bytes.len(), HEADER_BYTES + sizes);
        let back = decode::<f32>(&bytes).unwrap();
        for ((_, n, t), (bn, bt)) in s.iter().zip(&back) {
            assert_eq!(n, bn);
            assert_eq!(t.data(), bt.data());
            assert_eq!(t.shape(), bt.shape());
        }
    }

    #[test]
    fn corrupt_and_truncated_files() {
        let mut bytes = encode(&store()).unwrap();
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Io(ref e)) if e.kind() == ErrorKind::UnexpectedEof));
        bytes[4] = 2;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn restore_rejects_mismatch() {
        let mut s = store();
        let mut t = decode::<f32>(&encode(&s).unwrap()).unwrap();
        t[1].0 = "c".into();
        assert!(restore(&mut s, t).is_err());
        let mut t = decode::<f32>(&encode(&s).unwrap()).unwrap();
        t[0].1 = Tensor::zeros(&[3, 2]);
        assert!(restore(&mut s, t).is_err());
    }
}
