//! Binary checkpoint of latent tensors.
//!
//! ```text
//! "MRMP" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | rank × dim u32 | dtype u32 | data )
//! ```
//!
//! All integers and floats are little-endian; dtype 0 is f32, 1 is f64.
//! Masks are not stored.

use std::path::Path;

use super::{GcnConfig, GcnModel, Param};
use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRMP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Real>(model: &GcnModel<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, model.params().len())?;
    for p in model.params() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut buf, d)?;
        }
        buf.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
        for &v in p.value.data() {
            match T::DTYPE {
                DType::F32 => buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a checkpoint; stored values are converted to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<GcnModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing MRMP magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let tag = r.u32()?;
        let dtype = DType::from_tag(tag as u32)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for {name}")))?;
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            DType::F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let named: Vec<(String, Vec<usize>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let config = GcnConfig::infer(&named)?;
    let params = config
        .layout()
        .into_iter()
        .zip(tensors)
        .map(|((name, _, prunable), (_, value))| Param { name, value, prunable })
        .collect();
    GcnModel::from_params(config, params)
}

pub fn write_checkpoint<T: Real>(model: &GcnModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<GcnModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GcnConfig {
        GcnConfig {
            nodes: 3,
            in_channels: 6,
            projection: Some(2),
            heads: 2,
            filters: 4,
            hidden: None,
            classes: 3,
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let m = GcnModel::<f64>::build(small(), 0).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"MRMP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &(m.params().len() as u32).to_le_bytes());
        // first tensor: "projection", rank 2, dims 6×2, dtype 1
        assert_eq!(&bytes[12..16], &10u32.to_le_bytes());
        assert_eq!(&bytes[16..26], b"projection");
        assert_eq!(&bytes[26..30], &2u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &6u32.to_le_bytes());
        assert_eq!(&bytes[34..38], &2u32.to_le_bytes());
        assert_eq!(&bytes[38..42], &1u32.to_le_bytes());
        let first = m.param("projection").unwrap().data()[0];
        assert_eq!(&bytes[42..50], &first.to_le_bytes());

        let per_tensor: usize = m
            .params()
            .iter()
            .map(|p| 4 + p.name.len() + 4 + 4 * p.value.shape().len() + 4 + 8 * p.value.len())
            .sum();
        assert_eq!(bytes.len(), 12 + per_tensor);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = GcnModel::<f64>::build(small(), 4).unwrap();
        assert_eq!(decode::<f64>(&encode(&m).unwrap()).unwrap(), m);
        let sbu = GcnModel::<f32>::build(GcnConfig::sbu(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mrmp");
        write_checkpoint(&sbu, &path).unwrap();
        let back: GcnModel<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(back, sbu);
        assert_eq!(back.config(), &GcnConfig::sbu());
        // f32 storage widens exactly
        let wide: GcnModel<f64> = read_checkpoint(&path).unwrap();
        assert_eq!(wide, sbu.cast::<f64>());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = GcnModel::<f64>::build(small(), 4).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode::<f64>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[38] = 7;
        assert!(decode::<f64>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<f64>(&long).is_err());
        assert!(matches!(read_checkpoint::<f64>("/nonexistent/x.mrmp"), Err(Error::Io { .. })));
    }
}
