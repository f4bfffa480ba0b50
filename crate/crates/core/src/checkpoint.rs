//! DDNP tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDNP"  u32 version=1  u32 entry_count  u8 bytes_per_scalar (4 or 8)
//! per entry: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, payload
//! ```
//!
//! The payload is row-major in the stored precision. A network checkpoint
//! holds trainable parameters only, so its scalar count equals
//! [`ParamStore::param_count`]; batch-norm statistics go in a separate file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::{Precision, Real};
use crate::tensor::{Shape4, Tensor4};

const MAGIC: &[u8; 4] = b"DDNP";
const VERSION: u32 = 1;

pub fn encode<T: Real>(entries: &[(&str, &Tensor4<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::invalid("too many checkpoint entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.push(T::PRECISION.byte_width());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a DDNP buffer, converting the stored precision to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor4<T>)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a DDNP file".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let width = r.u8()?;
    let precision = Precision::from_byte_width(width).ok_or_else(|| format!("invalid scalar width {width}"))?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u8()? as usize;
        if rank > 4 {
            return Err(format!("{name}: rank {rank} exceeds 4"));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = r.u32()? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let payload = r.take(n.checked_mul(usize::from(width)).ok_or("payload size overflows")?)?;
        let data: Vec<T> = match precision {
            Precision::Single => payload.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c).as_f64())).collect(),
            Precision::Double => payload.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        out.push((name, Tensor4::from_vec(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write<T: Real>(path: &Path, entries: &[(&str, &Tensor4<T>)]) -> Result<()> {
    let bytes = encode(entries)?;
    fs::write(path, bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read<T: Real>(path: &Path) -> Result<Vec<(String, Tensor4<T>)>> {
    let err = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    decode(&bytes).map_err(err)
}

/// Writes the trainable parameters of `store`.
pub fn save_params<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write(path, &store.named(true))
}

/// Writes the non-trainable buffers of `store`.
pub fn save_buffers<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write(path, &store.named(false))
}

/// Loads entries by name into `store`.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = read(path)?;
    store.load_named(entries).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Total scalars stored in a DDNP buffer.
pub fn payload_count(bytes: &[u8]) -> std::result::Result<usize, String> {
    Ok(decode::<f64>(bytes)?.iter().map(|(_, t)| t.numel()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let a = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![1.5f32, -2.0, 0.25, 3.0]).unwrap();
        let bytes = encode(&[("layer.weight", &a)]).unwrap();
        assert_eq!(&bytes[..4], b"DDNP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 4);
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, vec![("layer.weight".to_string(), a.clone())]);
        let wide = decode::<f64>(&bytes).unwrap();
        assert_eq!(wide[0].1.data(), &[1.5, -2.0, 0.25, 3.0]);
        assert_eq!(payload_count(&bytes).unwrap(), 4);
    }

    #[test]
    fn rejects_corruption() {
        let a = Tensor4::<f64>::zeros(Shape4::new(1, 1, 1, 3));
        let bytes = encode(&[("x", &a)]).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }
}
