//! `CKPT1` parameter checkpoints.
//!
//! Layout: magic `CKPT1`, u32 tensor count, then per tensor a u16 name
//! length, the name bytes, a u8 rank, `rank` u32 extents and the values as
//! f32, all little-endian.

use std::io::{BufWriter, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &str = "CKPT1";

pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    binio::write_magic(&mut out, b"CKPT1")?;
    binio::write_u32(&mut out, params.len() as u32)?;
    for e in params.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?;
        binio::write_u16(&mut out, len)?;
        out.write_all(name)?;
        binio::write_u8(&mut out, e.tensor.shape().len() as u8)?;
        for &d in e.tensor.shape() {
            binio::write_u32(&mut out, d as u32)?;
        }
        for &v in e.tensor.data() {
            binio::write_f32(&mut out, v as f32)?;
        }
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let bytes = encode(params)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Named tensors in file order.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(path, bytes);
    r.expect_magic(MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| r.err("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(path, &binio::read_file(path)?)
}

/// Overwrite the values of `params` from a checkpoint with matching names and
/// shapes.
pub fn restore(path: &Path, params: &mut ParamStore) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != params.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} tensors, model expects {}", loaded.len(), params.len()),
        });
    }
    for ((name, t), e) in loaded.into_iter().zip(params.entries_mut()) {
        if name != e.name || t.shape() != e.tensor.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.tensor.shape()
                ),
            });
        }
        e.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let mut p = ParamStore::new();
        p.add("enc.w", Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.125]).unwrap(), true);
        p.add("b", Tensor::from_vec(vec![1.5]), false);
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..5], b"CKPT1");
        let back = decode(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back[0].0, "enc.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), p.entries()[0].tensor.data());
        assert_eq!(back[1].1.data(), &[1.5]);
    }

    #[test]
    fn rejects_foreign_magic() {
        let err = decode(Path::new("x.bin"), b"TSDF1\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::BadMagic { expected: "CKPT1", .. }));
    }
}
