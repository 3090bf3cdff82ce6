use std::io::Write;
use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const TOKENS_MAGIC: &str = "TOKM1";

/// Codebook indices for one shape, x-fastest over the patch grid.
/// Index `k` (the codebook size) is `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub indices: Vec<u32>,
    pub per_axis: [usize; 3],
    pub k: usize,
    pub class_label: Option<u32>,
}

impl TokenMap {
    pub fn new(indices: Vec<u32>, per_axis: [usize; 3], k: usize, class_label: Option<u32>) -> Result<Self> {
        if indices.len() != per_axis.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} indices for patch grid {per_axis:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize > k) {
            return Err(Error::invalid(format!("index {bad} exceeds mask index {k}")));
        }
        Ok(Self {
            indices,
            per_axis,
            k,
            class_label,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mask_index(&self) -> u32 {
        self.k as u32
    }

    pub fn first_mask(&self) -> Option<usize> {
        self.indices.iter().position(|&i| i as usize == self.k)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(25 + 4 * self.indices.len());
        binio::write_magic(&mut out, b"TOKM1")?;
        for p in self.per_axis {
            binio::write_u32(&mut out, p as u32)?;
        }
        binio::write_u32(&mut out, self.k as u32)?;
        let label = match self.class_label {
            Some(l) => i32::try_from(l).map_err(|_| Error::invalid("class label too large"))?,
            None => -1,
        };
        binio::write_i32(&mut out, label)?;
        for &i in &self.indices {
            binio::write_u32(&mut out, i)?;
        }
        Ok(out)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.expect_magic(TOKENS_MAGIC)?;
        let per_axis = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let k = r.u32()? as usize;
        let label = r.i32()?;
        let class_label = match label {
            -1 => None,
            l if l >= 0 => Some(l as u32),
            l => return Err(r.err(format!("invalid class label {l}"))),
        };
        let n: usize = per_axis.iter().product();
        let indices = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        TokenMap::new(indices, per_axis, k, class_label).map_err(|e| r.err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &binio::read_file(path)?)
    }
}
