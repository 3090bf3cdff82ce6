//! Patch vector quantization: split grids into cubic patches, encode each to
//! a latent, snap it to the nearest codebook entry, decode back.

mod codebook;
mod net;
mod patch;
mod tokens;
mod train;

use std::path::Path;

pub use codebook::{init_codebook_kmeans, Codebook, KMeansFit, CODEBOOK_MAGIC};
pub use net::{straight_through, vqvae_loss, BoundCodec, CodecParams, VqTerms};
pub use patch::{assemble, partition, PatchSpec};
pub use tokens::{TokenMap, TOKENS_MAGIC};
pub use train::{train_codec, CodecTrainConfig, CodecTrainReport};

use crate::autodiff::checkpoint;
use crate::error::{Error, Result};
use crate::shape::TsdfGrid;

pub const DEFAULT_BETA: f64 = 0.25;

/// A trained encoder/decoder pair with its codebook.
#[derive(Clone, Debug)]
pub struct Codec {
    pub patch: PatchSpec,
    pub truncation: f32,
    pub params: CodecParams,
    pub codebook: Codebook,
}

impl Codec {
    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    /// Patch rows scaled to `[-1, 1]`, `[N, edge^3]` row-major.
    pub fn patch_rows(&self, grid: &TsdfGrid) -> Result<Vec<f64>> {
        let inv = 1.0 / f64::from(self.truncation);
        Ok(partition(grid, &self.patch)?
            .into_iter()
            .flatten()
            .map(|v| f64::from(v) * inv)
            .collect())
    }

    /// Encoder latents `[N, n_z]`.
    pub fn latents(&self, grid: &TsdfGrid) -> Result<Vec<f64>> {
        self.params.encode_rows(&self.patch_rows(grid)?, self.patch.count())
    }

    pub fn tokenize(&self, grid: &TsdfGrid, class_label: Option<u32>) -> Result<TokenMap> {
        let z = self.latents(grid)?;
        let n_z = self.codebook.n_z();
        let indices = z.chunks(n_z).map(|row| self.codebook.quantize(row).0 as u32).collect();
        TokenMap::new(indices, self.patch.per_axis, self.k(), class_label)
    }

    /// Decoded patch for every codebook entry, in TSDF units.
    pub fn decoded_entries(&self) -> Result<Vec<Vec<f32>>> {
        let k = self.k();
        let out = self.params.decode_rows(self.codebook.entries(), k)?;
        let tau = f64::from(self.truncation);
        Ok(out
            .chunks(self.patch.volume())
            .map(|p| p.iter().map(|&v| (v * tau) as f32).collect())
            .collect())
    }

    pub fn detokenize(&self, tokens: &TokenMap) -> Result<TsdfGrid> {
        self.detokenize_with(tokens, &self.decoded_entries()?)
    }

    /// [`Codec::detokenize`] with precomputed [`Codec::decoded_entries`].
    pub fn detokenize_with(&self, tokens: &TokenMap, entries: &[Vec<f32>]) -> Result<TsdfGrid> {
        if let Some(position) = tokens.first_mask() {
            return Err(Error::UnresolvedMask { position });
        }
        if tokens.per_axis != self.patch.per_axis || tokens.k != self.k() {
            return Err(Error::invalid(format!(
                "token map {:?}/K={} does not match codec {:?}/K={}",
                tokens.per_axis,
                tokens.k,
                self.patch.per_axis,
                self.k()
            )));
        }
        let patches: Vec<Vec<f32>> = tokens.indices.iter().map(|&i| entries[i as usize].clone()).collect();
        assemble(&patches, &self.patch, self.truncation)
    }

    pub fn reconstruct(&self, grid: &TsdfGrid) -> Result<TsdfGrid> {
        self.detokenize(&self.tokenize(grid, None)?)
    }

    /// Write `codec.ckpt` and `codebook.cdbk` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&dir.join(CODEC_CKPT), &self.params.store)?;
        self.codebook.save(&dir.join(CODEBOOK_FILE))
    }

    pub fn load(dir: &Path, patch: PatchSpec, truncation: f32, n_z: usize) -> Result<Self> {
        let codebook = Codebook::load(&dir.join(CODEBOOK_FILE))?;
        if codebook.n_z() != n_z {
            return Err(Error::Format {
                path: dir.join(CODEBOOK_FILE),
                detail: format!("codebook width {} but config says n_z = {n_z}", codebook.n_z()),
            });
        }
        let mut params = CodecParams::new(patch.volume(), n_z, 0)?;
        checkpoint::restore(&dir.join(CODEC_CKPT), &mut params.store)?;
        Ok(Self {
            patch,
            truncation,
            params,
            codebook,
        })
    }

    /// Round all weights through f32 so in-memory results match a saved copy.
    pub fn round_to_f32(&mut self) {
        for e in self.params.store.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        self.codebook.round_to_f32();
    }
}

pub const CODEC_CKPT: &str = "codec.ckpt";
pub const CODEBOOK_FILE: &str = "codebook.cdbk";

#[cfg(test)]
mod tests;
