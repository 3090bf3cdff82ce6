//! Run configuration: `key = value` lines grouped in sections, every field
//! defaulted to the desk-scale setup, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecTrainConfig, PatchSpec};
use crate::denoiser::{ConditionMode, DenoiserConfig, DenoiserTrainConfig};
use crate::diffusion::{build_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::pipeline::{NoiseKind, Region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    /// Voxels per axis (cubic grids).
    pub grid: usize,
    pub patch_edge: usize,
    pub truncation: f32,
    pub corpus_count: usize,
    pub classes: usize,
    /// Surface samples per shape for point-set metrics.
    pub surface_points: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            grid: 16,
            patch_edge: 4,
            truncation: 0.2,
            corpus_count: 200,
            classes: 3,
            surface_points: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub k: usize,
    pub n_z: usize,
    pub beta: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        let d = CodecTrainConfig::default();
        Self {
            k: d.k,
            n_z: d.n_z,
            beta: d.beta,
            warmup_epochs: d.warmup_epochs,
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
            kmeans_iters: d.kmeans_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub kind: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_max: 25,
            kind: "linear-cumulative".into(),
        }
    }
}

/// Network shape; `K`, `T`, the patch grid and the label count come from the
/// other sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub channels: usize,
    pub blocks: usize,
    pub mfm_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pool: usize,
    pub condition_mode: ConditionMode,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::desk();
        Self {
            channels: d.channels,
            blocks: d.blocks,
            mfm_layers: d.mfm_layers,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            pool: d.pool,
            condition_mode: d.condition_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = DenoiserTrainConfig::default();
        Self {
            batch: d.batch,
            steps: d.steps,
            lr: d.lr,
            lr_halve_every: d.lr_halve_every,
            weight_decay: d.weight_decay,
            lambda: d.lambda,
            dropout: d.label_dropout,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub guidance_w: f64,
    pub completion_k: f64,
    pub denoise_k: f64,
    pub edit_k: f64,
    pub n_samples: usize,
    /// Observed box for completion, `x0:x1,y0:y1,z0:z1`.
    pub region: String,
    pub noise_alpha: f64,
    pub noise_kind: String,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            guidance_w: 0.5,
            completion_k: 0.5,
            denoise_k: 0.5,
            edit_k: 0.98,
            n_samples: 10,
            region: "0:1,0:1,0:0.5".into(),
            noise_alpha: 0.05,
            noise_kind: "gaussian".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub codec: CodecSection,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub training: TrainingSection,
    pub sampling: SamplingSection,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config fields serialize")
    }

    /// SHA-256 of the canonical text, hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_spec()?;
        self.schedule_kind()?;
        self.denoiser_config()?.validate()?;
        self.region()?;
        self.noise_kind()?;
        let s = &self.sampling;
        for (name, v) in [("completion_k", s.completion_k), ("denoise_k", s.denoise_k), ("edit_k", s.edit_k)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("sampling.{name} = {v} outside [0, 1]")));
            }
        }
        if !(s.guidance_w >= 0.0) || !(0.0..=1.0).contains(&self.training.dropout) {
            return Err(Error::Config("guidance_w must be >= 0 and dropout in [0, 1]".into()));
        }
        if self.geometry.classes == 0 || !(self.geometry.truncation > 0.0) {
            return Err(Error::Config("classes must be >= 1 and truncation > 0".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.geometry.grid; 3]
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::for_dims(self.dims(), self.geometry.patch_edge).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        self.schedule.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.schedule.t_max, self.codec.k, &self.schedule_kind()?)
    }

    pub fn region(&self) -> Result<Region> {
        self.sampling.region.parse()
    }

    pub fn noise_kind(&self) -> Result<NoiseKind> {
        self.sampling.noise_kind.parse()
    }

    pub fn codec_train(&self, seed: u64) -> CodecTrainConfig {
        let c = &self.codec;
        CodecTrainConfig {
            k: c.k,
            n_z: c.n_z,
            beta: c.beta,
            warmup_epochs: c.warmup_epochs,
            epochs: c.epochs,
            batch: c.batch,
            lr: c.lr,
            kmeans_iters: c.kmeans_iters,
            seed,
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let d = &self.denoiser;
        let per_axis = self.geometry.grid / self.geometry.patch_edge.max(1);
        Ok(DenoiserConfig {
            channels: d.channels,
            blocks: d.blocks,
            mfm_layers: d.mfm_layers,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            num_classes: self.geometry.classes + 1,
            condition_mode: d.condition_mode,
            cond_vocab: self.codec.k + 1,
            k: self.codec.k,
            patch_grid: [per_axis; 3],
            t_max: self.schedule.t_max,
            pool: d.pool,
            zero_residual: false,
        })
    }

    pub fn denoiser_train(&self, seed: u64) -> DenoiserTrainConfig {
        let t = &self.training;
        DenoiserTrainConfig {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            lr_halve_every: t.lr_halve_every,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            label_dropout: t.dropout,
            seed,
            parallel: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_setup() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.geometry.grid, c.geometry.patch_edge, c.codec.k, c.schedule.t_max), (16, 4, 32, 25));
        assert_eq!((c.training.lambda, c.training.dropout, c.sampling.guidance_w), (1e-3, 0.5, 0.5));
        let d = c.denoiser_config().unwrap();
        assert_eq!((d.n(), d.channels, d.blocks, d.mfm_layers), (64, 64, 4, 3));
    }

    #[test]
    fn text_round_trips_and_partial_files_fill_defaults() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let p = RunConfig::from_text("[training]\nsteps = 7\n").unwrap();
        assert_eq!(p.training.steps, 7);
        assert_eq!(p.codec, c.codec);
        assert_eq!(RunConfig::from_text("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(RunConfig::from_text("[training]\nstep = 7\n").is_err());
        assert!(RunConfig::from_text("[nonsense]\n").is_err());
        assert!(RunConfig::from_text("[geometry]\npatch_edge = 5\n").is_err());
        assert!(RunConfig::from_text("[schedule]\nkind = \"cosine\"\n").is_err());
        assert!(RunConfig::from_text("[sampling]\nedit_k = 1.5\n").is_err());
        assert!(RunConfig::from_text("[sampling]\nregion = \"0:1\"\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.steps += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
