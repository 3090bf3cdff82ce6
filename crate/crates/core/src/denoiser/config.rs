use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    None,
    Class,
    TokenSequence,
}

/// Shape of the denoising transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    pub mfm_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Label table size; the last row is the empty label.
    pub num_classes: usize,
    pub condition_mode: ConditionMode,
    /// Condition-token vocabulary for cross-attention.
    pub cond_vocab: usize,
    pub k: usize,
    /// Patches per axis; `N` is their product.
    pub patch_grid: [usize; 3],
    pub t_max: usize,
    /// Low-branch pooling factor per axis.
    pub pool: usize,
    /// Zero every residual output projection so each block starts as the identity.
    pub zero_residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            channels: 64,
            blocks: 4,
            mfm_layers: 3,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 4,
            condition_mode: ConditionMode::Class,
            cond_vocab: 33,
            k: 32,
            patch_grid: [4, 4, 4],
            t_max: 25,
            pool: 2,
            zero_residual: false,
        }
    }

    /// Full-scale preset: 64³ volumes in 8³ patches, K 512, T 100.
    pub fn full_scale() -> Self {
        Self {
            channels: 256,
            blocks: 16,
            mfm_layers: 3,
            heads: 8,
            mlp_ratio: 4,
            num_classes: 14,
            condition_mode: ConditionMode::Class,
            cond_vocab: 513,
            k: 512,
            patch_grid: [8, 8, 8],
            t_max: 100,
            pool: 2,
            zero_residual: false,
        }
    }

    pub fn n(&self) -> usize {
        self.patch_grid.iter().product()
    }

    /// Index of the empty label.
    pub fn empty_label(&self) -> usize {
        self.num_classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} must be a positive multiple of heads {}", self.channels, self.heads));
        }
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.num_classes == 0 {
            return bad("num_classes must include the empty label".into());
        }
        if self.t_max == 0 || self.mlp_ratio == 0 {
            return bad("t_max and mlp_ratio must be >= 1".into());
        }
        if self.patch_grid.iter().any(|&p| p == 0) {
            return bad(format!("patch_grid {:?} has an empty axis", self.patch_grid));
        }
        if self.mfm_layers > 0 && (self.pool == 0 || self.patch_grid.iter().any(|&p| p % self.pool != 0)) {
            return bad(format!("pool {} does not divide patch_grid {:?}", self.pool, self.patch_grid));
        }
        if self.condition_mode == ConditionMode::TokenSequence && self.cond_vocab == 0 {
            return bad("token-sequence conditioning needs cond_vocab >= 1".into());
        }
        Ok(())
    }

    /// `key = value` text, one field per line.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config fields serialize")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_text(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}
