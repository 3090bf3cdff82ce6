//! Reverse-chain drivers for every task: sampling from the prior, and
//! corruption-start completion, denoising and editing.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, TokenMap};
use crate::denoiser::{DenoiserNet, NetInput};
use crate::diffusion::{apply_cfg, forward_marginal, prior, reverse_step, sample_categorical, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::seed;
use crate::shape::{truncate_and_normalize, TsdfGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Unconditional,
    Completion,
    Denoise,
    Edit,
    ClassConditional,
    TokenSequence,
}

impl Mode {
    /// Default corruption start `k/T`.
    pub fn default_start_fraction(self) -> f64 {
        match self {
            Mode::Completion | Mode::Denoise => 0.5,
            Mode::Edit => 0.98,
            Mode::Unconditional | Mode::ClassConditional | Mode::TokenSequence => 1.0,
        }
    }
}

/// Axis-aligned box in fractions of the grid extent, `lo <= hi` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Region {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(0.0..=1.0).contains(&lo[a]) || !(0.0..=1.0).contains(&hi[a]) || lo[a] > hi[a] {
                return Err(Error::invalid(format!("region {lo:?}..{hi:?} is not inside [0, 1]^3")));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn full() -> Self {
        Self { lo: [0.0; 3], hi: [1.0; 3] }
    }

    /// `z ∈ [0, 0.5]`.
    pub fn bottom_half() -> Self {
        Self {
            lo: [0.0; 3],
            hi: [1.0, 1.0, 0.5],
        }
    }

    /// Patches lying entirely inside the box, in token order.
    pub fn patch_mask(&self, per_axis: [usize; 3]) -> Vec<bool> {
        const EPS: f64 = 1e-9;
        let n: usize = per_axis.iter().product();
        (0..n)
            .map(|i| {
                let c = [i % per_axis[0], (i / per_axis[0]) % per_axis[1], i / (per_axis[0] * per_axis[1])];
                (0..3).all(|a| {
                    let g = per_axis[a] as f64;
                    c[a] as f64 / g >= self.lo[a] - EPS && (c[a] + 1) as f64 / g <= self.hi[a] + EPS
                })
            })
            .collect()
    }
}

/// `x0:x1,y0:y1,z0:z1`, e.g. `0:1,0:1,0:0.5` for the bottom half.
impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("region {s:?}: expected x0:x1,y0:y1,z0:z1"));
        let axes: Vec<&str> = s.split(',').collect();
        if axes.len() != 3 {
            return Err(bad());
        }
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for (a, part) in axes.iter().enumerate() {
            let (l, h) = part.split_once(':').ok_or_else(bad)?;
            lo[a] = l.trim().parse().map_err(|_| bad())?;
            hi[a] = h.trim().parse().map_err(|_| bad())?;
        }
        Region::new(lo, hi).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSpec {
    pub mode: Mode,
    /// Corruption start `k/T` in `[0, 1]`.
    pub start_fraction: f64,
    pub region: Option<Region>,
    pub class_label: Option<u32>,
    /// Condition tokens for token-sequence mode.
    pub cond_tokens: Vec<u32>,
    pub guidance_w: f64,
    pub seed: u64,
}

impl ConditionSpec {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            start_fraction: mode.default_start_fraction(),
            region: None,
            class_label: None,
            cond_tokens: Vec::new(),
            guidance_w: 0.5,
            seed,
        }
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = Some(region);
        self
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.class_label = Some(label);
        self
    }

    pub fn with_start(mut self, fraction: f64) -> Self {
        self.start_fraction = fraction;
        self
    }

    pub fn with_guidance(mut self, w: f64) -> Self {
        self.guidance_w = w;
        self
    }

    pub fn with_cond_tokens(mut self, tokens: Vec<u32>) -> Self {
        self.cond_tokens = tokens;
        self
    }

    /// The start step `k = round(k/T · T)`.
    pub fn start_step(&self, t_max: usize) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.start_fraction) {
            return Err(Error::invalid(format!("start fraction {} outside [0, 1]", self.start_fraction)));
        }
        Ok(((self.start_fraction * t_max as f64).round() as usize).min(t_max))
    }
}

/// One produced shape.
#[derive(Clone, Debug)]
pub struct Sample {
    pub tokens: TokenMap,
    pub grid: TsdfGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            _ => Err(Error::Config(format!("noise kind {s:?}: expected gaussian or uniform"))),
        }
    }
}

/// `X + α·ε` with `ε ~ N(0, 1)` or `U[-1, 1]` per voxel, clamped back to `[-τ, τ]`.
pub fn add_noise(grid: &TsdfGrid, alpha: f64, kind: NoiseKind, seed_value: u64) -> Result<TsdfGrid> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("noise level must be >= 0, got {alpha}")));
    }
    let mut rng = seed::rng(seed_value, "noise", 0);
    let raw: Vec<f32> = grid
        .values()
        .iter()
        .map(|&v| {
            let e: f64 = match kind {
                NoiseKind::Gaussian => StandardNormal.sample(&mut rng),
                NoiseKind::Uniform => rng.random_range(-1.0..=1.0),
            };
            (f64::from(v) + alpha * e) as f32
        })
        .collect();
    truncate_and_normalize(grid.dims(), &raw, grid.truncation())
}

/// A trained denoiser, schedule and codec bundled for sampling.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub net: &'a DenoiserNet,
    pub schedule: &'a DiffusionSchedule,
    pub codec: &'a Codec,
}

impl<'a> Pipeline<'a> {
    pub fn new(net: &'a DenoiserNet, schedule: &'a DiffusionSchedule, codec: &'a Codec) -> Result<Self> {
        let c = &net.config;
        if schedule.k() != c.k || codec.k() != c.k {
            return Err(Error::invalid(format!(
                "K mismatch: network {}, schedule {}, codec {}",
                c.k,
                schedule.k(),
                codec.k()
            )));
        }
        if schedule.t_max() != c.t_max {
            return Err(Error::invalid(format!("T mismatch: network {}, schedule {}", c.t_max, schedule.t_max())));
        }
        if codec.patch.per_axis != c.patch_grid {
            return Err(Error::invalid(format!(
                "patch grid mismatch: network {:?}, codec {:?}",
                c.patch_grid, codec.patch.per_axis
            )));
        }
        Ok(Self { net, schedule, codec })
    }

    /// Model log-probabilities at step `t`, guided when a label or condition is present.
    pub fn guided_log_probs(&self, tokens: &[u32], t: usize, label: Option<u32>, cond: &[u32], w: f64) -> Result<Vec<f64>> {
        let bare = NetInput::new(tokens, t);
        if label.is_none() && cond.is_empty() {
            return self.net.log_probs(&bare);
        }
        let c = self.net.log_probs(&bare.with_label(label).with_cond(cond))?;
        if w == 0.0 {
            return Ok(c);
        }
        let u = self.net.log_probs(&bare)?;
        let k = self.net.config.k;
        let mut out = Vec::with_capacity(c.len());
        for (cr, ur) in c.chunks(k).zip(u.chunks(k)) {
            out.extend(apply_cfg(cr, ur, w)?);
        }
        Ok(out)
    }

    /// Run the reverse chain from `start` at step `from_t` down to 0.
    pub fn run_chain(
        &self,
        start: Vec<u32>,
        from_t: usize,
        label: Option<u32>,
        cond: &[u32],
        w: f64,
        rng: &mut seed::Rng,
    ) -> Result<Vec<u32>> {
        let mut s = start;
        for t in (1..=from_t).rev() {
            let logp = self.guided_log_probs(&s, t, label, cond, w)?;
            s = reverse_step(self.schedule, &logp, &s, t, rng)?;
        }
        let mask = self.schedule.mask() as u32;
        if let Some(position) = s.iter().position(|&v| v >= mask) {
            return Err(Error::UnresolvedMask { position });
        }
        Ok(s)
    }

    fn finish(&self, indices: Vec<u32>, label: Option<u32>) -> Result<Sample> {
        let tokens = TokenMap::new(indices, self.codec.patch.per_axis, self.codec.k(), label)?;
        let grid = self.codec.detokenize(&tokens)?;
        Ok(Sample { tokens, grid })
    }

    /// `s_k ~ q(s_k | s_0)`; `k = 0` leaves the map untouched.
    fn diffuse(&self, s0: &[u32], k: usize, rng: &mut seed::Rng) -> Result<Vec<u32>> {
        if k == 0 {
            return Ok(s0.to_vec());
        }
        forward_marginal(self.schedule, s0, k, rng)
    }

    /// Draw `s_T` from the chain's terminal marginal (all `[MASK]` when `γ̄_T = 1`).
    fn prior_map(&self, rng: &mut seed::Rng) -> Vec<u32> {
        let p = prior(self.schedule);
        (0..self.net.config.n()).map(|_| sample_categorical(&p, rng) as u32).collect()
    }

    /// Generate from the prior; the label and condition tokens of `spec` guide
    /// the chain in class-conditional and token-sequence modes.
    pub fn sample(&self, spec: &ConditionSpec, index: u64) -> Result<Sample> {
        let mut rng = seed::rng(spec.seed, "sample", index);
        let (label, cond): (Option<u32>, &[u32]) = match spec.mode {
            Mode::ClassConditional => (Some(spec.class_label.ok_or_else(|| Error::invalid("class-conditional sampling needs a label"))?), &[]),
            Mode::TokenSequence => (None, &spec.cond_tokens),
            _ => (None, &[]),
        };
        let start = self.prior_map(&mut rng);
        let s = self.run_chain(start, self.schedule.t_max(), label, cond, spec.guidance_w, &mut rng)?;
        self.finish(s, label)
    }

    /// `count` independent samples with seeds derived from `spec.seed`.
    pub fn sample_many(&self, spec: &ConditionSpec, count: usize) -> Result<Vec<Sample>> {
        par_collect(count, |i| self.sample(spec, i as u64))
    }

    /// Corruption-start completion of the patches of `partial` inside `spec.region`.
    pub fn complete(&self, partial: &TsdfGrid, spec: &ConditionSpec, n_samples: usize) -> Result<Vec<Sample>> {
        let region = spec.region.ok_or_else(|| Error::invalid("completion needs an observed region"))?;
        let observed = region.patch_mask(self.codec.patch.per_axis);
        if !observed.iter().any(|&o| o) {
            return Err(Error::invalid("observed region covers no whole patch"));
        }
        let k = spec.start_step(self.schedule.t_max())?;
        if k == 0 && observed.iter().any(|&o| !o) {
            return Err(Error::invalid("k = 0 cannot fill unobserved patches; observe everything or raise k"));
        }
        let clean = self.codec.tokenize(partial, spec.class_label)?;
        let mask = self.schedule.mask() as u32;
        par_collect(n_samples, |i| {
            let mut rng = seed::rng(spec.seed, "complete", i as u64);
            let start = if k == 0 {
                clean.indices.clone()
            } else {
                let noisy = forward_marginal(self.schedule, &clean.indices, k, &mut rng)?;
                noisy
                    .into_iter()
                    .zip(&observed)
                    .map(|(s, &o)| if o { s } else { mask })
                    .collect()
            };
            let s = self.run_chain(start, k, spec.class_label, &spec.cond_tokens, spec.guidance_w, &mut rng)?;
            self.finish(s, spec.class_label)
        })
    }

    /// Encode `noisy`, diffuse every token to `k` and run the chain back.
    pub fn denoise(&self, noisy: &TsdfGrid, spec: &ConditionSpec) -> Result<Sample> {
        let k = spec.start_step(self.schedule.t_max())?;
        let clean = self.codec.tokenize(noisy, spec.class_label)?;
        let mut rng = seed::rng(spec.seed, "denoise", 0);
        let start = self.diffuse(&clean.indices, k, &mut rng)?;
        let s = self.run_chain(start, k, spec.class_label, &[], spec.guidance_w, &mut rng)?;
        self.finish(s, spec.class_label)
    }

    /// Diffuse `current` to `k` and regenerate under `new_label` with guidance.
    pub fn edit(&self, current: &TokenMap, new_label: u32, spec: &ConditionSpec) -> Result<Sample> {
        if let Some(position) = current.first_mask() {
            return Err(Error::UnresolvedMask { position });
        }
        if new_label as usize >= self.net.config.num_classes {
            return Err(Error::invalid(format!("label {new_label} >= num_classes {}", self.net.config.num_classes)));
        }
        let k = spec.start_step(self.schedule.t_max())?;
        let mut rng = seed::rng(spec.seed, "edit", 0);
        let start = self.diffuse(&current.indices, k, &mut rng)?;
        let s = self.run_chain(start, k, Some(new_label), &[], spec.guidance_w, &mut rng)?;
        self.finish(s, Some(new_label))
    }
}

fn par_collect<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

#[cfg(test)]
mod tests;
