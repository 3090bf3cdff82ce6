use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Slack for rounding when validating probabilities.
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleKind {
    /// Cumulative mask mass `0.9 t/T` and cumulative uniform mass `0.1 t/T`,
    /// so nothing of the clean token survives at `t = T`.
    LinearCumulative,
    /// Explicit per-step `(γ_t, β_t)` for `t = 1..=T`.
    PerStep { gamma: Vec<f64>, beta: Vec<f64> },
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-cumulative" => Ok(ScheduleKind::LinearCumulative),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?} (expected \"linear-cumulative\")"
            ))),
        }
    }
}

/// Mask-and-uniform corruption schedule over `K` categories plus `[MASK]` (index `K`).
///
/// One step maps category `i` to itself with probability `1 - γ_t - (K-1)β_t/K`,
/// to each other category with `β_t/K`, and to `[MASK]` with `γ_t`. Written as
/// `keep_t·e_i + β_t·uniform + γ_t·e_mask` with `keep_t = 1 - γ_t - β_t`, the
/// product of steps keeps the same form with cumulative
/// `keep_bar_t = Π keep_s`, `gamma_bar_t = 1 - Π(1 - γ_s)` and total uniform
/// mass `beta_bar_t = 1 - keep_bar_t - gamma_bar_t`.
///
/// All vectors are indexed by `t = 0..=T`; index 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    k: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    keep_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

pub fn build_schedule(t_max: usize, k: usize, kind: &ScheduleKind) -> Result<DiffusionSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    match kind {
        ScheduleKind::LinearCumulative => {
            let tt = t_max as f64;
            let gbar = |t: usize| 0.9 * t as f64 / tt;
            let kbar = |t: usize| 1.0 - t as f64 / tt;
            let mut gamma = Vec::with_capacity(t_max);
            let mut beta = Vec::with_capacity(t_max);
            for t in 1..=t_max {
                let g = 1.0 - (1.0 - gbar(t)) / (1.0 - gbar(t - 1));
                let keep = kbar(t) / kbar(t - 1);
                gamma.push(g);
                beta.push((1.0 - g - keep).max(0.0));
            }
            DiffusionSchedule::from_steps(k, &gamma, &beta)
        }
        ScheduleKind::PerStep { gamma, beta } => {
            if gamma.len() != t_max || beta.len() != t_max {
                return Err(Error::InvalidSchedule(format!(
                    "expected {t_max} per-step values, got γ {} and β {}",
                    gamma.len(),
                    beta.len()
                )));
            }
            DiffusionSchedule::from_steps(k, gamma, beta)
        }
    }
}

impl DiffusionSchedule {
    /// Schedule from per-step `γ_t, β_t` (`t = 1..=T`).
    pub fn from_steps(k: usize, gamma: &[f64], beta: &[f64]) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidSchedule(format!("K must be >= 2, got {k}")));
        }
        if gamma.is_empty() || gamma.len() != beta.len() {
            return Err(Error::InvalidSchedule("γ and β must be nonempty and equal length".into()));
        }
        let kf = k as f64;
        for (i, (&g, &b)) in gamma.iter().zip(beta).enumerate() {
            let diag = 1.0 - g - (kf - 1.0) * b / kf;
            if !g.is_finite() || !b.is_finite() || g < 0.0 || g > 1.0 || b < 0.0 || diag < -PROB_EPS {
                return Err(Error::InvalidSchedule(format!(
                    "step {}: γ={g}, β={b} gives a negative transition probability (diagonal {diag})",
                    i + 1
                )));
            }
        }
        let t_max = gamma.len();
        let mut s = Self {
            k,
            gamma: Vec::with_capacity(t_max + 1),
            beta: Vec::with_capacity(t_max + 1),
            keep_bar: Vec::with_capacity(t_max + 1),
            gamma_bar: Vec::with_capacity(t_max + 1),
            beta_bar: Vec::with_capacity(t_max + 1),
        };
        s.gamma.push(0.0);
        s.beta.push(0.0);
        s.keep_bar.push(1.0);
        s.gamma_bar.push(0.0);
        s.beta_bar.push(0.0);
        let mut keep_prod = 1.0;
        let mut unmasked = 1.0;
        for t in 0..t_max {
            let (g, b) = (gamma[t], beta[t]);
            keep_prod *= 1.0 - g - b;
            unmasked *= 1.0 - g;
            s.gamma.push(g);
            s.beta.push(b);
            s.keep_bar.push(keep_prod);
            s.gamma_bar.push(1.0 - unmasked);
            s.beta_bar.push(unmasked - keep_prod);
        }
        for t in 1..=t_max {
            let kb = s.keep_bar[t];
            let off = s.beta_bar[t] / kf;
            if off < -PROB_EPS || kb + off < -PROB_EPS {
                return Err(Error::InvalidSchedule(format!(
                    "cumulative step {t} has a negative probability"
                )));
            }
        }
        Ok(s)
    }

    /// Number of real categories; `[MASK]` is index `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> usize {
        self.k
    }

    pub fn states(&self) -> usize {
        self.k + 1
    }

    pub fn t_max(&self) -> usize {
        self.gamma.len() - 1
    }

    /// Non-mask mass of one step, `1 - γ_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.gamma[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn keep_bar(&self, t: usize) -> f64 {
        self.keep_bar[t]
    }

    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    /// Total cumulative uniform mass; each category receives `beta_bar / K`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.t_max())));
        }
        Ok(())
    }

    fn entry(&self, keep: f64, uni: f64, mask: f64, from: usize, to: usize) -> f64 {
        if from == self.k {
            return if to == self.k { 1.0 } else { 0.0 };
        }
        if to == self.k {
            mask
        } else if to == from {
            keep + uni / self.k as f64
        } else {
            uni / self.k as f64
        }
    }

    /// One-step probability `q(s_t = to | s_{t-1} = from)`.
    pub fn q(&self, t: usize, from: usize, to: usize) -> f64 {
        let keep = 1.0 - self.gamma[t] - self.beta[t];
        self.entry(keep, self.beta[t], self.gamma[t], from, to)
    }

    /// Cumulative probability `q(s_t = to | s_0 = from)`; `t = 0` is the identity.
    pub fn qbar(&self, t: usize, from: usize, to: usize) -> f64 {
        self.entry(self.keep_bar[t], self.beta_bar[t], self.gamma_bar[t], from, to)
    }

    pub fn q_matrix(&self, t: usize) -> Vec<Vec<f64>> {
        let n = self.states();
        (0..n).map(|i| (0..n).map(|j| self.q(t, i, j)).collect()).collect()
    }

    pub fn qbar_matrix(&self, t: usize) -> Vec<Vec<f64>> {
        let n = self.states();
        (0..n).map(|i| (0..n).map(|j| self.qbar(t, i, j)).collect()).collect()
    }

    pub fn qbar_row(&self, t: usize, from: usize) -> Vec<f64> {
        (0..self.states()).map(|j| self.qbar(t, from, j)).collect()
    }

    /// Tab-separated table of `t`, per-step and cumulative values.
    pub fn dump(&self) -> String {
        let mut out = String::from("t\talpha\tbeta\tgamma\talpha_bar\tbeta_bar\tgamma_bar\n");
        for t in 0..=self.t_max() {
            let _ = writeln!(
                out,
                "{t}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
                self.alpha(t),
                self.beta[t],
                self.gamma[t],
                self.keep_bar[t],
                self.beta_bar[t],
                self.gamma_bar[t]
            );
        }
        out
    }
}
