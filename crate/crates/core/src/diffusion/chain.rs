use rand::Rng;

use super::schedule::DiffusionSchedule;
use crate::autodiff::logsumexp;
use crate::error::{Error, Result};

/// `ln(1e-30)`: log-probabilities never go below this.
pub const LOG_FLOOR: f64 = -69.07755278982137;

pub fn floored_ln(p: f64) -> f64 {
    if p > 1e-30 {
        p.ln()
    } else {
        LOG_FLOOR
    }
}

/// Log one-hot vector of length `n` at `index`.
pub fn log_one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![LOG_FLOOR; n];
    v[index] = 0.0;
    v
}

/// Floor at [`LOG_FLOOR`], then shift so the exponentials sum to one.
pub fn normalize_log(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(LOG_FLOOR);
    }
    let z = logsumexp(v);
    for x in v.iter_mut() {
        *x = (*x - z).max(LOG_FLOOR);
    }
}

/// What is known about the clean token when forming the posterior.
#[derive(Clone, Copy, Debug)]
pub enum CleanToken<'a> {
    Index(usize),
    /// Log-probabilities over the `K` real categories.
    LogProbs(&'a [f64]),
}

pub(crate) fn check_state(schedule: &DiffusionSchedule, s: usize) -> Result<()> {
    if s > schedule.mask() {
        return Err(Error::invalid(format!("state {s} exceeds mask index {}", schedule.mask())));
    }
    Ok(())
}

/// `ln q(s_{t-1} = j | s_t, s_0 = k)` for all `j`, or `None` when `s_t` is
/// unreachable from `k`.
fn log_posterior_from(schedule: &DiffusionSchedule, s_t: usize, k: usize, t: usize) -> Option<Vec<f64>> {
    let den = schedule.qbar(t, k, s_t);
    if den <= 0.0 {
        return None;
    }
    let lden = den.ln();
    Some(
        (0..schedule.states())
            .map(|j| floored_ln(schedule.q(t, j, s_t)) + floored_ln(schedule.qbar(t - 1, k, j)) - lden)
            .collect(),
    )
}

/// Log-probabilities of `q(s_{t-1} | s_t, s_0)` over all `K + 1` states.
///
/// For a distribution over `s_0`, returns the mixture
/// `Σ_k p(k) q(s_{t-1} | s_t, k)` over the clean tokens that can reach `s_t`,
/// with `p` renormalized over those tokens.
pub fn posterior(
    schedule: &DiffusionSchedule,
    s_t: usize,
    s0: CleanToken<'_>,
    t: usize,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_state(schedule, s_t)?;
    let k_cats = schedule.k();
    let mut out = match s0 {
        CleanToken::Index(k) => {
            if k >= k_cats {
                return Err(Error::invalid(format!("clean token {k} must be a category below {k_cats}")));
            }
            log_posterior_from(schedule, s_t, k, t).ok_or(Error::InconsistentState { state: s_t, t })?
        }
        CleanToken::LogProbs(lp) => {
            if lp.len() != k_cats {
                return Err(Error::invalid(format!("expected {k_cats} log-probabilities, got {}", lp.len())));
            }
            let mut acc: Vec<Vec<f64>> = vec![Vec::new(); schedule.states()];
            let mut weights = Vec::new();
            for (k, &lpk) in lp.iter().enumerate() {
                if let Some(row) = log_posterior_from(schedule, s_t, k, t) {
                    weights.push(lpk);
                    for (j, v) in row.into_iter().enumerate() {
                        acc[j].push(lpk + v);
                    }
                }
            }
            if weights.is_empty() {
                return Err(Error::InconsistentState { state: s_t, t });
            }
            let wz = logsumexp(&weights);
            acc.iter().map(|terms| logsumexp(terms) - wz).collect()
        }
    };
    normalize_log(&mut out);
    Ok(out)
}

/// Probabilities of `p_θ(s_{t-1} | s_t)` given the model's log-probabilities over `s_0`.
pub fn reverse_distribution(
    schedule: &DiffusionSchedule,
    logp_s0: &[f64],
    s_t: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let lp = posterior(schedule, s_t, CleanToken::LogProbs(logp_s0), t)?;
    Ok(lp.into_iter().map(f64::exp).collect())
}

/// Draw an index from unnormalized non-negative weights.
pub fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_clean(schedule: &DiffusionSchedule, s0: &[u32]) -> Result<()> {
    if let Some(&bad) = s0.iter().find(|&&s| s as usize >= schedule.k()) {
        return Err(Error::invalid(format!(
            "clean map holds index {bad}; expected categories below {}",
            schedule.k()
        )));
    }
    Ok(())
}

/// Sample `s_t ~ q(s_t | s_0)` independently per position.
pub fn forward_marginal(
    schedule: &DiffusionSchedule,
    s0: &[u32],
    t: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    schedule.check_t(t)?;
    check_clean(schedule, s0)?;
    Ok(s0
        .iter()
        .map(|&s| sample_categorical(&schedule.qbar_row(t, s as usize), rng) as u32)
        .collect())
}

/// Jointly sample `(s_{t-1}, s_t)` from the forward chain started at `s_0`.
pub fn sample_step_pair(
    schedule: &DiffusionSchedule,
    s0: &[u32],
    t: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, Vec<u32>)> {
    schedule.check_t(t)?;
    check_clean(schedule, s0)?;
    let n = schedule.states();
    let mut prev = Vec::with_capacity(s0.len());
    let mut cur = Vec::with_capacity(s0.len());
    for &s in s0 {
        let a = sample_categorical(&schedule.qbar_row(t - 1, s as usize), rng);
        let row: Vec<f64> = (0..n).map(|j| schedule.q(t, a, j)).collect();
        let b = sample_categorical(&row, rng);
        prev.push(a as u32);
        cur.push(b as u32);
    }
    Ok((prev, cur))
}

/// One reverse step for a whole map. `logp` holds `N × K` model
/// log-probabilities over `s_0`. At `t = 1` the most likely token is taken.
pub fn reverse_step(
    schedule: &DiffusionSchedule,
    logp: &[f64],
    s_t: &[u32],
    t: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    let k = schedule.k();
    if logp.len() != s_t.len() * k {
        return Err(Error::invalid(format!(
            "{} log-probabilities for {} positions of {k} categories",
            logp.len(),
            s_t.len()
        )));
    }
    s_t.iter()
        .enumerate()
        .map(|(i, &s)| {
            let p = reverse_distribution(schedule, &logp[i * k..(i + 1) * k], s as usize, t)?;
            let next = if t == 1 { argmax(&p) } else { sample_categorical(&p, rng) };
            Ok(next as u32)
        })
        .collect()
}

/// Guided log-probabilities `(1+w)·cond - w·uncond`, floored and renormalized.
/// `w = 0` returns `cond` untouched.
pub fn apply_cfg(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::invalid(format!("cond has {} entries, uncond {}", cond.len(), uncond.len())));
    }
    if !(w >= 0.0) {
        return Err(Error::invalid(format!("guidance weight must be >= 0, got {w}")));
    }
    if w == 0.0 {
        return Ok(cond.to_vec());
    }
    let mut out: Vec<f64> = cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (1.0 + w) * c - w * u)
        .collect();
    normalize_log(&mut out);
    Ok(out)
}

/// Entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Lowest reachable value of the mean per-position main loss for a model that
/// knows `s0` exactly: the expected entropy of the true posterior, averaged
/// over uniform `t` and positions.
pub fn posterior_entropy_floor(schedule: &DiffusionSchedule, s0: &[u32]) -> Result<f64> {
    check_clean(schedule, s0)?;
    let tt = schedule.t_max();
    let mut total = 0.0;
    for &s in s0 {
        for t in 1..=tt {
            for s_t in 0..schedule.states() {
                let w = schedule.qbar(t, s as usize, s_t);
                if w <= 0.0 {
                    continue;
                }
                let lp = posterior(schedule, s_t, CleanToken::Index(s as usize), t)?;
                let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                total += w * entropy(&p);
            }
        }
    }
    Ok(total / (tt * s0.len()) as f64)
}
