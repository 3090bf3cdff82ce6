use super::chain::{check_state, floored_ln, posterior, reverse_distribution, CleanToken};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::seed;

/// Anything that maps a corrupted map and timestep to `N × K` log-probabilities over `s_0`.
pub trait Denoiser {
    fn log_probs(&self, tokens: &[u32], t: usize) -> Result<Vec<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&[u32], usize) -> Result<Vec<f64>>,
{
    fn log_probs(&self, tokens: &[u32], t: usize) -> Result<Vec<f64>> {
        self(tokens, t)
    }
}

/// Prior over `s_T` for one position: all-mask when fully masked, else the
/// `T`-step marginal of a uniform clean token.
pub fn prior(schedule: &DiffusionSchedule) -> Vec<f64> {
    let tt = schedule.t_max();
    let n = schedule.states();
    if schedule.gamma_bar(tt) >= 1.0 {
        let mut p = vec![0.0; n];
        p[schedule.mask()] = 1.0;
        return p;
    }
    let k = schedule.k() as f64;
    (0..n)
        .map(|j| (0..schedule.k()).map(|i| schedule.qbar(tt, i, j)).sum::<f64>() / k)
        .collect()
}

/// `KL(q ‖ p)` for probability vectors; `p` is floored in log space.
pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - floored_ln(b)))
        .sum()
}

/// Prior term `Σ_i KL(q(s_T | s_0^i) ‖ p(s_T))`.
pub fn prior_kl(schedule: &DiffusionSchedule, s0: &[u32]) -> f64 {
    let p = prior(schedule);
    s0.iter()
        .map(|&s| kl(&schedule.qbar_row(schedule.t_max(), s as usize), &p))
        .sum()
}

fn step_kl(
    schedule: &DiffusionSchedule,
    s0: &[u32],
    s_t: &[u32],
    t: usize,
    logp: &[f64],
) -> Result<f64> {
    let k = schedule.k();
    let mut total = 0.0;
    for (i, (&a, &b)) in s0.iter().zip(s_t).enumerate() {
        let q: Vec<f64> = posterior(schedule, b as usize, CleanToken::Index(a as usize), t)?
            .into_iter()
            .map(f64::exp)
            .collect();
        let p = reverse_distribution(schedule, &logp[i * k..(i + 1) * k], b as usize, t)?;
        total += kl(&q, &p);
    }
    Ok(total)
}

fn check_map(schedule: &DiffusionSchedule, s0: &[u32]) -> Result<()> {
    if s0.is_empty() {
        return Err(Error::invalid("empty token map"));
    }
    for &s in s0 {
        check_state(schedule, s as usize)?;
        if s as usize == schedule.mask() {
            return Err(Error::invalid("clean map contains [MASK]"));
        }
    }
    Ok(())
}

/// Upper bound on `-ln p_θ(s_0)` (nats per map), one sampled `s_t` per step.
pub fn elbo(
    schedule: &DiffusionSchedule,
    s0: &[u32],
    denoiser: &impl Denoiser,
    seed_value: u64,
) -> Result<f64> {
    check_map(schedule, s0)?;
    let mut total = prior_kl(schedule, s0);
    for t in 1..=schedule.t_max() {
        let mut rng = seed::rng(seed_value, "elbo-step", t as u64);
        let s_t = super::chain::forward_marginal(schedule, s0, t, &mut rng)?;
        let logp = denoiser.log_probs(&s_t, t)?;
        total += step_kl(schedule, s0, &s_t, t, &logp)?;
    }
    Ok(total)
}

/// The same bound with the expectation over `s_t` taken exactly by
/// enumerating every joint corrupted map. Only feasible for tiny maps.
pub fn elbo_exact(schedule: &DiffusionSchedule, s0: &[u32], denoiser: &impl Denoiser) -> Result<f64> {
    check_map(schedule, s0)?;
    let n = schedule.states();
    let combos = (n as f64).powi(s0.len() as i32);
    if combos > 1e6 {
        return Err(Error::invalid(format!("{combos} joint states is too many to enumerate")));
    }
    let mut total = prior_kl(schedule, s0);
    let mut state = vec![0u32; s0.len()];
    for t in 1..=schedule.t_max() {
        state.iter_mut().for_each(|s| *s = 0);
        loop {
            let w: f64 = s0
                .iter()
                .zip(&state)
                .map(|(&a, &b)| schedule.qbar(t, a as usize, b as usize))
                .product();
            if w > 0.0 {
                let logp = denoiser.log_probs(&state, t)?;
                total += w * step_kl(schedule, s0, &state, t, &logp)?;
            }
            // Odometer increment over all (K+1)^N maps.
            let mut i = 0;
            while i < state.len() {
                state[i] += 1;
                if (state[i] as usize) < n {
                    break;
                }
                state[i] = 0;
                i += 1;
            }
            if i == state.len() {
                break;
            }
        }
    }
    Ok(total)
}
