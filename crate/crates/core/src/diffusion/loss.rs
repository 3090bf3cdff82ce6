use super::chain::{floored_ln, CleanToken};
use super::schedule::DiffusionSchedule;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Aux-loss weight.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Scalar pieces of the per-map training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub aux: Var,
}

/// Build `L_main + λ·L_aux` on `g` for one map.
///
/// `logp` is the model's `[N, K]` log-probabilities over `s_0` given `s_t`.
/// `L_main` is the mean over positions of `-ln p_θ(s_{t-1} | s_t)` at the
/// sampled `s_{t-1}`; `L_aux` is the mean of `-ln p_θ(s_0 | s_t)`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    g: &mut Graph,
    schedule: &DiffusionSchedule,
    logp: Var,
    s0: &[u32],
    s_prev: &[u32],
    s_t: &[u32],
    t: usize,
    lambda: f64,
) -> Result<LossTerms> {
    schedule.check_t(t)?;
    let k = schedule.k();
    let n = s0.len();
    if g.shape(logp) != [n, k] || s_prev.len() != n || s_t.len() != n {
        return Err(Error::shape(
            "training_loss",
            format!("logp {:?} for {n} positions and {k} categories", g.shape(logp)),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("λ must be >= 0, got {lambda}")));
    }
    // ln q(s_{t-1} | s_t, k) for every candidate clean token k.
    let mut coef = Vec::with_capacity(n * k);
    let mut reach = Vec::with_capacity(n * k);
    let mut any_unreachable = false;
    for i in 0..n {
        let (a, b) = (s_prev[i] as usize, s_t[i] as usize);
        for c in 0..k {
            let den = schedule.qbar(t, c, b);
            if den > 0.0 {
                let num = schedule.q(t, a, b) * schedule.qbar(t - 1, c, a);
                coef.push(floored_ln(num / den));
                reach.push(0.0);
            } else {
                any_unreachable = true;
                coef.push(-1e30);
                reach.push(-1e30);
            }
        }
    }
    let coef = g.constant_from(&[n, k], coef)?;
    let joint = g.add(coef, logp)?;
    let mut main_rows = g.logsumexp(joint);
    if any_unreachable {
        // Renormalize the model's belief over tokens that can reach s_t.
        let reach = g.constant_from(&[n, k], reach)?;
        let masked = g.add(reach, logp)?;
        let z = g.logsumexp(masked);
        main_rows = g.sub(main_rows, z)?;
    }
    let main_mean = g.mean(main_rows);
    let main = g.scale(main_mean, -1.0);
    let idx: Vec<usize> = s0.iter().map(|&s| s as usize).collect();
    let picked = g.gather(logp, &idx)?;
    let aux_mean = g.mean(picked);
    let aux = g.scale(aux_mean, -1.0);
    let weighted = g.scale(aux, lambda);
    let total = g.add(main, weighted)?;
    Ok(LossTerms { total, main, aux })
}

/// The loss value without a graph, for evaluation.
pub fn loss_value(
    schedule: &DiffusionSchedule,
    logp: &[f64],
    s0: &[u32],
    s_prev: &[u32],
    s_t: &[u32],
    t: usize,
    lambda: f64,
) -> Result<f64> {
    let k = schedule.k();
    let mut main = 0.0;
    let mut aux = 0.0;
    for i in 0..s0.len() {
        let row = &logp[i * k..(i + 1) * k];
        let post = super::chain::posterior(schedule, s_t[i] as usize, CleanToken::LogProbs(row), t)?;
        main -= post[s_prev[i] as usize];
        aux -= row[s0[i] as usize];
    }
    let n = s0.len() as f64;
    Ok(main / n + lambda * aux / n)
}
