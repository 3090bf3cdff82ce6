use rand::Rng;

use super::config::ConditionMode;
use super::net::{DenoiserNet, NetInput};
use crate::autodiff::{step_decay, sum_grads, AdamW, Graph};
use crate::codec::TokenMap;
use crate::diffusion::{sample_step_pair, training_loss, DiffusionSchedule, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    /// Token maps per optimizer step.
    pub batch: usize,
    pub lr: f64,
    /// Halve the learning rate every this many steps (0 = never).
    pub lr_halve_every: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Probability of replacing the label (or condition sequence) with the empty one.
    pub label_dropout: f64,
    pub seed: u64,
    /// Run per-sample graphs on the rayon pool; results do not depend on it.
    pub parallel: bool,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            lr: 1e-3,
            lr_halve_every: 500,
            weight_decay: 0.01,
            lambda: DEFAULT_LAMBDA,
            label_dropout: 0.5,
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DenoiserTrainReport {
    /// Mean total loss per step.
    pub loss_curve: Vec<f64>,
    /// Mean `L_main` per step.
    pub main_curve: Vec<f64>,
}

impl DenoiserTrainReport {
    /// Mean of the last `frac` of the loss curve.
    pub fn smoothed_tail(&self, frac: f64) -> f64 {
        tail_mean(&self.loss_curve, frac, true)
    }

    /// Mean of the first `frac` of the loss curve.
    pub fn smoothed_head(&self, frac: f64) -> f64 {
        tail_mean(&self.loss_curve, frac, false)
    }
}

fn tail_mean(v: &[f64], frac: f64, tail: bool) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let n = ((v.len() as f64 * frac).ceil() as usize).clamp(1, v.len());
    let s = if tail { &v[v.len() - n..] } else { &v[..n] };
    s.iter().sum::<f64>() / n as f64
}

/// One training example drawn for a step.
struct Draw {
    map: usize,
    t: usize,
    label: Option<u32>,
    keep_cond: bool,
    s_prev: Vec<u32>,
    s_t: Vec<u32>,
}

fn draw(
    maps: &[TokenMap],
    schedule: &DiffusionSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut seed::Rng,
) -> Result<Draw> {
    let map = rng.random_range(0..maps.len());
    let t = rng.random_range(1..=schedule.t_max());
    let dropped = rng.random::<f64>() < cfg.label_dropout;
    let (s_prev, s_t) = sample_step_pair(schedule, &maps[map].indices, t, rng)?;
    Ok(Draw {
        map,
        t,
        label: if dropped { None } else { maps[map].class_label },
        keep_cond: !dropped,
        s_prev,
        s_t,
    })
}

/// Gradients and loss values for one sample.
fn sample_grads(
    net: &DenoiserNet,
    schedule: &DiffusionSchedule,
    maps: &[TokenMap],
    conds: Option<&[Vec<u32>]>,
    d: &Draw,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, f64, f64)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let cond: &[u32] = match conds {
        Some(c) if d.keep_cond => &c[d.map],
        _ => &[],
    };
    let input = NetInput::new(&d.s_t, d.t).with_label(d.label).with_cond(cond);
    let logp = net.forward(&mut g, &vars, &input)?;
    let s0 = &maps[d.map].indices;
    let terms = training_loss(&mut g, schedule, logp, s0, &d.s_prev, &d.s_t, d.t, lambda)?;
    let (total, main) = (g.scalar(terms.total), g.scalar(terms.main));
    g.backward(terms.total)?;
    Ok((net.store.collect_grads(&g, &vars), total, main))
}

fn run_batch<T: Send>(items: &[Draw], parallel: bool, f: impl Fn(&Draw) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Fit the denoiser on clean token maps. `conds` supplies one condition
/// sequence per map when the model uses token-sequence conditioning.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    schedule: &DiffusionSchedule,
    maps: &[TokenMap],
    conds: Option<&[Vec<u32>]>,
    cfg: &DenoiserTrainConfig,
) -> Result<DenoiserTrainReport> {
    if maps.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("need at least one token map and batch >= 1"));
    }
    let ncfg = &net.config;
    if schedule.k() != ncfg.k || schedule.t_max() != ncfg.t_max {
        return Err(Error::invalid(format!(
            "schedule K={} T={} vs network K={} T={}",
            schedule.k(),
            schedule.t_max(),
            ncfg.k,
            ncfg.t_max
        )));
    }
    if let Some(m) = maps.iter().find(|m| m.indices.len() != ncfg.n() || m.k != ncfg.k) {
        return Err(Error::invalid(format!("token map with {} tokens/K={} does not fit the network", m.len(), m.k)));
    }
    if ncfg.condition_mode == ConditionMode::TokenSequence && conds.is_none_or(|c| c.len() != maps.len()) {
        return Err(Error::invalid("token-sequence mode needs one condition sequence per map"));
    }
    let mut opt = AdamW::new(cfg.lr, 0.9, 0.999, cfg.weight_decay);
    let mut report = DenoiserTrainReport::default();
    for step in 0..cfg.steps {
        let draws = (0..cfg.batch)
            .map(|i| {
                let mut rng = seed::rng(cfg.seed, "denoiser-draw", (step * cfg.batch + i) as u64);
                draw(maps, schedule, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let results = {
            let net_ref: &DenoiserNet = net;
            run_batch(&draws, cfg.parallel, |d| sample_grads(net_ref, schedule, maps, conds, d, cfg.lambda))
        };
        let mut sets = Vec::with_capacity(cfg.batch);
        let (mut total, mut main) = (0.0, 0.0);
        for r in results {
            let (gr, l, m) = r?;
            sets.push(gr);
            total += l;
            main += m;
        }
        let inv = 1.0 / cfg.batch as f64;
        let (total, main) = (total * inv, main * inv);
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        report.loss_curve.push(total);
        report.main_curve.push(main);
        let grads = sum_grads(sets).expect("batch is nonempty");
        net.store.accumulate(&grads);
        net.store.scale_grads(inv);
        opt.lr = step_decay(cfg.lr, 0.5, cfg.lr_halve_every, step);
        opt.step(&mut net.store);
    }
    net.round_to_f32();
    Ok(report)
}
