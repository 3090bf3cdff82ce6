use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::{grad_check_many, Graph, Tensor};
use crate::error::{Error, Result};
use crate::seed;

// Independent reference: matrices written straight from the per-step form,
// cumulative products by explicit multiplication.

fn step_matrix(k: usize, gamma: f64, beta: f64) -> Vec<Vec<f64>> {
    let n = k + 1;
    let kf = k as f64;
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate().take(k) {
        for (j, v) in row.iter_mut().enumerate().take(k) {
            *v = if i == j { 1.0 - gamma - (kf - 1.0) * beta / kf } else { beta / kf };
        }
        row[k] = gamma;
    }
    m[k][k] = 1.0;
    m
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

struct Reference {
    steps: Vec<Vec<Vec<f64>>>,
    cumulative: Vec<Vec<Vec<f64>>>,
}

fn reference(k: usize, gamma: &[f64], beta: &[f64]) -> Reference {
    let mut steps = vec![identity(k + 1)];
    let mut cumulative = vec![identity(k + 1)];
    for (&g, &b) in gamma.iter().zip(beta) {
        let q = step_matrix(k, g, b);
        let next = matmul(cumulative.last().unwrap(), &q);
        steps.push(q);
        cumulative.push(next);
    }
    Reference { steps, cumulative }
}

impl Reference {
    /// Bayes over one step: q(s_{t-1}=j | s_t, s_0) ∝ q(j | s_0) q(s_t | j).
    fn posterior(&self, s_t: usize, s0: usize, t: usize) -> Option<Vec<f64>> {
        let n = self.steps[0].len();
        let num: Vec<f64> = (0..n)
            .map(|j| self.cumulative[t - 1][s0][j] * self.steps[t][j][s_t])
            .collect();
        let z: f64 = num.iter().sum();
        (z > 0.0).then(|| num.iter().map(|v| v / z).collect())
    }

    fn reverse(&self, probs_s0: &[f64], s_t: usize, t: usize) -> Vec<f64> {
        let n = self.steps[0].len();
        let mut out = vec![0.0; n];
        let mut wz = 0.0;
        for (k, &w) in probs_s0.iter().enumerate() {
            if let Some(p) = self.posterior(s_t, k, t) {
                wz += w;
                for j in 0..n {
                    out[j] += w * p[j];
                }
            }
        }
        out.iter().map(|v| v / wz).collect()
    }
}

fn random_steps(k: usize, t: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let _ = k;
    let gamma = (0..t).map(|_| rng.random_range(0.0..0.3)).collect();
    let beta = (0..t).map(|_| rng.random_range(0.0..0.3)).collect();
    (gamma, beta)
}

fn probs(logp: &[f64]) -> Vec<f64> {
    logp.iter().map(|v| v.exp()).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    v.iter().map(|x| x - z).collect()
}

#[test]
fn step_matrix_example_k3() {
    let s = DiffusionSchedule::from_steps(3, &[0.1], &[0.3]).unwrap();
    let q = s.q_matrix(1);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 0.7 } else { 0.1 };
            assert!((q[i][j] - want).abs() < 1e-15);
        }
        assert!((q[i][3] - 0.1).abs() < 1e-15);
        assert!((q[i].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
    assert_eq!(q[3], vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn full_absorption_in_one_step() {
    let s = DiffusionSchedule::from_steps(4, &[1.0], &[0.0]).unwrap();
    for i in 0..4 {
        assert_eq!(s.qbar_row(1, i), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }
    let mut rng = seed::rng_from(1);
    let st = forward_marginal(&s, &[0, 1, 2, 3], 1, &mut rng).unwrap();
    assert_eq!(st, vec![4; 4]);
}

#[test]
fn no_corruption_is_identity() {
    let s = DiffusionSchedule::from_steps(5, &[0.0; 6], &[0.0; 6]).unwrap();
    assert_eq!(s.qbar_matrix(6), identity(6));
}

#[test]
fn negative_probabilities_are_rejected() {
    assert!(matches!(
        DiffusionSchedule::from_steps(3, &[0.5], &[0.9]),
        Err(Error::InvalidSchedule(_))
    ));
    assert!(DiffusionSchedule::from_steps(3, &[-0.1], &[0.0]).is_err());
    assert!(DiffusionSchedule::from_steps(1, &[0.1], &[0.1]).is_err());
    assert!(build_schedule(0, 4, &ScheduleKind::LinearCumulative).is_err());
}

#[test]
fn linear_cumulative_reaches_full_corruption() {
    let s = build_schedule(25, 32, &ScheduleKind::LinearCumulative).unwrap();
    assert!(s.keep_bar(25).abs() < 1e-12);
    assert!((s.gamma_bar(25) - 0.9).abs() < 1e-12);
    assert!((s.beta_bar(25) - 0.1).abs() < 1e-12);
    for t in 1..=25 {
        assert!(s.beta(t) >= 0.0 && s.gamma(t) >= 0.0);
        assert!((s.gamma_bar(t) - 0.9 * t as f64 / 25.0).abs() < 1e-12);
        assert!((s.keep_bar(t) - (1.0 - t as f64 / 25.0)).abs() < 1e-12);
        assert!((s.alpha(t) - (1.0 - s.gamma(t))).abs() < 1e-15);
    }
    let dump = s.dump();
    assert!(dump.starts_with("t\talpha\tbeta\tgamma\talpha_bar\tbeta_bar\tgamma_bar\n"));
    assert_eq!(dump.lines().count(), 27);
}

#[test]
fn closed_form_matches_matrix_product() {
    let mut rng = seed::rng_from(7);
    for k in 2..=8 {
        for tt in [1, 3, 7, 20] {
            let (g, b) = random_steps(k, tt, &mut rng);
            let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
            let r = reference(k, &g, &b);
            for t in 0..=tt {
                let m = s.qbar_matrix(t);
                for i in 0..=k {
                    for j in 0..=k {
                        assert!((m[i][j] - r.cumulative[t][i][j]).abs() < 1e-12);
                    }
                    if t > 0 {
                        let q = s.q_matrix(t);
                        assert!((q[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn posterior_matches_bayes_enumeration() {
    let mut rng = seed::rng_from(11);
    for k in 2..=6 {
        for tt in [1, 4, 10] {
            let (g, b) = random_steps(k, tt, &mut rng);
            let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
            let r = reference(k, &g, &b);
            for t in 1..=tt {
                for s0 in 0..k {
                    for st in 0..=k {
                        match r.posterior(st, s0, t) {
                            Some(want) => {
                                let got = probs(&posterior(&s, st, CleanToken::Index(s0), t).unwrap());
                                assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                                for j in 0..=k {
                                    assert!((got[j] - want[j]).abs() < 1e-10);
                                }
                            }
                            None => assert!(matches!(
                                posterior(&s, st, CleanToken::Index(s0), t),
                                Err(Error::InconsistentState { .. })
                            )),
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn posterior_at_first_step_recovers_the_clean_token() {
    let s = build_schedule(4, 3, &ScheduleKind::LinearCumulative).unwrap();
    for s0 in 0..3 {
        for st in 0..=3 {
            let p = probs(&posterior(&s, st, CleanToken::Index(s0), 1).unwrap());
            assert!((p[s0] - 1.0).abs() < 1e-12, "{p:?}");
        }
    }
}

#[test]
fn posterior_without_noise_is_one_hot() {
    let s = DiffusionSchedule::from_steps(4, &[1e-9; 3], &[1e-9; 3]).unwrap();
    let p = probs(&posterior(&s, 2, CleanToken::Index(2), 3).unwrap());
    assert!((p[2] - 1.0).abs() < 1e-6);
}

#[test]
fn marginal_consistency() {
    let mut rng = seed::rng_from(3);
    for k in 2..=5 {
        let (g, b) = random_steps(k, 6, &mut rng);
        let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
        for t in 1..=6 {
            for s0 in 0..k {
                for st in 0..=k {
                    let lhs: f64 = (0..=k).map(|j| s.q(t, j, st) * s.qbar(t - 1, s0, j)).sum();
                    assert!((lhs - s.qbar(t, s0, st)).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn unchanged_frequency_matches_first_step_marginal() {
    let s = DiffusionSchedule::from_steps(4, &[0.1; 5], &[0.08; 5]).unwrap();
    let n = 100_000;
    let mut rng = seed::rng_from(21);
    let s0 = vec![2u32; n];
    let st = forward_marginal(&s, &s0, 1, &mut rng).unwrap();
    let hits = st.iter().filter(|&&x| x == 2).count() as f64 / n as f64;
    let p = s.keep_bar(1) + s.beta_bar(1) / 4.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((hits - p).abs() < 3.0 * se, "{hits} vs {p}");
}

#[test]
fn forward_marginal_rejects_bad_inputs() {
    let s = build_schedule(5, 4, &ScheduleKind::LinearCumulative).unwrap();
    let mut rng = seed::rng_from(1);
    assert!(forward_marginal(&s, &[0, 1], 0, &mut rng).is_err());
    assert!(forward_marginal(&s, &[0, 1], 6, &mut rng).is_err());
    assert!(forward_marginal(&s, &[0, 4], 2, &mut rng).is_err());
}

#[test]
fn reverse_with_point_mass_equals_posterior() {
    let s = build_schedule(6, 4, &ScheduleKind::LinearCumulative).unwrap();
    for st in 0..=4 {
        let lp = log_one_hot(1, 4);
        let a = reverse_distribution(&s, &lp, st, 4).unwrap();
        let b = probs(&posterior(&s, st, CleanToken::Index(1), 4).unwrap());
        for j in 0..5 {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn reverse_with_uniform_model_matches_enumeration() {
    let mut rng = seed::rng_from(5);
    for k in 2..=4 {
        let (g, b) = random_steps(k, 5, &mut rng);
        let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
        let r = reference(k, &g, &b);
        let lp = vec![-(k as f64).ln(); k];
        for t in 1..=5 {
            for st in 0..=k {
                let got = reverse_distribution(&s, &lp, st, t).unwrap();
                let want = r.reverse(&vec![1.0 / k as f64; k], st, t);
                for j in 0..=k {
                    assert!((got[j] - want[j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn reverse_step_is_deterministic_and_decodes_at_one() {
    let s = build_schedule(5, 4, &ScheduleKind::LinearCumulative).unwrap();
    let mut rng = seed::rng_from(2);
    let logits: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lp: Vec<f64> = logits.chunks(4).flat_map(log_softmax).collect();
    let st = [4u32, 0, 1, 4, 3, 2];
    let a = reverse_step(&s, &lp, &st, 3, &mut seed::rng_from(9)).unwrap();
    let b = reverse_step(&s, &lp, &st, 3, &mut seed::rng_from(9)).unwrap();
    assert_eq!(a, b);
    let d = reverse_step(&s, &lp, &st, 1, &mut seed::rng_from(9)).unwrap();
    for (i, &x) in d.iter().enumerate() {
        assert!(x < 4);
        // Tokens that survive one step with uniform noise keep the model's argmax.
        assert_eq!(x as usize, argmax(&reverse_distribution(&s, &lp[i * 4..i * 4 + 4], st[i] as usize, 1).unwrap()));
    }
}

fn oracle(s0: Vec<u32>, k: usize) -> impl Fn(&[u32], usize) -> Result<Vec<f64>> {
    move |_: &[u32], _: usize| Ok(s0.iter().flat_map(|&s| log_one_hot(s as usize, k)).collect())
}

fn uniform(n: usize, k: usize) -> impl Fn(&[u32], usize) -> Result<Vec<f64>> {
    move |_: &[u32], _: usize| Ok(vec![-(k as f64).ln(); n * k])
}

#[test]
fn oracle_elbo_is_the_prior_term() {
    let s = DiffusionSchedule::from_steps(4, &[0.1, 0.2, 0.2], &[0.05, 0.05, 0.1]).unwrap();
    let s0 = vec![0u32, 3, 1];
    let e = elbo(&s, &s0, &oracle(s0.clone(), 4), 4).unwrap();
    assert!((e - prior_kl(&s, &s0)).abs() < 1e-9);
    let exact = elbo_exact(&s, &s0, &oracle(s0.clone(), 4)).unwrap();
    assert!((exact - prior_kl(&s, &s0)).abs() < 1e-9);
}

#[test]
fn matched_all_mask_prior_has_zero_kl() {
    let s = DiffusionSchedule::from_steps(3, &[0.5, 1.0], &[0.1, 0.0]).unwrap();
    assert_eq!(prior_kl(&s, &[0, 1, 2]), 0.0);
}

#[test]
fn oracle_elbo_never_exceeds_uniform_elbo() {
    let s = build_schedule(8, 5, &ScheduleKind::LinearCumulative).unwrap();
    let mut rng = seed::rng_from(13);
    for trial in 0..5 {
        let s0: Vec<u32> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let o = elbo(&s, &s0, &oracle(s0.clone(), 5), trial).unwrap();
        let u = elbo(&s, &s0, &uniform(6, 5), trial).unwrap();
        assert!(o <= u, "{o} > {u}");
    }
}

/// Exact -ln p_θ(s_0) for one token by pushing the prior through every reverse step.
fn chain_nll(s: &DiffusionSchedule, r: &Reference, s0: usize, table: &dyn Fn(usize, usize) -> Vec<f64>) -> f64 {
    let n = s.states();
    let mut dist = prior(s);
    for t in (1..=s.t_max()).rev() {
        let mut next = vec![0.0; n];
        for (i, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = r.reverse(&probs(&table(i, t)), i, t);
            for j in 0..n {
                next[j] += w * p[j];
            }
        }
        dist = next;
    }
    -dist[s0].ln()
}

#[test]
fn exact_elbo_bounds_the_chain_likelihood() {
    let s = build_schedule(3, 2, &ScheduleKind::LinearCumulative).unwrap();
    let g: Vec<f64> = (1..=3).map(|t| s.gamma(t)).collect();
    let b: Vec<f64> = (1..=3).map(|t| s.beta(t)).collect();
    let r = reference(2, &g, &b);
    let mut rng = seed::rng_from(17);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let table = move |st: usize, t: usize| {
            let o = ((t - 1) * 3 + st) * 2;
            log_softmax(&logits[o..o + 2])
        };
        let den = |tok: &[u32], t: usize| Ok(table(tok[0] as usize, t));
        for s0 in 0..2u32 {
            let bound = elbo_exact(&s, &[s0], &den).unwrap();
            let nll = chain_nll(&s, &r, s0 as usize, &table);
            assert!(bound >= nll - 1e-12, "{bound} < {nll}");
        }
    }
    for s0 in 0..2u32 {
        let table = move |_: usize, _: usize| log_one_hot(s0 as usize, 2);
        let den = |tok: &[u32], t: usize| Ok(table(tok[0] as usize, t));
        let bound = elbo_exact(&s, &[s0], &den).unwrap();
        let nll = chain_nll(&s, &r, s0 as usize, &table);
        assert!((bound - nll).abs() < 1e-10, "{bound} vs {nll}");
    }
}

fn loss_graph(
    s: &DiffusionSchedule,
    lp: &[f64],
    s0: &[u32],
    prev: &[u32],
    st: &[u32],
    t: usize,
    lambda: f64,
) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let v = g.constant_from(&[s0.len(), s.k()], lp.to_vec()).unwrap();
    let terms = training_loss(&mut g, s, v, s0, prev, st, t, lambda).unwrap();
    (g.scalar(terms.total), g.scalar(terms.main), g.scalar(terms.aux))
}

#[test]
fn loss_without_aux_weight_is_the_main_term() {
    let s = build_schedule(6, 4, &ScheduleKind::LinearCumulative).unwrap();
    let mut rng = seed::rng_from(4);
    let s0 = vec![0u32, 1, 2, 3];
    let (prev, st) = sample_step_pair(&s, &s0, 3, &mut rng).unwrap();
    let lp: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>().chunks(4).flat_map(log_softmax).collect();
    let (total, main, aux) = loss_graph(&s, &lp, &s0, &prev, &st, 3, 0.0);
    assert_eq!(total, main);
    assert!(aux > 0.0);
    let (total, main2, aux2) = loss_graph(&s, &lp, &s0, &prev, &st, 3, 0.5);
    assert!((total - (main2 + 0.5 * aux2)).abs() < 1e-12);
    let v = loss_value(&s, &lp, &s0, &prev, &st, 3, 0.5).unwrap();
    assert!((v - total).abs() < 1e-9);
}

#[test]
fn oracle_loss_is_posterior_entropy() {
    let s = build_schedule(5, 3, &ScheduleKind::LinearCumulative).unwrap();
    let s0 = [2u32];
    let lp = log_one_hot(2, 3);
    for t in 1..=5 {
        for st in 0..=3u32 {
            let w = s.qbar(t, 2, st as usize);
            if w == 0.0 {
                continue;
            }
            let post = probs(&posterior(&s, st as usize, CleanToken::Index(2), t).unwrap());
            let mut expected = 0.0;
            for prev in 0..=3u32 {
                if post[prev as usize] < 1e-20 {
                    continue;
                }
                let (_, main, aux) = loss_graph(&s, &lp, &s0, &[prev], &[st], t, 1e-3);
                assert_eq!(aux, 0.0);
                expected += post[prev as usize] * main;
            }
            assert!((expected - entropy(&post)).abs() < 1e-9, "t={t} st={st}");
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences_for_toy_model() {
    let s = build_schedule(5, 4, &ScheduleKind::LinearCumulative).unwrap();
    let mut rng = seed::rng_from(8);
    for trial in 0..20 {
        let s0: Vec<u32> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let t = 1 + trial % 5;
        let (prev, st) = sample_step_pair(&s, &s0, t, &mut rng).unwrap();
        // Two parameters: a bonus for keeping the observed token and a linear index tilt.
        let mut feats = Vec::new();
        for &x in &st {
            for c in 0..4u32 {
                feats.push(f64::from(u8::from(c == x)));
                feats.push(c as f64 / 4.0);
            }
        }
        let theta = Tensor::new(&[2, 1], vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap();
        let err = grad_check_many(
            |g: &mut Graph, v: &[crate::autodiff::Var]| {
                let f = g.constant_from(&[12, 2], feats.clone())?;
                let z = g.matmul(f, v[0])?;
                let z = g.reshape(z, &[3, 4])?;
                let lp = g.log_softmax(z);
                Ok(training_loss(g, &s, lp, &s0, &prev, &st, t, 0.1)?.total)
            },
            &[theta],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn entropy_floor_is_positive_and_below_uniform() {
    let s = build_schedule(10, 8, &ScheduleKind::LinearCumulative).unwrap();
    let f = posterior_entropy_floor(&s, &[0, 3, 7, 7]).unwrap();
    assert!(f > 0.0 && f < (9f64).ln());
}

#[test]
fn cfg_without_guidance_is_bitwise_conditional() {
    let c = log_softmax(&[0.3, -1.0, 2.0]);
    let u = log_softmax(&[1.0, 1.0, -4.0]);
    assert_eq!(apply_cfg(&c, &u, 0.0).unwrap(), c);
}

#[test]
fn cfg_with_equal_inputs_returns_the_input() {
    let c = log_softmax(&[0.3, -1.0, 2.0, 0.0]);
    for w in [0.5, 1.0, 3.0] {
        let out = apply_cfg(&c, &c, w).unwrap();
        for (a, b) in out.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cfg_matches_hand_arithmetic() {
    // cond = ln(0.5, 0.25, 0.25), uncond = ln(0.25, 0.5, 0.25), w = 0.5:
    // 1.5 ln c - 0.5 ln u = ln(0.5^1.5/0.25^0.5, 0.25^1.5/0.5^0.5, 0.25)
    //                    = ln(0.70710678, 0.17677670, 0.25), normalized by 1.13388348.
    let c = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
    let u = [0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()];
    let out = probs(&apply_cfg(&c, &u, 0.5).unwrap());
    let raw = [0.5f64.powf(1.5) / 0.5, 0.25f64.powf(1.5) / 0.5f64.sqrt(), 0.25];
    let z: f64 = raw.iter().sum();
    assert!((z - 1.133_883_476).abs() < 1e-8);
    for (o, r) in out.iter().zip(raw) {
        assert!((o - r / z).abs() < 1e-12);
    }
}

#[test]
fn cfg_outputs_are_distributions() {
    let mut rng = seed::rng_from(31);
    for _ in 0..1000 {
        let c = log_softmax(&(0..6).map(|_| rng.random_range(-8.0..8.0)).collect::<Vec<_>>());
        let u = log_softmax(&(0..6).map(|_| rng.random_range(-8.0..8.0)).collect::<Vec<_>>());
        for w in [0.0, 0.5, 1.0, 3.0] {
            let p = probs(&apply_cfg(&c, &u, w).unwrap());
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!(apply_cfg(&[0.0], &[0.0, 0.0], 1.0).is_err());
    assert!(apply_cfg(&[0.0], &[0.0], -1.0).is_err());
}

// ---- property tests ----

fn arb_schedule() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..=8, 1usize..=12).prop_flat_map(|(k, t)| {
        (Just(k), prop::collection::vec(0.0f64..0.3, t), prop::collection::vec(0.0f64..0.3, t))
    })
}

fn arb_logp(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n).prop_map(|v| log_softmax(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cumulative_rows_are_distributions_and_match_products((k, g, b) in arb_schedule()) {
        let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
        let r = reference(k, &g, &b);
        for t in 0..=g.len() {
            let m = s.qbar_matrix(t);
            for (i, row) in m.iter().enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                for (j, &v) in row.iter().enumerate() {
                    prop_assert!((v - r.cumulative[t][i][j]).abs() <= 1e-12);
                }
            }
            prop_assert!((0..=k).all(|j| m[k][j] == f64::from(u8::from(j == k))));
        }
    }

    #[test]
    fn posterior_is_bayes_and_normalized((k, g, b) in arb_schedule(), s0_seed in 0usize..64, st_seed in 0usize..64) {
        let s = DiffusionSchedule::from_steps(k, &g, &b).unwrap();
        let r = reference(k, &g, &b);
        let (s0, st) = (s0_seed % k, st_seed % (k + 1));
        for t in 1..=g.len() {
            if let Some(want) = r.posterior(st, s0, t) {
                let got = probs(&posterior(&s, st, CleanToken::Index(s0), t).unwrap());
                prop_assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                for (a, w) in got.iter().zip(&want) {
                    prop_assert!((a - w).abs() <= 1e-10);
                }
            }
            let lhs: f64 = (0..=k).map(|j| s.q(t, j, st) * s.qbar(t - 1, s0, j)).sum();
            prop_assert!((lhs - s.qbar(t, s0, st)).abs() <= 1e-10);
        }
    }

    #[test]
    fn guidance_output_is_a_distribution(c in arb_logp(9), u in arb_logp(9), w in 0.0f64..5.0) {
        let out = apply_cfg(&c, &u, w).unwrap();
        prop_assert!((probs(&out).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let same = apply_cfg(&c, &u, 0.0).unwrap();
        prop_assert!(same.iter().zip(&c).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
