//! Categorical diffusion over token maps with an absorbing `[MASK]` state.

mod chain;
mod elbo;
mod loss;
mod schedule;

pub use chain::{
    apply_cfg, argmax, entropy, floored_ln, forward_marginal, log_one_hot, normalize_log, posterior,
    posterior_entropy_floor, reverse_distribution, reverse_step, sample_categorical, sample_step_pair,
    CleanToken, LOG_FLOOR,
};
pub use elbo::{elbo, elbo_exact, kl, prior, prior_kl, Denoiser};
pub use loss::{loss_value, training_loss, LossTerms, DEFAULT_LAMBDA};
pub use schedule::{build_schedule, DiffusionSchedule, ScheduleKind};

#[cfg(test)]
mod tests;
