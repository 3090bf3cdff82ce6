use super::params::ParamStore;

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Decay applies only to entries flagged `decay` in the store (weight
/// matrices); biases, norms and embeddings are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients stored in `params`, then clear them.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(grad) = entry.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in entry.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
            entry.tensor.zero_grad();
        }
    }
}

/// Step-wise decay: `base * factor^(step / every)`.
pub fn step_decay(base: f64, factor: f64, every: usize, step: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((step / every) as i32)
}
