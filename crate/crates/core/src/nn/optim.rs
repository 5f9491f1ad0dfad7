use super::tensor::{Grads, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW over a fixed subset of a [`ParamSet`]. Weight decay is applied to
/// the parameters directly, never through the moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    ids: Vec<ParamId>,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet, ids: &[ParamId]) -> Self {
        let zeros = || ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        AdamW {
            config,
            ids: ids.to_vec(),
            step_count: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update. Parameters without a gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let grad = grads.get(id).map(|g| g.data());
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                p[i] -= c.learning_rate * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
