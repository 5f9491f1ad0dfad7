//! Minimal differentiable-network core: tape autodiff, LSTM cell, softmax,
//! categorical sampling, entropy, AdamW and global-norm clipping.

pub mod checkpoint;
pub mod gradcheck;
mod lstm;
mod optim;
mod tape;
mod tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub use lstm::{lstm_step, LstmParams};
pub(crate) use lstm::uniform;
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use tape::{Tape, Var};
pub use tensor::{Grads, ParamId, ParamSet, Tensor};

/// Max-subtracted softmax. Entries at `-inf` get probability zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Inverse-CDF draw. Never returns an index with zero probability.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last = i;
        if u < cumulative {
            return i;
        }
    }
    last
}

/// Root seed from which independent, reproducible streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// A stream that depends only on the root seed and `tags`, so results
    /// do not change with thread count or evaluation order.
    pub fn stream(self, tags: &[u64]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.0.to_le_bytes());
        for t in tags {
            hasher.update(t.to_le_bytes());
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&hasher.finalize());
        ChaCha8Rng::from_seed(key)
    }
}
