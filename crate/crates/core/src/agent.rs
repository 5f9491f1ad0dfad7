//! Actor-critic network: a shared history encoder over `[q ; e_t]`, a policy
//! head scoring each action embedding and a scalar value head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Carry, EnvState};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointHeader, FORMAT_VERSION};
use crate::nn::{lstm_step, LstmParams, ParamId, ParamSet, RngSeed, Tape, Tensor, Var};

/// History encoder. `Feedforward` is the ablation without recurrence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Lstm,
    Feedforward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Embedding dimension d.
    pub dim: usize,
    /// Head hidden dimension h.
    pub hidden: usize,
    /// Path length T.
    pub horizon: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub supervised_steps: usize,
    pub supervised_batch: usize,
    /// Fraction of training questions turned into demonstrations.
    pub supervised_ratio: f64,
    pub beam_width: usize,
    pub encoder: EncoderKind,
    /// Train a value head and use GAE; otherwise REINFORCE with discounted returns.
    pub critic: bool,
    /// Cap on MOVE actions per state.
    pub max_actions: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
    /// Write a checkpoint every K RL steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            dim: 100,
            hidden: 2048,
            horizon: 2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_beta: 0.01,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            max_grad_norm: 0.5,
            steps: 2000,
            batch_size: 128,
            supervised_steps: 300,
            supervised_batch: 64,
            supervised_ratio: 0.8,
            beam_width: 50,
            encoder: EncoderKind::Lstm,
            critic: true,
            max_actions: None,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.hidden == 0 {
            return fail("dim and hidden must be positive");
        }
        if self.horizon == 0 {
            return fail("horizon T must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return fail("gamma and gae_lambda must lie in (0, 1]");
        }
        if !(self.entropy_beta >= 0.0) {
            return fail("entropy_beta must be non-negative");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("learning_rate and max_grad_norm must be positive, weight_decay non-negative");
        }
        if self.batch_size == 0 || self.supervised_batch == 0 || self.beam_width == 0 {
            return fail("batch sizes and beam width must be positive");
        }
        if !(0.0..=1.0).contains(&self.supervised_ratio) {
            return fail("supervised_ratio must lie in [0, 1]");
        }
        if self.max_actions == Some(0) {
            return fail("max_actions must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Lstm(LstmParams),
    Feedforward { w: ParamId, b: ParamId },
}

impl Encoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Lstm(_) => EncoderKind::Lstm,
            Encoder::Feedforward { .. } => EncoderKind::Feedforward,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match *self {
            Encoder::Lstm(l) => vec![l.w_ih, l.w_hh, l.bias],
            Encoder::Feedforward { w, b } => vec![w, b],
        }
    }
}

/// All agent weights in one parameter set.
#[derive(Clone, Debug)]
pub struct AgentParams {
    pub params: ParamSet,
    pub encoder: Encoder,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

/// Stacks action embeddings into the `[k, 2d]` matrix `A_t`.
pub fn action_matrix(actions: &[Action]) -> Result<Tensor> {
    let width = actions.first().map(|a| a.embed.len()).unwrap_or(0);
    if actions.is_empty() || actions.iter().any(|a| a.embed.len() != width) {
        return Err(Error::contract("action set must be non-empty with equal embedding widths"));
    }
    let data = actions.iter().flat_map(|a| a.embed.iter().copied()).collect();
    Tensor::matrix(actions.len(), width, data)
}

const INIT_TAG: u64 = 0x1417;

impl AgentParams {
    /// Deterministic initialization: uniform(±1/sqrt(fan_in)) weights.
    pub fn init(config: &AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d2, h) = (2 * config.dim, config.hidden);
        let mut rng = RngSeed(seed).stream(&[INIT_TAG]);
        let mut params = ParamSet::new();
        let encoder = match config.encoder {
            EncoderKind::Lstm => Encoder::Lstm(LstmParams::register(&mut params, "lstm", d2, d2, &mut rng)),
            EncoderKind::Feedforward => Encoder::Feedforward {
                w: params.add("ff.w", crate::nn::uniform(&mut rng, &[d2, d2], d2)),
                b: params.add("ff.b", Tensor::zeros(&[d2])),
            },
        };
        let w1 = params.add("policy.w1", crate::nn::uniform(&mut rng, &[h, d2], d2));
        let w2 = params.add("policy.w2", crate::nn::uniform(&mut rng, &[d2, h], h));
        let w3 = params.add("value.w3", crate::nn::uniform(&mut rng, &[h, d2], d2));
        let w4 = params.add("value.w4", crate::nn::uniform(&mut rng, &[1, h], h));
        Ok(AgentParams {
            params,
            encoder,
            w1,
            w2,
            w3,
            w4,
            dim: config.dim,
            hidden: h,
        })
    }

    /// Rebuilds the id bookkeeping from named parameters and checks shapes.
    pub fn from_param_set(params: ParamSet, dim: usize, hidden: usize) -> Result<Self> {
        let d2 = 2 * dim;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let encoder = if params.id("lstm.w_ih").is_some() {
            find("lstm.w_ih", &[4 * d2, d2])?;
            find("lstm.w_hh", &[4 * d2, d2])?;
            find("lstm.bias", &[4 * d2])?;
            Encoder::Lstm(LstmParams::lookup(&params, "lstm")?)
        } else {
            Encoder::Feedforward {
                w: find("ff.w", &[d2, d2])?,
                b: find("ff.b", &[d2])?,
            }
        };
        Ok(AgentParams {
            encoder,
            w1: find("policy.w1", &[hidden, d2])?,
            w2: find("policy.w2", &[d2, hidden])?,
            w3: find("value.w3", &[hidden, d2])?,
            w4: find("value.w4", &[1, hidden])?,
            params,
            dim,
            hidden,
        })
    }

    /// Encoder plus policy head.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.ids();
        ids.extend([self.w1, self.w2]);
        ids
    }

    /// Encoder plus value head.
    pub fn psi_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.ids();
        ids.extend([self.w3, self.w4]);
        ids
    }

    pub fn value_head_ids(&self) -> [ParamId; 2] {
        [self.w3, self.w4]
    }

    /// One encoder step on `[q ; e]`; returns `(h, c)`.
    pub fn encode(&self, tape: &mut Tape, h_prev: Var, c_prev: Var, q: Var, e: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[q, e]);
        if tape.shape(x) != [2 * self.dim] {
            return Err(Error::contract(format!(
                "encoder input has shape {:?}, expected [{}]",
                tape.shape(x),
                2 * self.dim
            )));
        }
        match self.encoder {
            Encoder::Lstm(lstm) => lstm_step(tape, &lstm, h_prev, c_prev, x),
            Encoder::Feedforward { w, b } => {
                let (w, b) = (tape.param(w), tape.param(b));
                let z = tape.matvec(w, x);
                let z = tape.add(z, b);
                Ok((tape.relu(z), c_prev))
            }
        }
    }

    /// `A_t W2 ReLU(W1 h)`, one logit per row of `actions`.
    pub fn policy_logits(&self, tape: &mut Tape, h: Var, actions: Var) -> Var {
        let (w1, w2) = (tape.param(self.w1), tape.param(self.w2));
        let z = tape.matvec(w1, h);
        let z = tape.relu(z);
        let y = tape.matvec(w2, z);
        tape.matvec(actions, y)
    }

    /// `W4 ReLU(W3 h)` as a scalar.
    pub fn value_head(&self, tape: &mut Tape, h: Var) -> Var {
        let (w3, w4) = (tape.param(self.w3), tape.param(self.w4));
        let z = tape.matvec(w3, h);
        let z = tape.relu(z);
        let v = tape.matvec(w4, z);
        tape.pick(v, 0)
    }

    fn encode_state(&self, tape: &mut Tape, state: &EnvState) -> Result<(Var, Var)> {
        let h = tape.vector(&state.history.h);
        let c = tape.vector(&state.history.c);
        let q = tape.vector(&state.question.q_embed);
        let e = tape.vector(&state.entity_embed);
        self.encode(tape, h, c, q, e)
    }

    /// New carry after encoding `e_t`.
    pub fn encode_history(&self, carry: &Carry, q_embed: &[f64], e_embed: &[f64]) -> Result<Carry> {
        let mut tape = Tape::new(&self.params);
        let (h, c) = (tape.vector(&carry.h), tape.vector(&carry.c));
        let (q, e) = (tape.vector(q_embed), tape.vector(e_embed));
        let (h, c) = self.encode(&mut tape, h, c, q, e)?;
        Ok(Carry {
            h: tape.value(h).to_vec(),
            c: tape.value(c).to_vec(),
        })
    }

    /// Action probabilities at `state` together with the carry for the next state.
    pub fn policy_step(&self, state: &EnvState, actions: &[Action]) -> Result<(Vec<f64>, Carry)> {
        let mut tape = Tape::new(&self.params);
        let (h, c) = self.encode_state(&mut tape, state)?;
        let a = tape.constant(action_matrix(actions)?);
        if tape.shape(a)[1] != 2 * self.dim {
            return Err(Error::contract("action embeddings must have width 2d"));
        }
        let logits = self.policy_logits(&mut tape, h, a);
        let probs = tape.softmax(logits);
        let carry = Carry {
            h: tape.value(h).to_vec(),
            c: tape.value(c).to_vec(),
        };
        Ok((tape.value(probs).to_vec(), carry))
    }

    pub fn policy_distribution(&self, state: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
        Ok(self.policy_step(state, actions)?.0)
    }

    pub fn value(&self, state: &EnvState) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let (h, _) = self.encode_state(&mut tape, state)?;
        let v = self.value_head(&mut tape, h);
        Ok(tape.scalar(v))
    }

    pub fn header(&self, entity_hash: u64) -> CheckpointHeader {
        CheckpointHeader {
            version: FORMAT_VERSION,
            dim: self.dim as u32,
            hidden: self.hidden as u32,
            entity_hash,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, entity_hash: u64) -> Result<()> {
        checkpoint::save(path, &self.header(entity_hash), &self.params)
    }

    /// Loads a checkpoint, rejecting one trained on a different entity set.
    pub fn load(path: impl AsRef<Path>, entity_hash: Option<u64>) -> Result<Self> {
        let (header, params) = checkpoint::load(path)?;
        if let Some(expected) = entity_hash {
            if header.entity_hash != expected {
                return Err(Error::Checkpoint(format!(
                    "checkpoint entity hash {:016x} does not match graph {:016x}",
                    header.entity_hash, expected
                )));
            }
        }
        AgentParams::from_param_set(params, header.dim as usize, header.hidden as usize)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::embed::Embedding;
    use crate::env::{ActionKind, Question};
    use crate::graph::EntityId;
    use crate::nn::gradcheck::max_relative_error;

    fn small(encoder: EncoderKind) -> AgentConfig {
        AgentConfig {
            dim: 3,
            hidden: 5,
            encoder,
            ..AgentConfig::default()
        }
    }

    fn vecn(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = RngSeed(seed).stream(&[]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn state(dim: usize, seed: u64) -> EnvState {
        EnvState {
            question: Arc::new(Question {
                id: "q".into(),
                text: "q".into(),
                q_embed: Embedding(vecn(dim, seed)),
                cause: EntityId(0),
                effect: EntityId(1),
            }),
            entity: EntityId(0),
            entity_embed: Embedding(vecn(dim, seed + 1)),
            history: Carry::zeros(2 * dim),
            t: 0,
        }
    }

    fn stay(embed: Vec<f64>) -> Action {
        Action {
            kind: ActionKind::Stay,
            embed: Embedding(embed),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = small(EncoderKind::Lstm);
        let a = AgentParams::init(&c, 1).unwrap();
        let b = AgentParams::init(&c, 1).unwrap();
        let other = AgentParams::init(&c, 2).unwrap();
        let data = |p: &AgentParams| p.params.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(data(&a), data(&b));
        assert_ne!(data(&a), data(&other));
    }

    #[test]
    fn shapes_at_full_size() {
        let c = AgentConfig::default();
        let p = AgentParams::init(&c, 0).unwrap();
        let shape = |id| p.params.get(id).shape().to_vec();
        assert_eq!(shape(p.w1), vec![2048, 200]);
        assert_eq!(shape(p.w2), vec![200, 2048]);
        assert_eq!(shape(p.w3), vec![2048, 200]);
        assert_eq!(shape(p.w4), vec![1, 2048]);
        let Encoder::Lstm(l) = p.encoder else { panic!() };
        assert_eq!(shape(l.w_ih), vec![800, 200]);
        assert_eq!(shape(l.w_hh), vec![800, 200]);
        assert_eq!((l.input, l.hidden), (200, 200));
    }

    #[test]
    fn zero_weights_zero_history_and_value() {
        let c = small(EncoderKind::Lstm);
        let mut p = AgentParams::init(&c, 0).unwrap();
        let ids: Vec<_> = p.params.ids().collect();
        for id in ids {
            p.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let s = state(3, 4);
        let carry = p.encode_history(&s.history, &s.question.q_embed, &s.entity_embed).unwrap();
        assert!(carry.h.iter().all(|x| *x == 0.0));
        assert_eq!(p.value(&s).unwrap(), 0.0);
    }

    #[test]
    fn history_depends_on_order() {
        let c = small(EncoderKind::Lstm);
        let p = AgentParams::init(&c, 3).unwrap();
        let q = vecn(3, 10);
        let (e1, e2) = (vecn(3, 11), vecn(3, 12));
        let run = |first: &[f64], second: &[f64]| {
            let c0 = Carry::zeros(6);
            let c1 = p.encode_history(&c0, &q, first).unwrap();
            p.encode_history(&c1, &q, second).unwrap()
        };
        assert_eq!(run(&e1, &e2), run(&e1, &e2));
        assert_ne!(run(&e1, &e2).h, run(&e2, &e1).h);
    }

    #[test]
    fn policy_is_a_distribution_over_actions() {
        for kind in [EncoderKind::Lstm, EncoderKind::Feedforward] {
            let p = AgentParams::init(&small(kind), 5).unwrap();
            let s = state(3, 1);
            for k in 1..6 {
                let actions: Vec<Action> = (0..k).map(|i| stay(vecn(6, 100 + i as u64))).collect();
                let probs = p.policy_distribution(&s, &actions).unwrap();
                assert_eq!(probs.len(), k);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let same = vec![stay(vecn(6, 7)), stay(vecn(6, 7)), stay(vecn(6, 8))];
            let probs = p.policy_distribution(&s, &same).unwrap();
            assert_eq!(probs[0], probs[1]);
        }
    }

    #[test]
    fn wrong_widths_are_rejected() {
        let p = AgentParams::init(&small(EncoderKind::Lstm), 5).unwrap();
        let s = state(3, 1);
        assert!(p.policy_distribution(&s, &[]).is_err());
        assert!(p.policy_distribution(&s, &[stay(vec![0.0; 4])]).is_err());
        assert!(p.value(&state(4, 1)).is_err());
    }

    fn both_heads_loss(p: &AgentParams, tape: &mut Tape, actions: &Tensor) -> Var {
        let s = state(3, 9);
        let h0 = tape.vector(&vecn(6, 20));
        let c0 = tape.vector(&vecn(6, 21));
        let q = tape.vector(&s.question.q_embed);
        let e1 = tape.vector(&s.entity_embed);
        let e2 = tape.vector(&vecn(3, 22));
        let (h1, c1) = p.encode(tape, h0, c0, q, e1).unwrap();
        let (h2, _) = p.encode(tape, h1, c1, q, e2).unwrap();
        let a = tape.constant(actions.clone());
        let logits = p.policy_logits(tape, h2, a);
        let logp = tape.log_softmax(logits);
        let lp = tape.pick(logp, 1);
        let v = p.value_head(tape, h2);
        let v2 = tape.mul(v, v);
        tape.add(lp, v2)
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        for kind in [EncoderKind::Lstm, EncoderKind::Feedforward] {
            let mut p = AgentParams::init(&small(kind), 8).unwrap();
            let actions = Tensor::matrix(5, 6, vecn(30, 30)).unwrap();
            // The network methods read weights through the tape, so a clone
            // supplies the ids while the original set is perturbed.
            let shell = p.clone();
            let err = max_relative_error(&mut p.params, |tape| both_heads_loss(&shell, tape, &actions));
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn both_losses_reach_the_shared_encoder() {
        let p = AgentParams::init(&small(EncoderKind::Lstm), 2).unwrap();
        let actions = Tensor::matrix(3, 6, vecn(18, 31)).unwrap();
        let s = state(3, 2);
        let encoder_norm = |grads: &crate::nn::Grads| {
            p.encoder.ids().iter().filter_map(|&id| grads.get(id)).map(|g| g.sum_squares()).sum::<f64>()
        };

        let mut tape = Tape::new(&p.params);
        let (h, _) = p.encode_state(&mut tape, &s).unwrap();
        let a = tape.constant(actions.clone());
        let logits = p.policy_logits(&mut tape, h, a);
        let logp = tape.log_softmax(logits);
        let lp = tape.pick(logp, 0);
        let g = tape.gradients(lp).unwrap();
        assert!(encoder_norm(&g) > 0.0);
        assert!(g.get(p.w3).is_none());

        let mut tape = Tape::new(&p.params);
        let (h, _) = p.encode_state(&mut tape, &s).unwrap();
        let v = p.value_head(&mut tape, h);
        let g = tape.gradients(v).unwrap();
        assert!(encoder_norm(&g) > 0.0);
        assert!(g.get(p.w1).is_none());
    }

    #[test]
    fn theta_and_psi_share_only_the_encoder() {
        let p = AgentParams::init(&small(EncoderKind::Lstm), 2).unwrap();
        let theta = p.theta_ids();
        let shared: Vec<_> = p.psi_ids().into_iter().filter(|id| theta.contains(id)).collect();
        assert_eq!(shared, p.encoder.ids());
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in [EncoderKind::Lstm, EncoderKind::Feedforward] {
            let p = AgentParams::init(&small(kind), 2).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("agent.ckpt");
            p.save(&path, 42).unwrap();
            let q = AgentParams::load(&path, Some(42)).unwrap();
            assert_eq!(q.encoder.kind(), kind);
            let s = state(3, 3);
            let actions = vec![stay(vecn(6, 1)), stay(vecn(6, 2))];
            assert_eq!(
                p.policy_distribution(&s, &actions).unwrap(),
                q.policy_distribution(&s, &actions).unwrap()
            );
            assert!(AgentParams::load(&path, Some(43)).is_err());
        }
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        for bad in [
            AgentConfig { gamma: 0.0, ..AgentConfig::default() },
            AgentConfig { gae_lambda: 1.5, ..AgentConfig::default() },
            AgentConfig { horizon: 0, ..AgentConfig::default() },
            AgentConfig { entropy_beta: -0.1, ..AgentConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
