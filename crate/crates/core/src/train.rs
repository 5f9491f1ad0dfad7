//! Supervised bootstrapping from BFS demonstrations followed by A2C with GAE.
//!
//! Rollouts are generated in fixed-size chunks. Each chunk sums its
//! gradients sequentially and chunk results are added in index order, so a
//! run gives the same parameters for any number of threads.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{action_matrix, AgentConfig, AgentParams};
use crate::env::{Carry, Environment, Question, Rollout, RolloutStep};
use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::nn::{clip_global_norm, sample_categorical, AdamW, AdamWConfig, Grads, RngSeed, Tape, Tensor, Var};

const DEMO_TAG: u64 = 0xde30;
const SUPERVISED_TAG: u64 = 0x5e9;
const RL_TAG: u64 = 0xa2c;
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub question: Arc<Question>,
    /// Action indices into each visited state's action space; STAY-padded to T.
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Demonstrations {
    pub demos: Vec<Demonstration>,
    pub sampled: usize,
    /// Sampled questions without a path of at most T hops.
    pub dropped: usize,
}

/// Samples `ceil(alpha * n)` questions without replacement and turns the BFS
/// shortest path of each into an action sequence.
pub fn generate_demonstrations(
    env: &Environment,
    questions: &[Arc<Question>],
    alpha: f64,
    seed: u64,
) -> Result<Demonstrations> {
    let n = ((alpha * questions.len() as f64).ceil() as usize).min(questions.len());
    let mut rng = RngSeed(seed).stream(&[DEMO_TAG]);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, questions.len(), n).into_vec();
    picked.sort_unstable();

    let mut out = Demonstrations {
        sampled: n,
        ..Demonstrations::default()
    };
    for i in picked {
        match demonstration(env, &questions[i])? {
            Some(d) => out.demos.push(d),
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

/// The BFS path of one question as actions, or `None` when no path of at
/// most T hops survives the action cap.
pub fn demonstration(env: &Environment, question: &Arc<Question>) -> Result<Option<Demonstration>> {
    let bfs = env.graph.bfs_shortest_path(question.cause, question.effect, env.horizon)?;
    let Some(path) = bfs.path else { return Ok(None) };
    let mut state = env.reset(question.clone())?;
    let mut actions = Vec::with_capacity(env.horizon);
    for t in 0..env.horizon {
        let space = env.action_space(&state);
        let index = match path.get(t + 1) {
            Some(&next) => match space.iter().position(|a| !a.is_stay() && a.destination(state.entity) == next) {
                Some(i) => i,
                None => return Ok(None),
            },
            None => space.len() - 1,
        };
        state = env.step(&state, &space[index])?.0;
        actions.push(index);
    }
    Ok(Some(Demonstration {
        question: question.clone(),
        actions,
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaeResult {
    pub advantages: Vec<f64>,
    pub lambda_returns: Vec<f64>,
}

/// `values` has T+1 entries; the last one is the bootstrap value.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<GaeResult> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::contract(format!(
            "need {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let mut advantages = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    let lambda_returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(GaeResult {
        advantages,
        lambda_returns,
    })
}

/// `G_t = sum_k gamma^k r_{t+k}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        running = rewards[t] + gamma * running;
        out[t] = running;
    }
    out
}

/// Tape handles of one episode, recorded while the agent walks.
pub struct Episode {
    pub log_probs: Vec<Var>,
    pub entropies: Vec<Var>,
    pub values: Vec<Var>,
    pub rollout: Rollout,
}

/// Walks one episode on `tape`, backpropagating through the whole history.
/// `choose` gets the step index and action probabilities and returns an action index.
pub fn run_episode(
    agent: &AgentParams,
    tape: &mut Tape,
    env: &Environment,
    question: Arc<Question>,
    with_values: bool,
    mut choose: impl FnMut(usize, &[f64]) -> usize,
) -> Result<Episode> {
    let mut state = env.reset(question.clone())?;
    let zeros = vec![0.0; 2 * agent.dim];
    let q = tape.vector(&question.q_embed);
    let (mut h, mut c) = (tape.vector(&zeros), tape.vector(&zeros));
    let mut episode = Episode {
        log_probs: Vec::with_capacity(env.horizon),
        entropies: Vec::with_capacity(env.horizon),
        values: Vec::new(),
        rollout: Rollout {
            question,
            steps: Vec::with_capacity(env.horizon),
            final_entity: state.entity,
        },
    };
    for t in 0..env.horizon {
        let e = tape.vector(&state.entity_embed);
        let (h1, c1) = agent.encode(tape, h, c, q, e)?;
        let mut actions = env.action_space(&state);
        let a = tape.constant(action_matrix(&actions)?);
        let logits = agent.policy_logits(tape, h1, a);
        let logp = tape.log_softmax(logits);
        let probs: Vec<f64> = tape.value(logp).iter().map(|x| x.exp()).collect();
        let p = tape.softmax(logits);
        let plogp = tape.dot(p, logp);
        episode.entropies.push(tape.scale(plogp, -1.0));

        let index = choose(t, &probs);
        if index >= actions.len() {
            return Err(Error::contract(format!("action {index} out of {} at step {t}", actions.len())));
        }
        episode.log_probs.push(tape.pick(logp, index));
        if with_values {
            episode.values.push(agent.value_head(tape, h1));
        }
        let carry = Carry {
            h: tape.value(h1).to_vec(),
            c: tape.value(c1).to_vec(),
        };
        let action = actions.swap_remove(index);
        let (next, reward) = env.step(&state, &action)?;
        episode.rollout.steps.push(RolloutStep {
            state,
            action,
            action_index: index,
            reward,
            probs,
        });
        state = next.with_history(carry);
        (h, c) = (h1, c1);
    }
    episode.rollout.final_entity = state.entity;
    Ok(episode)
}

/// Samples one rollout without recording gradients.
pub fn sample_rollout(agent: &AgentParams, env: &Environment, question: Arc<Question>, rng: &mut impl Rng) -> Result<Rollout> {
    let mut state = env.reset(question.clone())?;
    let mut steps = Vec::with_capacity(env.horizon);
    for _ in 0..env.horizon {
        let mut actions = env.action_space(&state);
        let (probs, carry) = agent.policy_step(&state, &actions)?;
        let index = sample_categorical(&probs, rng);
        let action = actions.swap_remove(index);
        let (next, reward) = env.step(&state, &action)?;
        steps.push(RolloutStep {
            state,
            action,
            action_index: index,
            reward,
            probs,
        });
        state = next.with_history(carry);
    }
    Ok(Rollout {
        question,
        steps,
        final_entity: state.entity,
    })
}

/// `-(1/B) sum_t w_t log pi_t - beta/(B (T-1)) sum_t H_t` for one episode.
pub fn policy_loss(tape: &mut Tape, episode: &Episode, weights: &[f64], beta: f64, batch: usize) -> Var {
    let b = batch as f64;
    let norm = entropy_norm(batch, episode.log_probs.len());
    let mut terms = Vec::with_capacity(2 * weights.len());
    for (t, &w) in weights.iter().enumerate() {
        terms.push(tape.scale(episode.log_probs[t], -w / b));
        if beta != 0.0 {
            terms.push(tape.scale(episode.entropies[t], -beta / norm));
        }
    }
    tape.add_all(&terms).expect("episodes have at least one step")
}

/// `1/(B (T-1)) sum_t (R_t - V_t)^2` with the targets held constant.
pub fn value_loss(tape: &mut Tape, episode: &Episode, targets: &[f64], batch: usize) -> Var {
    let norm = entropy_norm(batch, targets.len());
    let terms: Vec<Var> = targets
        .iter()
        .zip(&episode.values)
        .map(|(&r, &v)| {
            let r = tape.constant(Tensor::scalar(r));
            let diff = tape.sub(r, v);
            let sq = tape.mul(diff, diff);
            tape.scale(sq, 1.0 / norm)
        })
        .collect();
    tape.add_all(&terms).expect("episodes have at least one step")
}

/// `B (T-1)`, guarded so that T = 1 divides by B.
fn entropy_norm(batch: usize, horizon: usize) -> f64 {
    (batch * horizon.saturating_sub(1).max(1)) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Supervised,
    Rl,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub phase: Phase,
    pub step: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Batch entropy with the `1/(B (T-1))` normalization.
    pub entropy: f64,
    /// Distinct (question, path) pairs sampled in the RL phase so far.
    pub unique_paths: usize,
    /// Fraction of rollouts ending on the effect.
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Default)]
struct Partial {
    policy: Option<Grads>,
    value: Option<Grads>,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    reward: f64,
    paths: Vec<(usize, Vec<EntityId>)>,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        fn add(a: Option<Grads>, b: Option<Grads>) -> Option<Grads> {
            match (a, b) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            }
        }
        self.policy = add(self.policy, other.policy);
        self.value = add(self.value, other.value);
        self.policy_loss += other.policy_loss;
        self.value_loss += other.value_loss;
        self.entropy += other.entropy;
        self.reward += other.reward;
        self.paths.extend(other.paths);
        self
    }
}

pub struct Trainer<'a> {
    env: &'a Environment<'a>,
    questions: Vec<Arc<Question>>,
    config: AgentConfig,
    agent: AgentParams,
    theta: AdamW,
    psi: AdamW,
    demos: Demonstrations,
    demo_order: Vec<usize>,
    demo_epoch: u64,
    supervised_done: usize,
    rl_done: usize,
    explored: HashSet<(usize, Vec<EntityId>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a Environment<'a>, questions: Vec<Arc<Question>>, config: &AgentConfig) -> Result<Self> {
        let agent = AgentParams::init(config, config.seed)?;
        Trainer::with_params(env, questions, config, agent)
    }

    /// Continues from existing weights with fresh optimizer state.
    pub fn with_params(
        env: &'a Environment<'a>,
        questions: Vec<Arc<Question>>,
        config: &AgentConfig,
        agent: AgentParams,
    ) -> Result<Self> {
        config.validate()?;
        if questions.is_empty() {
            return Err(Error::Config("no training questions".into()));
        }
        if env.horizon != config.horizon || env.dim() != config.dim || agent.dim != config.dim {
            return Err(Error::Config(format!(
                "environment (T={}, d={}) and agent (d={}) do not match config (T={}, d={})",
                env.horizon,
                env.dim(),
                agent.dim,
                config.horizon,
                config.dim
            )));
        }
        let opt = AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let theta = AdamW::new(opt, &agent.params, &agent.theta_ids());
        let psi = AdamW::new(opt, &agent.params, &agent.psi_ids());
        let demos = if config.supervised_steps > 0 {
            generate_demonstrations(env, &questions, config.supervised_ratio, config.seed)?
        } else {
            Demonstrations::default()
        };
        Ok(Trainer {
            env,
            questions,
            config: config.clone(),
            agent,
            theta,
            psi,
            demos,
            demo_order: Vec::new(),
            demo_epoch: 0,
            supervised_done: 0,
            rl_done: 0,
            explored: HashSet::new(),
            started: Instant::now(),
        })
    }

    pub fn agent(&self) -> &AgentParams {
        &self.agent
    }

    pub fn into_agent(self) -> AgentParams {
        self.agent
    }

    pub fn demonstrations(&self) -> &Demonstrations {
        &self.demos
    }

    pub fn unique_paths(&self) -> usize {
        self.explored.len()
    }

    fn next_demo_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.supervised_batch);
        while batch.len() < self.config.supervised_batch {
            if self.demo_order.is_empty() {
                let mut order: Vec<usize> = (0..self.demos.demos.len()).collect();
                order.shuffle(&mut RngSeed(self.config.seed).stream(&[SUPERVISED_TAG, self.demo_epoch]));
                order.reverse();
                self.demo_order = order;
                self.demo_epoch += 1;
            }
            batch.push(self.demo_order.pop().expect("refilled above"));
        }
        batch
    }

    /// One REINFORCE step on demonstrations with unit rewards; only θ moves.
    /// Returns `None` when there are no demonstrations.
    pub fn supervised_step(&mut self) -> Result<Option<StepMetrics>> {
        if self.demos.demos.is_empty() {
            return Ok(None);
        }
        let batch = self.next_demo_batch();
        let demos: Vec<&Demonstration> = batch.iter().map(|&i| &self.demos.demos[i]).collect();
        let (agent, env, config) = (&self.agent, self.env, &self.config);
        let b = demos.len();
        let partial = reduce_chunks(b, |i| {
            let demo = demos[i];
            let mut tape = Tape::new(&agent.params);
            let ep = run_episode(agent, &mut tape, env, demo.question.clone(), false, |t, _| demo.actions[t])?;
            let ones = vec![1.0; env.horizon];
            let loss = policy_loss(&mut tape, &ep, &ones, config.entropy_beta, b);
            let entropy: f64 = ep.entropies.iter().map(|&v| tape.scalar(v)).sum();
            Ok(Partial {
                policy: Some(tape.gradients(loss)?.restrict(&agent.theta_ids())),
                policy_loss: tape.scalar(loss),
                entropy: entropy / entropy_norm(b, env.horizon),
                reward: ep.rollout.total_reward(),
                ..Partial::default()
            })
        })?;
        let mut grads = partial.policy.expect("batch is non-empty");
        let norm = clip_global_norm(&mut grads, self.config.max_grad_norm);
        self.theta.step(&mut self.agent.params, &grads);
        self.supervised_done += 1;
        Ok(Some(StepMetrics {
            phase: Phase::Supervised,
            step: self.supervised_done,
            policy_loss: partial.policy_loss,
            value_loss: 0.0,
            entropy: partial.entropy,
            unique_paths: self.explored.len(),
            mean_reward: partial.reward / b as f64,
            grad_norm: norm,
            wall_ms: self.started.elapsed().as_millis() as u64,
        }))
    }

    /// One A2C update on B freshly sampled rollouts.
    pub fn rl_step(&mut self) -> Result<StepMetrics> {
        let (agent, env, config, questions) = (&self.agent, self.env, &self.config, &self.questions);
        let b = config.batch_size;
        let step = self.rl_done as u64;
        let theta_ids = agent.theta_ids();
        let psi_ids = agent.psi_ids();
        let partial = reduce_chunks(b, |i| {
            let mut rng = RngSeed(config.seed).stream(&[RL_TAG, step, i as u64]);
            let qi = rng.gen_range(0..questions.len());
            let mut tape = Tape::new(&agent.params);
            let ep = run_episode(agent, &mut tape, env, questions[qi].clone(), config.critic, |_, probs| {
                sample_categorical(probs, &mut rng)
            })?;
            let rewards = ep.rollout.rewards();
            let entropy: f64 = ep.entropies.iter().map(|&v| tape.scalar(v)).sum();
            let mut out = Partial {
                entropy: entropy / entropy_norm(b, env.horizon),
                reward: ep.rollout.total_reward(),
                paths: vec![(qi, ep.rollout.path())],
                ..Partial::default()
            };
            if config.critic {
                let mut values: Vec<f64> = ep.values.iter().map(|&v| tape.scalar(v)).collect();
                values.push(0.0);
                let gae = compute_gae(&rewards, &values, config.gamma, config.gae_lambda)?;
                let pl = policy_loss(&mut tape, &ep, &gae.advantages, config.entropy_beta, b);
                let vl = value_loss(&mut tape, &ep, &gae.lambda_returns, b);
                out.policy = Some(tape.gradients(pl)?.restrict(&theta_ids));
                out.value = Some(tape.gradients(vl)?.restrict(&psi_ids));
                out.policy_loss = tape.scalar(pl);
                out.value_loss = tape.scalar(vl);
            } else {
                let returns = discounted_returns(&rewards, config.gamma);
                let pl = policy_loss(&mut tape, &ep, &returns, config.entropy_beta, b);
                out.policy = Some(tape.gradients(pl)?.restrict(&theta_ids));
                out.policy_loss = tape.scalar(pl);
            }
            Ok(out)
        })?;

        let mut policy = partial.policy.expect("batch is non-empty");
        let norm = clip_global_norm(&mut policy, self.config.max_grad_norm);
        self.theta.step(&mut self.agent.params, &policy);
        if let Some(mut value) = partial.value {
            clip_global_norm(&mut value, self.config.max_grad_norm);
            self.psi.step(&mut self.agent.params, &value);
        }
        self.explored.extend(partial.paths);
        self.rl_done += 1;
        Ok(StepMetrics {
            phase: Phase::Rl,
            step: self.rl_done,
            policy_loss: partial.policy_loss,
            value_loss: partial.value_loss,
            entropy: partial.entropy,
            unique_paths: self.explored.len(),
            mean_reward: partial.reward / b as f64,
            grad_norm: norm,
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// Runs both phases, calling `on_step` for every logged step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics, &AgentParams) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let every = self.config.log_every.max(1);
        let mut log = Vec::new();
        let total = self.config.supervised_steps;
        for k in 1..=total {
            let Some(m) = self.supervised_step()? else { break };
            if k % every == 0 || k == total {
                on_step(&m, &self.agent)?;
                log.push(m);
            }
        }
        let total = self.config.steps;
        for k in 1..=total {
            let m = self.rl_step()?;
            if k % every == 0 || k == total {
                on_step(&m, &self.agent)?;
                log.push(m);
            }
        }
        Ok(log)
    }
}

/// Convenience wrapper: trains from scratch and returns the weights and log.
pub fn train_loop(env: &Environment, questions: Vec<Arc<Question>>, config: &AgentConfig) -> Result<(AgentParams, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(env, questions, config)?;
    let log = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_agent(), log))
}

/// Computes `work(i)` for `i < n` in fixed chunks, merging in index order.
fn reduce_chunks(n: usize, work: impl Fn(usize) -> Result<Partial> + Sync) -> Result<Partial> {
    let chunks: Vec<Partial> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|k| {
            let mut acc = Partial::default();
            for i in k * CHUNK..((k + 1) * CHUNK).min(n) {
                acc = acc.merge(work(i)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().fold(Partial::default(), Partial::merge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, QAExample};
    use crate::embed::{GraphEmbeddings, VectorTable};
    use crate::graph::{CausalGraph, GraphRecord};
    use crate::nn::gradcheck::max_relative_error;
    use crate::synthetic::{pneumonia_graph, pneumonia_question};
    use proptest::prelude::*;
    use rand::Rng;

    fn table_for(g: &CausalGraph, dim: usize) -> VectorTable {
        let mut words: Vec<String> = g.entities().map(|e| g.surface(e).to_string()).collect();
        words.push("does cause can lead to causes".into());
        VectorTable::random(words.iter().map(String::as_str), dim, 11).unwrap()
    }

    struct Fixture {
        graph: CausalGraph,
        table: VectorTable,
        emb: GraphEmbeddings,
    }

    impl Fixture {
        fn new(graph: CausalGraph, dim: usize) -> Self {
            let table = table_for(&graph, dim);
            let emb = GraphEmbeddings::build(&graph, &table);
            Fixture { graph, table, emb }
        }

        fn env(&self, horizon: usize) -> Environment<'_> {
            Environment::new(&self.graph, &self.emb, horizon)
        }

        fn question(&self, env: &Environment, cause: &str, effect: &str) -> Arc<Question> {
            let ex = QAExample::new("q", &format!("does {cause} cause {effect}"), cause, effect, Label::Yes);
            Arc::new(env.question(&self.table, &ex).unwrap())
        }
    }

    fn chain(names: &[&str]) -> CausalGraph {
        let records: Vec<GraphRecord> = names
            .windows(2)
            .map(|w| GraphRecord::new(w[0], w[1], &format!("{} causes {}", w[0], w[1]), ""))
            .collect();
        CausalGraph::from_records(&records, false)
    }

    fn small_config(horizon: usize) -> AgentConfig {
        AgentConfig {
            dim: 4,
            hidden: 8,
            horizon,
            learning_rate: 1e-2,
            batch_size: 8,
            supervised_batch: 4,
            steps: 0,
            supervised_steps: 0,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn pneumonia_demonstration_is_padded() {
        let fx = Fixture::new(pneumonia_graph(false), 4);
        let env = fx.env(4);
        let q = Arc::new(env.question(&fx.table, &pneumonia_question()).unwrap());
        let demo = demonstration(&env, &q).unwrap().unwrap();
        let mut state = env.reset(q).unwrap();
        let mut names = Vec::new();
        for &a in &demo.actions {
            let space = env.action_space(&state);
            state = env.step(&state, &space[a]).unwrap().0;
            names.push(if space[a].is_stay() { "STAY".to_string() } else { fx.graph.surface(state.entity).to_string() });
        }
        assert_eq!(names, ["sepsis", "kidney failure", "anemia", "STAY"]);
    }

    #[test]
    fn unreachable_demonstration_is_dropped() {
        let fx = Fixture::new(pneumonia_graph(false), 4);
        let env = fx.env(2);
        let q = Arc::new(env.question(&fx.table, &pneumonia_question()).unwrap());
        assert!(demonstration(&env, &q).unwrap().is_none());
        let g = generate_demonstrations(&env, &[q], 1.0, 0).unwrap();
        assert_eq!((g.sampled, g.dropped, g.demos.len()), (1, 1, 0));
    }

    #[test]
    fn alpha_sampling_count() {
        let names: Vec<String> = (0..1001).map(|i| format!("n{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let fx = Fixture::new(chain(&refs), 2);
        let env = fx.env(1);
        let qs: Vec<_> = (0..1000).map(|i| fx.question(&env, &names[i], &names[i + 1])).collect();
        let g = generate_demonstrations(&env, &qs, 0.8, 3).unwrap();
        assert_eq!((g.sampled, g.demos.len(), g.dropped), (800, 800, 0));
        let again = generate_demonstrations(&env, &qs, 0.8, 3).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn gae_examples() {
        let r = compute_gae(&[0.0, 0.0, 1.0], &[0.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(r.advantages, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.lambda_returns, vec![1.0, 1.0, 1.0]);

        let rewards = [0.3, -0.2, 1.0];
        let values = [0.1, 0.5, -0.4, 0.0];
        let r = compute_gae(&rewards, &values, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(r.advantages[t], rewards[t] + 0.9 * values[t + 1] - values[t]);
        }
        assert!(compute_gae(&rewards, &values[..3], 0.9, 0.5).is_err());
    }

    fn gae_oracle(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| {
                        let delta = rewards[k] + gamma * values[k + 1] - values[k];
                        (gamma * lambda).powi((k - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gae_matches_direct_sum(
            rewards in proptest::collection::vec(-1.0f64..1.0, 1..12),
            seed in any::<u64>(),
            gamma in 0.01f64..=1.0,
            lambda in 0.01f64..=1.0,
        ) {
            let mut rng = RngSeed(seed).stream(&[]);
            let values: Vec<f64> = (0..=rewards.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r = compute_gae(&rewards, &values, gamma, lambda).unwrap();
            let oracle = gae_oracle(&rewards, &values, gamma, lambda);
            for t in 0..rewards.len() {
                prop_assert!((r.advantages[t] - oracle[t]).abs() < 1e-9);
                prop_assert_eq!(r.lambda_returns[t], r.advantages[t] + values[t]);
            }
        }
    }

    #[test]
    fn discounted_returns_values() {
        assert_eq!(discounted_returns(&[0.0, 0.0, 1.0], 0.5), vec![0.25, 0.5, 1.0]);
    }

    /// Full A2C loss on a toy MDP with advantages and targets frozen at the
    /// current parameters, checked against central differences.
    #[test]
    fn a2c_loss_gradient_matches_finite_differences() {
        let records = [
            GraphRecord::new("a", "b", "a causes b", ""),
            GraphRecord::new("b", "c", "b causes c", ""),
            GraphRecord::new("a", "c", "a causes c", ""),
        ];
        let fx = Fixture::new(CausalGraph::from_records(&records, true), 3);
        let env = fx.env(3);
        let q = fx.question(&env, "a", "c");
        let config = AgentConfig {
            dim: 3,
            hidden: 4,
            horizon: 3,
            ..AgentConfig::default()
        };
        let mut agent = AgentParams::init(&config, 5).unwrap();
        let shell = agent.clone();
        let (batch, beta) = (2, 0.3);

        let mut frozen = Vec::new();
        for seed in 0..batch as u64 {
            let mut rng = RngSeed(seed).stream(&[]);
            let mut tape = Tape::new(&agent.params);
            let ep = run_episode(&agent, &mut tape, &env, q.clone(), true, |_, p| sample_categorical(p, &mut rng)).unwrap();
            let mut values: Vec<f64> = ep.values.iter().map(|&v| tape.scalar(v)).collect();
            values.push(0.0);
            let gae = compute_gae(&ep.rollout.rewards(), &values, 0.99, 0.95).unwrap();
            let actions: Vec<usize> = ep.rollout.steps.iter().map(|s| s.action_index).collect();
            frozen.push((actions, gae));
        }

        let err = max_relative_error(&mut agent.params, |tape| {
            let mut terms = Vec::new();
            for (actions, gae) in &frozen {
                let ep = run_episode(&shell, tape, &env, q.clone(), true, |t, _| actions[t]).unwrap();
                terms.push(policy_loss(tape, &ep, &gae.advantages, beta, batch));
                terms.push(value_loss(tape, &ep, &gae.lambda_returns, batch));
            }
            tape.add_all(&terms).unwrap()
        });
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_advantages_leave_only_the_entropy_gradient() {
        let fx = Fixture::new(pneumonia_graph(true), 3);
        let env = fx.env(2);
        let q = Arc::new(env.question(&fx.table, &pneumonia_question()).unwrap());
        let config = AgentConfig { dim: 3, hidden: 4, horizon: 2, ..AgentConfig::default() };
        let agent = AgentParams::init(&config, 1).unwrap();
        let build = |tape: &mut Tape, weights: &[f64], beta: f64| {
            let ep = run_episode(&agent, tape, &env, q.clone(), false, |_, _| 0).unwrap();
            policy_loss(tape, &ep, weights, beta, 4)
        };
        let mut tape = Tape::new(&agent.params);
        let loss = build(&mut tape, &[0.0, 0.0], 0.5);
        let g = tape.gradients(loss).unwrap();

        let mut tape = Tape::new(&agent.params);
        let ep = run_episode(&agent, &mut tape, &env, q.clone(), false, |_, _| 0).unwrap();
        let h: Vec<Var> = ep.entropies.clone();
        let sum = tape.add_all(&h).unwrap();
        let scaled = tape.scale(sum, -0.5 / 4.0);
        let expected = tape.gradients(scaled).unwrap();
        for id in agent.theta_ids() {
            let (a, b) = (g.get(id).unwrap().data(), expected.get(id).unwrap().data());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_head_learns_constant_return() {
        // a has no edges: the only action is STAY and every episode succeeds.
        let records = [GraphRecord::new("b", "a", "b causes a", "")];
        let fx = Fixture::new(CausalGraph::from_records(&records, false), 4);
        let env = fx.env(1);
        let q = fx.question(&env, "a", "a");
        let config = AgentConfig {
            steps: 300,
            ..small_config(1)
        };
        let (agent, log) = train_loop(&env, vec![q.clone()], &config).unwrap();
        let v = agent.value(&env.reset(q).unwrap()).unwrap();
        assert!((v - 1.0).abs() < 0.02, "value {v}");
        assert!(log.iter().all(|m| m.mean_reward == 1.0));
    }

    #[test]
    fn supervised_phase_fits_a_demonstration_and_freezes_value_head() {
        let fx = Fixture::new(pneumonia_graph(true), 4);
        let env = fx.env(4);
        let q = Arc::new(env.question(&fx.table, &pneumonia_question()).unwrap());
        let config = AgentConfig {
            supervised_steps: 50,
            supervised_ratio: 1.0,
            entropy_beta: 0.0,
            ..small_config(4)
        };
        let mut trainer = Trainer::new(&env, vec![q.clone()], &config).unwrap();
        let value_before: Vec<Vec<f64>> =
            trainer.agent().value_head_ids().iter().map(|&id| trainer.agent().params.get(id).data().to_vec()).collect();

        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(trainer.supervised_step().unwrap().unwrap().policy_loss);
        }
        let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(rises <= 5, "{losses:?}");
        assert!(losses[49] < losses[0]);

        for _ in 0..150 {
            trainer.supervised_step().unwrap();
        }
        let agent = trainer.agent();
        let demo = &trainer.demonstrations().demos[0];
        let mut state = env.reset(q).unwrap();
        for &a in &demo.actions {
            let space = env.action_space(&state);
            let (probs, carry) = agent.policy_step(&state, &space).unwrap();
            assert!(probs[a] > 0.9, "{probs:?}");
            state = env.step(&state, &space[a]).unwrap().0.with_history(carry);
        }
        let value_after: Vec<Vec<f64>> =
            agent.value_head_ids().iter().map(|&id| agent.params.get(id).data().to_vec()).collect();
        assert_eq!(value_before, value_after);
    }

    fn greedy_end(agent: &AgentParams, env: &Environment, q: Arc<Question>) -> EntityId {
        let mut state = env.reset(q).unwrap();
        for _ in 0..env.horizon {
            let space = env.action_space(&state);
            let (probs, carry) = agent.policy_step(&state, &space).unwrap();
            let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            state = env.step(&state, &space[best]).unwrap().0.with_history(carry);
        }
        state.entity
    }

    #[test]
    fn chain_converges_with_rl_only() {
        let fx = Fixture::new(chain(&["a", "b", "c", "d"]), 4);
        let env = fx.env(3);
        let q = fx.question(&env, "a", "d");
        let config = AgentConfig {
            steps: 150,
            batch_size: 16,
            ..small_config(3)
        };
        let (agent, log) = train_loop(&env, vec![q.clone()], &config).unwrap();
        assert_eq!(fx.graph.surface(greedy_end(&agent, &env, q)), "d");
        assert!(log.windows(2).all(|w| w[0].unique_paths <= w[1].unique_paths));
    }

    #[test]
    fn supervised_bootstrap_lowers_entropy() {
        let fx = Fixture::new(pneumonia_graph(true), 4);
        let env = fx.env(3);
        let pairs = [("pneumonia", "kidney failure"), ("bacteria", "pericarditis"), ("sepsis", "anemia"), ("ards", "grief")];
        let qs: Vec<_> = pairs.iter().map(|(c, e)| fx.question(&env, c, e)).collect();
        let held_out = fx.question(&env, "pneumonia", "death");
        let config = AgentConfig {
            supervised_steps: 100,
            supervised_ratio: 1.0,
            ..small_config(3)
        };
        let mean_entropy = |agent: &AgentParams| {
            let mut state = env.reset(held_out.clone()).unwrap();
            let mut total = 0.0;
            for _ in 0..3 {
                let space = env.action_space(&state);
                let (probs, carry) = agent.policy_step(&state, &space).unwrap();
                total += crate::nn::entropy(&probs);
                let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
                state = env.step(&state, &space[best]).unwrap().0.with_history(carry);
            }
            total
        };
        let untrained = AgentParams::init(&config, config.seed).unwrap();
        let (trained, _) = train_loop(&env, qs, &config).unwrap();
        assert!(mean_entropy(&trained) < mean_entropy(&untrained));
    }

    #[test]
    fn training_is_independent_of_thread_count() {
        let fx = Fixture::new(pneumonia_graph(true), 4);
        let env = fx.env(3);
        let q = Arc::new(env.question(&fx.table, &pneumonia_question()).unwrap());
        let config = AgentConfig {
            steps: 3,
            batch_size: 20,
            supervised_steps: 2,
            ..small_config(3)
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train_loop(&env, vec![q.clone()], &config).unwrap().0)
        };
        let (a, b) = (run(1), run(4));
        for id in a.params.ids() {
            assert_eq!(a.params.get(id).data(), b.params.get(id).data());
        }
    }

    #[test]
    fn empty_question_set_is_a_config_error() {
        let fx = Fixture::new(pneumonia_graph(false), 4);
        let env = fx.env(3);
        assert!(matches!(train_loop(&env, vec![], &small_config(3)), Err(Error::Config(_))));
    }
}
