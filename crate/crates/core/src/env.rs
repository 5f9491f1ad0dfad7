//! The path-finding MDP. A state sits on one entity; actions follow an
//! outgoing edge or STAY; the only reward is 1 at the last step when the
//! agent stands on the question's effect.

use std::sync::Arc;

use crate::data::QAExample;
use crate::embed::{embed_phrase, Embedding, GraphEmbeddings, VectorTable};
use crate::error::{Error, Result};
use crate::graph::{CausalEdge, CausalGraph, EntityId};

/// A linked question ready for the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub q_embed: Embedding,
    pub cause: EntityId,
    pub effect: EntityId,
}

/// Recurrent history carried between steps. The environment never looks inside.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl Carry {
    pub fn zeros(size: usize) -> Self {
        Carry {
            h: vec![0.0; size],
            c: vec![0.0; size],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub question: Arc<Question>,
    pub entity: EntityId,
    pub entity_embed: Embedding,
    /// History before the current entity is encoded; zero at reset.
    pub history: Carry,
    pub t: usize,
}

impl EnvState {
    pub fn effect(&self) -> EntityId {
        self.question.effect
    }

    pub fn with_history(mut self, history: Carry) -> Self {
        self.history = history;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    Move(CausalEdge),
    Stay,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub kind: ActionKind,
    /// `[sentence ; destination]` for moves, `[0 ; current entity]` for STAY.
    pub embed: Embedding,
}

impl Action {
    pub fn destination(&self, from: EntityId) -> EntityId {
        match self.kind {
            ActionKind::Move(edge) => edge.dst,
            ActionKind::Stay => from,
        }
    }

    pub fn is_stay(&self) -> bool {
        self.kind == ActionKind::Stay
    }
}

/// One transition of a rollout, with the action distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub state: EnvState,
    pub action: Action,
    pub action_index: usize,
    pub reward: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub question: Arc<Question>,
    pub steps: Vec<RolloutStep>,
    pub final_entity: EntityId,
}

impl Rollout {
    /// `e_0 .. e_T`.
    pub fn path(&self) -> Vec<EntityId> {
        let mut path: Vec<EntityId> = self.steps.iter().map(|s| s.state.entity).collect();
        path.push(self.final_entity);
        path
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

pub struct Environment<'a> {
    pub graph: &'a CausalGraph,
    pub embeddings: &'a GraphEmbeddings,
    pub horizon: usize,
    /// Keep at most this many moves per state, dropping the highest destination ids.
    pub max_actions: Option<usize>,
}

impl<'a> Environment<'a> {
    pub fn new(graph: &'a CausalGraph, embeddings: &'a GraphEmbeddings, horizon: usize) -> Self {
        Environment {
            graph,
            embeddings,
            horizon,
            max_actions: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim
    }

    /// Links and embeds a question; both phrases must link.
    pub fn question(&self, table: &VectorTable, example: &QAExample) -> Result<Question> {
        let link = |phrase: &str| {
            self.graph
                .link(phrase)
                .ok_or_else(|| Error::contract(format!("{phrase:?} does not link to the graph")))
        };
        Ok(Question {
            id: example.id.clone(),
            text: example.question.clone(),
            q_embed: embed_phrase(table, &example.question),
            cause: link(&example.cause)?,
            effect: link(&example.effect)?,
        })
    }

    fn state_at(&self, question: Arc<Question>, entity: EntityId, history: Carry, t: usize) -> EnvState {
        EnvState {
            question,
            entity,
            entity_embed: self.embeddings.entities[entity.index()].clone(),
            history,
            t,
        }
    }

    /// Zero history, standing on the cause, `t = 0`. The history size is
    /// the LSTM width `2d`.
    pub fn reset(&self, question: Arc<Question>) -> Result<EnvState> {
        for e in [question.cause, question.effect] {
            if !self.graph.contains(e) {
                return Err(Error::contract(format!("entity {e} not in graph")));
            }
        }
        let cause = question.cause;
        Ok(self.state_at(question, cause, Carry::zeros(2 * self.dim()), 0))
    }

    /// One move per outgoing edge in adjacency order, then STAY.
    pub fn action_space(&self, state: &EnvState) -> Vec<Action> {
        let edges = self.graph.neighbors(state.entity).unwrap_or_default();
        let edges = match self.max_actions {
            Some(cap) if edges.len() > cap => &edges[..cap],
            _ => edges,
        };
        let mut actions: Vec<Action> = edges
            .iter()
            .map(|edge| Action {
                kind: ActionKind::Move(*edge),
                embed: Embedding::concat(
                    &self.embeddings.sentences[edge.provenance.0 as usize],
                    &self.embeddings.entities[edge.dst.index()],
                ),
            })
            .collect();
        actions.push(Action {
            kind: ActionKind::Stay,
            embed: Embedding::concat(&vec![0.0; self.dim()], &state.entity_embed),
        });
        actions
    }

    /// Deterministic transition. The history is copied unchanged; the agent
    /// replaces it with [`EnvState::with_history`].
    pub fn step(&self, state: &EnvState, action: &Action) -> Result<(EnvState, f64)> {
        if state.t >= self.horizon {
            return Err(Error::contract(format!("step at t={} with horizon {}", state.t, self.horizon)));
        }
        if let ActionKind::Move(edge) = action.kind {
            let known = self.graph.edge(state.entity, edge.dst).is_some_and(|e| *e == edge);
            if edge.src != state.entity || !known {
                return Err(Error::contract(format!(
                    "action {} -> {} is not available at {}",
                    edge.src, edge.dst, state.entity
                )));
            }
        }
        let next = action.destination(state.entity);
        let t = state.t + 1;
        let reward = if t == self.horizon && next == state.effect() { 1.0 } else { 0.0 };
        Ok((self.state_at(state.question.clone(), next, state.history.clone(), t), reward))
    }
}
