//! Binary causal question answering over a causality graph.
//!
//! An actor-critic agent walks cause edges from the cause entity of a
//! question and answers "yes" when one of its decoded paths reaches the
//! effect entity. The crate contains every piece of that pipeline:
//!
//! * [`graph`]: the causality graph, exact-match entity linking and the BFS baseline.
//! * [`embed`]: word-vector tables and phrase pooling.
//! * [`nn`]: a small reverse-mode autodiff tape, LSTM cell, AdamW and checkpoints.
//! * [`env`]: the path-finding MDP with the STAY action.
//! * [`agent`]: the shared-LSTM policy and value networks.
//! * [`train`]: supervised bootstrapping from BFS demonstrations and A2C with GAE.
//! * [`infer`]: greedy decoding, beam search and the answer rule.
//! * [`data`]: cue-word question extraction and dataset filtering.
//! * [`eval`]: confusion tables, metrics and experiment sweeps.
//! * [`synthetic`]: fixtures and planted random graphs used by tests and benches.

pub mod agent;
pub mod data;
pub mod embed;
pub mod env;
pub mod error;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod nn;
pub mod synthetic;
pub mod train;

pub use agent::{AgentConfig, AgentParams, EncoderKind};
pub use data::{Label, QAExample, Split};
pub use embed::{Embedding, VectorTable};
pub use env::{Action, ActionKind, EnvState, Environment, Question};
pub use error::{Error, Result};
pub use graph::{BfsResult, CausalEdge, CausalGraph, EntityId};
pub use infer::{Answer, ScoredPath};
