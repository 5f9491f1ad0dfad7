//! Run configuration: defaults, then a key=value file, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causalqa::{AgentConfig, EncoderKind};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// File name of the resolved config written next to every checkpoint.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub agent: AgentConfig,
    pub inverse_edges: bool,
    pub greedy: bool,
    pub threads: usize,
    /// Seed for random word vectors when no vectors file is given.
    pub vector_seed: u64,
    pub graph: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            agent: AgentConfig::default(),
            inverse_edges: true,
            greedy: false,
            threads: 1,
            vector_seed: 0,
            graph: None,
            dataset: None,
            vectors: None,
        }
    }
}

/// Bad flags or config values; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const STRING_KEYS: &[&str] = &["encoder", "graph", "dataset", "vectors"];

fn to_map(config: &RunConfig) -> BTreeMap<String, Value> {
    match serde_json::to_value(config).expect("config serializes") {
        Value::Object(m) => m.into_iter().collect(),
        _ => unreachable!(),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_value(key: &str, raw: &str) -> Value {
    let raw = raw.trim();
    if raw.is_empty() {
        Value::Null
    } else if STRING_KEYS.contains(&key) {
        Value::String(raw.to_string())
    } else {
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
    }
}

impl RunConfig {
    /// Every field, one `key=value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        to_map(self).iter().map(|(k, v)| format!("{k}={}\n", render(v))).collect()
    }

    pub fn parse_text(base: &RunConfig, text: &str, origin: &str) -> Result<RunConfig> {
        let mut map = to_map(base);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key=value", i + 1)))?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(usage(format!("{origin}:{}: unknown key {key:?}", i + 1)));
            }
            map.insert(key.to_string(), parse_value(key, raw));
        }
        let object: serde_json::Map<String, Value> = map.into_iter().collect();
        serde_json::from_value(Value::Object(object)).map_err(|e| usage(format!("{origin}: {e}")))
    }

    pub fn load(base: &RunConfig, path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::parse_text(base, &text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn graph_path(&self) -> Result<&Path> {
        self.graph.as_deref().ok_or_else(|| usage("no graph given (--graph or graph= in --config)"))
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| usage("no dataset given (--dataset or dataset= in --config)"))
    }
}

/// Flags shared by every command that builds an agent or loads a graph.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat key=value file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Causality graph, one JSON record per line
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Question dataset (TSV written by `extract`)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Word vectors in GloVe text format; random vectors when absent
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub vector_seed: Option<u64>,
    /// Embedding dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Hidden size of the policy and value heads
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Path length T
    #[arg(long)]
    pub hops: Option<usize>,
    /// RL training steps
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub gae_lambda: Option<f64>,
    #[arg(long)]
    pub entropy_beta: Option<f64>,
    #[arg(long)]
    pub supervised_steps: Option<usize>,
    #[arg(long)]
    pub supervised_batch: Option<usize>,
    /// Fraction of training questions used for demonstrations
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Keep at most this many moves per state
    #[arg(long)]
    pub max_actions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Write a checkpoint every K RL steps (0 = only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Worker threads; results do not depend on it
    #[arg(long)]
    pub threads: Option<usize>,
    /// Load the graph without inverse edges
    #[arg(long)]
    pub no_inverse_edges: bool,
    /// Feedforward encoder instead of the LSTM
    #[arg(long)]
    pub no_lstm: bool,
    /// Train without a value head (REINFORCE)
    #[arg(long)]
    pub no_critic: bool,
    /// Greedy decoding instead of beam search
    #[arg(long)]
    pub greedy: bool,
}

impl ConfigArgs {
    /// `base`, then the `--config` file, then flags.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(&base, path)?,
            None => base,
        };
        let a = &mut c.agent;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v.into(); })*
            };
        }
        set! {
            dim => a.dim, hidden => a.hidden, hops => a.horizon, steps => a.steps,
            batch_size => a.batch_size, lr => a.learning_rate, weight_decay => a.weight_decay,
            gamma => a.gamma, gae_lambda => a.gae_lambda, entropy_beta => a.entropy_beta,
            supervised_steps => a.supervised_steps, supervised_batch => a.supervised_batch,
            alpha => a.supervised_ratio, beam_width => a.beam_width, seed => a.seed,
            log_every => a.log_every, checkpoint_every => a.checkpoint_every,
        }
        if let Some(m) = self.max_actions {
            a.max_actions = Some(m);
        }
        if self.no_lstm {
            a.encoder = EncoderKind::Feedforward;
        }
        if self.no_critic {
            a.critic = false;
        }
        set! {
            threads => c.threads, vector_seed => c.vector_seed,
            graph => c.graph, dataset => c.dataset, vectors => c.vectors,
        }
        if self.no_inverse_edges {
            c.inverse_edges = false;
        }
        if self.greedy {
            c.greedy = true;
        }
        c.agent.validate().map_err(|e| usage(e.to_string()))?;
        if c.threads == 0 {
            return Err(usage("threads must be positive"));
        }
        Ok(c)
    }

    /// Like [`resolve`](Self::resolve), starting from the config saved next to `checkpoint`.
    pub fn resolve_for_checkpoint(&self, checkpoint: &Path) -> Result<RunConfig> {
        let sibling = checkpoint.with_file_name(CONFIG_FILE);
        let base = if sibling.exists() {
            RunConfig::load(&RunConfig::default(), &sibling)?
        } else {
            RunConfig::default()
        };
        self.resolve(base)
    }
}
