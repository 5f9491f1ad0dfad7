//! Decoding: greedy paths, beam search over path probability and the yes/no rule.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::AgentParams;
use crate::data::{Label, QAExample};
use crate::embed::VectorTable;
use crate::env::{Action, ActionKind, Carry, EnvState, Environment, Question};
use crate::error::{Error, Result};
use crate::graph::{CausalEdge, CausalGraph, EntityId};

/// Anything that assigns probabilities to the actions of a state.
pub trait PathPolicy: Sync {
    /// Probabilities over `actions` and the history to hand to the successor state.
    fn step(&self, state: &EnvState, actions: &[Action]) -> Result<(Vec<f64>, Carry)>;
}

impl PathPolicy for AgentParams {
    fn step(&self, state: &EnvState, actions: &[Action]) -> Result<(Vec<f64>, Carry)> {
        self.policy_step(state, actions)
    }
}

/// Fixed edge probabilities. At an entity with table entries, unlisted
/// actions (STAY included) get zero; elsewhere the choice is uniform.
#[derive(Clone, Debug, Default)]
pub struct FixedPolicy {
    table: HashMap<(EntityId, EntityId), f64>,
}

impl FixedPolicy {
    pub fn new(graph: &CausalGraph, entries: &[(&str, &str, f64)]) -> Result<Self> {
        let mut table = HashMap::new();
        for &(src, dst, p) in entries {
            let (Some(s), Some(d)) = (graph.link(src), graph.link(dst)) else {
                return Err(Error::contract(format!("{src} -> {dst} is not in the graph")));
            };
            if graph.edge(s, d).is_none() {
                return Err(Error::contract(format!("{src} -> {dst} is not an edge")));
            }
            table.insert((s, d), p);
        }
        Ok(FixedPolicy { table })
    }

    pub fn pneumonia(graph: &CausalGraph) -> Result<Self> {
        FixedPolicy::new(graph, crate::synthetic::PNEUMONIA_PROBABILITIES)
    }
}

impl PathPolicy for FixedPolicy {
    fn step(&self, state: &EnvState, actions: &[Action]) -> Result<(Vec<f64>, Carry)> {
        let from = state.entity;
        let listed: Vec<Option<f64>> = actions
            .iter()
            .map(|a| match a.kind {
                ActionKind::Move(edge) => self.table.get(&(from, edge.dst)).copied(),
                ActionKind::Stay => None,
            })
            .collect();
        let probs = if listed.iter().any(Option::is_some) {
            listed.iter().map(|p| p.unwrap_or(0.0)).collect()
        } else {
            vec![1.0 / actions.len() as f64; actions.len()]
        };
        Ok((probs, state.history.clone()))
    }
}

/// A decoded path `e_0 .. e_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPath {
    pub entities: Vec<EntityId>,
    /// Sum of per-step log probabilities.
    pub log_prob: f64,
    pub step_probs: Vec<f64>,
    /// The edge taken at each step; `None` for STAY.
    pub edges: Vec<Option<CausalEdge>>,
}

impl ScoredPath {
    fn start(entity: EntityId) -> Self {
        ScoredPath {
            entities: vec![entity],
            log_prob: 0.0,
            step_probs: Vec::new(),
            edges: Vec::new(),
        }
    }

    fn extend(&self, action: &Action, p: f64) -> Self {
        let mut next = self.clone();
        next.entities.push(action.destination(*self.entities.last().expect("paths are non-empty")));
        next.log_prob += p.ln();
        next.step_probs.push(p);
        next.edges.push(match action.kind {
            ActionKind::Move(e) => Some(e),
            ActionKind::Stay => None,
        });
        next
    }

    pub fn probability(&self) -> f64 {
        self.log_prob.exp()
    }

    pub fn contains(&self, entity: EntityId) -> bool {
        self.entities.contains(&entity)
    }
}

/// Descending log probability, then ascending entity sequence.
fn rank(a: &ScoredPath, b: &ScoredPath) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.entities.cmp(&b.entities))
}

/// Argmax action at every step, ties to the lowest action index.
pub fn greedy_path(policy: &impl PathPolicy, env: &Environment, question: Arc<Question>) -> Result<ScoredPath> {
    let mut state = env.reset(question)?;
    let mut path = ScoredPath::start(state.entity);
    for _ in 0..env.horizon {
        let actions = env.action_space(&state);
        let (probs, carry) = policy.step(&state, &actions)?;
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        path = path.extend(&actions[best], probs[best]);
        state = env.step(&state, &actions[best])?.0.with_history(carry);
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// At most `width` full paths, best first.
    pub paths: Vec<ScoredPath>,
    /// Distinct entities among all candidates scored, pruned ones included.
    pub expanded_nodes: usize,
}

struct Partial {
    state: EnvState,
    path: ScoredPath,
}

/// Keeps the `width` best partial paths at every step. Zero-probability
/// extensions are never kept; identical entity sequences are merged.
pub fn beam_search(policy: &impl PathPolicy, env: &Environment, question: Arc<Question>, width: usize) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let state = env.reset(question)?;
    let mut seen: BTreeSet<EntityId> = BTreeSet::from([state.entity]);
    let mut beam = vec![Partial {
        path: ScoredPath::start(state.entity),
        state,
    }];
    for _ in 0..env.horizon {
        let mut candidates: Vec<(ScoredPath, usize, Action, Carry)> = Vec::new();
        for (k, partial) in beam.iter().enumerate() {
            let actions = env.action_space(&partial.state);
            let (probs, carry) = policy.step(&partial.state, &actions)?;
            for (action, &p) in actions.into_iter().zip(&probs) {
                seen.insert(action.destination(partial.state.entity));
                if p > 0.0 {
                    candidates.push((partial.path.extend(&action, p), k, action, carry.clone()));
                }
            }
        }
        // Stable sort: of two equal candidates the earlier one is kept.
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        let mut kept = HashSet::new();
        candidates.retain(|c| kept.insert(c.0.entities.clone()));
        candidates.truncate(width);
        beam = candidates
            .into_iter()
            .map(|(path, k, action, carry)| {
                let (next, _) = env.step(&beam[k].state, &action)?;
                Ok(Partial {
                    state: next.with_history(carry),
                    path,
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(BeamResult {
        paths: beam.into_iter().map(|p| p.path).collect(),
        expanded_nodes: seen.len(),
    })
}

/// Every positive-probability path of length T, ranked like [`beam_search`].
pub fn exhaustive_paths(policy: &impl PathPolicy, env: &Environment, question: Arc<Question>) -> Result<Vec<ScoredPath>> {
    fn walk(
        policy: &impl PathPolicy,
        env: &Environment,
        state: EnvState,
        path: ScoredPath,
        out: &mut Vec<ScoredPath>,
    ) -> Result<()> {
        if state.t == env.horizon {
            out.push(path);
            return Ok(());
        }
        let actions = env.action_space(&state);
        let (probs, carry) = policy.step(&state, &actions)?;
        for (action, &p) in actions.iter().zip(&probs) {
            if p > 0.0 {
                let next = env.step(&state, action)?.0.with_history(carry.clone());
                walk(policy, env, next, path.extend(action, p), out)?;
            }
        }
        Ok(())
    }
    let state = env.reset(question)?;
    let mut out = Vec::new();
    let start = ScoredPath::start(state.entity);
    walk(policy, env, state, start, &mut out)?;
    out.sort_by(rank);
    let mut kept = HashSet::new();
    out.retain(|p| kept.insert(p.entities.clone()));
    Ok(out)
}

/// Distinct entities on the given paths.
pub fn visited_nodes(paths: &[ScoredPath]) -> usize {
    paths.iter().flat_map(|p| p.entities.iter()).collect::<BTreeSet<_>>().len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerReason {
    Linked,
    Unlinked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub verdict: Label,
    /// Decoded paths containing the effect, best first.
    pub evidence: Vec<ScoredPath>,
    pub reason: AnswerReason,
    /// Distinct entities on all decoded paths.
    pub visited: usize,
    pub expanded: usize,
}

impl Answer {
    fn unlinked() -> Self {
        Answer {
            verdict: Label::No,
            evidence: Vec::new(),
            reason: AnswerReason::Unlinked,
            visited: 0,
            expanded: 0,
        }
    }
}

/// Decoding mode for [`answer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

/// Yes iff a decoded path contains the effect at any position. Unlinkable
/// questions are answered no.
pub fn answer(
    policy: &impl PathPolicy,
    env: &Environment,
    table: &VectorTable,
    example: &QAExample,
    decoding: Decoding,
) -> Result<Answer> {
    let question = match env.question(table, example) {
        Ok(q) => Arc::new(q),
        Err(Error::Contract(_)) => return Ok(Answer::unlinked()),
        Err(e) => return Err(e),
    };
    let effect = question.effect;
    let (paths, expanded) = match decoding {
        Decoding::Greedy => {
            let p = greedy_path(policy, env, question)?;
            let n = visited_nodes(std::slice::from_ref(&p));
            (vec![p], n)
        }
        Decoding::Beam(width) => {
            let r = beam_search(policy, env, question, width)?;
            (r.paths, r.expanded_nodes)
        }
    };
    let visited = visited_nodes(&paths);
    let evidence: Vec<ScoredPath> = paths.into_iter().filter(|p| p.contains(effect)).collect();
    Ok(Answer {
        verdict: Label::from(!evidence.is_empty()),
        evidence,
        reason: AnswerReason::Linked,
        visited,
        expanded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub entities: Vec<String>,
    pub probability: f64,
    /// One per MOVE hop; STAY hops have no provenance.
    pub sentences: Vec<String>,
    pub source_urls: Vec<String>,
    pub inverse: Vec<bool>,
}

/// One line of answer output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub question: String,
    pub verdict: Label,
    pub reason: AnswerReason,
    pub paths: Vec<PathRecord>,
}

impl AnswerRecord {
    pub fn new(graph: &CausalGraph, example: &QAExample, answer: &Answer) -> Self {
        let paths = answer
            .evidence
            .iter()
            .map(|p| {
                let hops: Vec<&CausalEdge> = p.edges.iter().flatten().collect();
                PathRecord {
                    entities: p.entities.iter().map(|&e| graph.surface(e).to_string()).collect(),
                    probability: p.probability(),
                    sentences: hops.iter().map(|e| graph.provenance(e).sentence.clone()).collect(),
                    source_urls: hops.iter().map(|e| graph.provenance(e).source_url.clone()).collect(),
                    inverse: hops.iter().map(|e| e.is_inverse).collect(),
                }
            })
            .collect();
        AnswerRecord {
            id: example.id.clone(),
            question: example.question.clone(),
            verdict: answer.verdict,
            reason: answer.reason,
            paths,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::GraphEmbeddings;
    use crate::synthetic::{pneumonia_graph, pneumonia_question, random_graph};
    use crate::{AgentConfig, AgentParams};

    struct Fixture {
        graph: CausalGraph,
        table: VectorTable,
        emb: GraphEmbeddings,
    }

    impl Fixture {
        fn new(graph: CausalGraph) -> Self {
            let mut words: Vec<String> = graph.entities().map(|e| graph.surface(e).to_string()).collect();
            words.push("does cause can lead to causes".into());
            let table = VectorTable::random(words.iter().map(String::as_str), 4, 2).unwrap();
            let emb = GraphEmbeddings::build(&graph, &table);
            Fixture { graph, table, emb }
        }

        fn question(&self, env: &Environment, ex: &QAExample) -> Arc<Question> {
            Arc::new(env.question(&self.table, ex).unwrap())
        }

        fn names(&self, p: &ScoredPath) -> Vec<&str> {
            p.entities.iter().map(|&e| self.graph.surface(e)).collect()
        }
    }

    #[test]
    fn pneumonia_greedy_and_beam() {
        let fx = Fixture::new(pneumonia_graph(false));
        let env = Environment::new(&fx.graph, &fx.emb, 3);
        let policy = FixedPolicy::pneumonia(&fx.graph).unwrap();
        let q = fx.question(&env, &pneumonia_question());

        let greedy = greedy_path(&policy, &env, q.clone()).unwrap();
        assert_eq!(fx.names(&greedy), ["pneumonia", "sepsis", "kidney failure", "anemia"]);

        let beam = beam_search(&policy, &env, q.clone(), 2).unwrap();
        assert_eq!(beam.paths.len(), 2);
        assert_eq!(fx.names(&beam.paths[0]), ["pneumonia", "sepsis", "kidney failure", "anemia"]);
        assert_eq!(fx.names(&beam.paths[1]), ["pneumonia", "ards", "death", "grief"]);
        assert!((beam.paths[0].probability() - 0.336).abs() < 1e-12);
        assert!((beam.paths[1].probability() - 0.25).abs() < 1e-12);

        let one = beam_search(&policy, &env, q, 1).unwrap();
        assert_eq!(one.paths, vec![greedy]);
    }

    #[test]
    fn pneumonia_answer_has_sepsis_evidence() {
        let fx = Fixture::new(pneumonia_graph(true));
        let env = Environment::new(&fx.graph, &fx.emb, 3);
        let policy = FixedPolicy::pneumonia(&fx.graph).unwrap();
        let a = answer(&policy, &env, &fx.table, &pneumonia_question(), Decoding::Beam(2)).unwrap();
        assert_eq!((a.verdict, a.reason), (Label::Yes, AnswerReason::Linked));
        assert_eq!(fx.names(&a.evidence[0])[1], "sepsis");
        let record = AnswerRecord::new(&fx.graph, &pneumonia_question(), &a);
        assert_eq!(record.paths[0].sentences[0], "pneumonia can lead to sepsis.");
        assert_eq!(record.paths[0].source_urls.len(), 3);
    }

    #[test]
    fn unlinked_and_unreached_answers() {
        let fx = Fixture::new(pneumonia_graph(false));
        let env = Environment::new(&fx.graph, &fx.emb, 3);
        let policy = FixedPolicy::pneumonia(&fx.graph).unwrap();
        let ex = QAExample::new("u", "does smoking cause anemia", "smoking", "anemia", Label::Yes);
        let a = answer(&policy, &env, &fx.table, &ex, Decoding::Beam(5)).unwrap();
        assert_eq!((a.verdict, a.reason, a.visited), (Label::No, AnswerReason::Unlinked, 0));

        let ex = QAExample::new("n", "does grief cause pneumonia", "grief", "pneumonia", Label::No);
        let a = answer(&policy, &env, &fx.table, &ex, Decoding::Beam(5)).unwrap();
        assert_eq!((a.verdict, a.reason), (Label::No, AnswerReason::Linked));
        assert!(a.evidence.is_empty());
    }

    #[test]
    fn forced_path_in_single_action_states() {
        let fx = Fixture::new(pneumonia_graph(false));
        let env = Environment::new(&fx.graph, &fx.emb, 2);
        let config = AgentConfig { dim: 4, hidden: 6, ..AgentConfig::default() };
        let agent = AgentParams::init(&config, 3).unwrap();
        let ex = QAExample::new("g", "does grief cause grief", "grief", "grief", Label::Yes);
        let p = greedy_path(&agent, &env, fx.question(&env, &ex)).unwrap();
        assert_eq!(fx.names(&p), ["grief", "grief", "grief"]);
        assert_eq!(p.step_probs, vec![1.0, 1.0]);
    }

    #[test]
    fn visited_counts_union() {
        let p = |v: &[u32]| ScoredPath {
            entities: v.iter().map(|&i| EntityId(i)).collect(),
            log_prob: 0.0,
            step_probs: vec![],
            edges: vec![],
        };
        assert_eq!(visited_nodes(&[p(&[0, 1, 2, 3])]), 4);
        assert_eq!(visited_nodes(&[p(&[0, 1, 2, 3]), p(&[0, 1, 4, 4])]), 5);
        assert_eq!(visited_nodes(&[]), 0);
    }

    fn agent_for(dim: usize, seed: u64) -> AgentParams {
        let config = AgentConfig { dim, hidden: 6, ..AgentConfig::default() };
        AgentParams::init(&config, seed).unwrap()
    }

    #[test]
    fn agent_beam_matches_exhaustive_and_stored_probs() {
        for seed in 0..5 {
            let fx = Fixture::new(CausalGraph::from_records(&random_graph(8, 14, seed), true));
            let env = Environment::new(&fx.graph, &fx.emb, 3);
            let agent = agent_for(4, seed);
            let ex = QAExample::new("r", "does n0 cause n5", "n0", "n5", Label::Yes);
            let q = fx.question(&env, &ex);
            let all = exhaustive_paths(&agent, &env, q.clone()).unwrap();
            let beam = beam_search(&agent, &env, q.clone(), usize::MAX).unwrap();
            assert_eq!(beam.paths, all);
            for p in &all {
                let product: f64 = p.step_probs.iter().product();
                assert!((p.probability() - product).abs() < 1e-12);
            }
            for w in 1..6 {
                let top = beam_search(&agent, &env, q.clone(), w).unwrap().paths[0].log_prob;
                assert!(top <= all[0].log_prob);
            }
            let greedy = greedy_path(&agent, &env, q.clone()).unwrap();
            assert_eq!(beam_search(&agent, &env, q, 1).unwrap().paths[0], greedy);
        }
    }

    /// A wider beam can drop the prefix of the best path: here width 3 keeps
    /// `n0 n5 n2` over `n0 n1 n3`, which widths 2 and 4 retain.
    #[test]
    fn top_path_is_not_monotone_in_width() {
        let fx = Fixture::new(CausalGraph::from_records(&random_graph(8, 14, 2), true));
        let env = Environment::new(&fx.graph, &fx.emb, 3);
        let agent = agent_for(4, 2);
        let ex = QAExample::new("r", "does n0 cause n5", "n0", "n5", Label::Yes);
        let q = fx.question(&env, &ex);
        let top = |w| beam_search(&agent, &env, q.clone(), w).unwrap().paths[0].clone();
        assert_eq!(fx.names(&top(2)), ["n0", "n1", "n3", "n1"]);
        assert_eq!(fx.names(&top(3)), ["n0", "n1", "n7", "n1"]);
        assert!(top(3).log_prob < top(2).log_prob);
        assert_eq!(top(4), top(2));
    }

    #[test]
    fn zero_width_is_rejected() {
        let fx = Fixture::new(pneumonia_graph(false));
        let env = Environment::new(&fx.graph, &fx.emb, 2);
        let q = fx.question(&env, &pneumonia_question());
        assert!(beam_search(&FixedPolicy::default(), &env, q, 0).is_err());
    }
}
