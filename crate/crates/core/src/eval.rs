//! Confusion tables, metrics, agent-vs-BFS comparisons and sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::data::{Label, QAExample};
use crate::embed::{GraphEmbeddings, VectorTable};
use crate::env::{Environment, Question};
use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::infer::{answer, Decoding, PathPolicy};
use crate::train::{Phase, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        Confusion { tp, fn_, fp, tn }
    }

    pub fn record(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Yes, Label::Yes) => self.tp += 1,
            (Label::Yes, Label::No) => self.fn_ += 1,
            (Label::No, Label::Yes) => self.fp += 1,
            (Label::No, Label::No) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// Rates with zero denominators are reported as 0 and flag the row degenerate.
    pub fn metrics(&self, avg_nodes: f64) -> MetricsRow {
        let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
        let accuracy = ratio(self.tp + self.tn, self.total());
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        MetricsRow {
            accuracy: accuracy.unwrap_or(0.0),
            f1,
            recall: r,
            precision: p,
            avg_nodes,
            degenerate: accuracy.is_none() || precision.is_none() || recall.is_none(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub avg_nodes: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub verdict: Label,
    /// Nodes visited to answer this question.
    pub nodes: usize,
    /// Candidate entities scored, pruned ones included (agent only).
    pub expanded: usize,
}

/// Scores predictions against gold labels matched by id. Both sides must
/// carry exactly the same ids.
pub fn score(predictions: &[Prediction], gold: &[QAExample]) -> Result<(Confusion, MetricsRow)> {
    let mut labels: HashMap<&str, Label> = HashMap::with_capacity(gold.len());
    for ex in gold {
        if labels.insert(&ex.id, ex.label).is_some() {
            return Err(Error::contract(format!("duplicate gold id {:?}", ex.id)));
        }
    }
    if predictions.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    let mut confusion = Confusion::default();
    for p in predictions {
        let gold = labels
            .remove(p.id.as_str())
            .ok_or_else(|| Error::contract(format!("prediction id {:?} has no gold label", p.id)))?;
        confusion.record(gold, p.verdict);
    }
    let avg = if predictions.is_empty() {
        0.0
    } else {
        predictions.iter().map(|p| p.nodes as f64).sum::<f64>() / predictions.len() as f64
    };
    Ok((confusion, confusion.metrics(avg)))
}

/// Answers every question with the policy. Questions run in parallel; the
/// output order matches the input.
pub fn predict_agent(
    policy: &impl PathPolicy,
    env: &Environment,
    table: &VectorTable,
    questions: &[QAExample],
    decoding: Decoding,
) -> Result<Vec<Prediction>> {
    questions
        .par_iter()
        .map(|ex| {
            let a = answer(policy, env, table, ex, decoding)?;
            Ok(Prediction {
                id: ex.id.clone(),
                verdict: a.verdict,
                nodes: a.visited,
                expanded: a.expanded,
            })
        })
        .collect()
}

pub fn predict_bfs(graph: &CausalGraph, questions: &[QAExample], hops: usize) -> Result<Vec<Prediction>> {
    questions
        .par_iter()
        .map(|ex| {
            let a = graph.bfs_answer(ex, hops)?;
            Ok(Prediction {
                id: ex.id.clone(),
                verdict: a.verdict,
                nodes: a.visited,
                expanded: a.visited,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub hops: usize,
    pub seed: Option<u64>,
    pub confusion: Confusion,
    pub metrics: MetricsRow,
    pub avg_expanded: f64,
    /// Agent |Nodes| over BFS |Nodes| at the same hop count.
    pub pruning_ratio: Option<f64>,
}

fn row(method: &str, hops: usize, seed: Option<u64>, preds: &[Prediction], gold: &[QAExample]) -> Result<EvalRow> {
    let (confusion, metrics) = score(preds, gold)?;
    let avg_expanded = if preds.is_empty() {
        0.0
    } else {
        preds.iter().map(|p| p.expanded as f64).sum::<f64>() / preds.len() as f64
    };
    Ok(EvalRow {
        method: method.to_string(),
        hops,
        seed,
        confusion,
        metrics,
        avg_expanded,
        pruning_ratio: None,
    })
}

pub fn bfs_row(graph: &CausalGraph, test: &[QAExample], hops: usize) -> Result<EvalRow> {
    row("bfs", hops, None, &predict_bfs(graph, test, hops)?, test)
}

/// One agent row per `(hops, policy)` pair, each followed by the BFS row for
/// the same hop count.
pub fn run_eval<P: PathPolicy>(
    graph: &CausalGraph,
    embeddings: &GraphEmbeddings,
    table: &VectorTable,
    agents: &[(usize, &P)],
    test: &[QAExample],
    decoding: Decoding,
    seed: Option<u64>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &(hops, policy) in agents {
        let env = Environment::new(graph, embeddings, hops);
        let name = match decoding {
            Decoding::Greedy => "agent-greedy",
            Decoding::Beam(_) => "agent",
        };
        let mut agent = row(name, hops, seed, &predict_agent(policy, &env, table, test, decoding)?, test)?;
        let bfs = bfs_row(graph, test, hops)?;
        if bfs.metrics.avg_nodes > 0.0 {
            agent.pruning_ratio = Some(agent.metrics.avg_nodes / bfs.metrics.avg_nodes);
        }
        rows.push(agent);
        rows.push(bfs);
    }
    Ok(rows)
}

/// Mean over the rows of one method and hop count; confusion counts are summed.
pub fn mean_row(rows: &[EvalRow]) -> Option<EvalRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut confusion = Confusion::default();
    for r in rows {
        confusion.tp += r.confusion.tp;
        confusion.fn_ += r.confusion.fn_;
        confusion.fp += r.confusion.fp;
        confusion.tn += r.confusion.tn;
    }
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.pruning_ratio).collect();
    Some(EvalRow {
        method: format!("{}-mean", first.method),
        hops: first.hops,
        seed: None,
        confusion,
        metrics: MetricsRow {
            accuracy: avg(&|r| r.metrics.accuracy),
            f1: avg(&|r| r.metrics.f1),
            recall: avg(&|r| r.metrics.recall),
            precision: avg(&|r| r.metrics.precision),
            avg_nodes: avg(&|r| r.metrics.avg_nodes),
            degenerate: rows.iter().any(|r| r.metrics.degenerate),
        },
        avg_expanded: avg(&|r| r.avg_expanded),
        pruning_ratio: (ratios.len() == rows.len()).then(|| ratios.iter().sum::<f64>() / n),
    })
}

/// Rows for each beam width on a fixed horizon.
pub fn sweep_beam_width(
    policy: &impl PathPolicy,
    env: &Environment,
    table: &VectorTable,
    test: &[QAExample],
    widths: &[usize],
) -> Result<Vec<EvalRow>> {
    widths
        .iter()
        .map(|&w| {
            let preds = predict_agent(policy, env, table, test, Decoding::Beam(w))?;
            row(&format!("agent-beam{w}"), env.horizon, None, &preds, test)
        })
        .collect()
}

pub const TABLE_HEADER: &str =
    "method\thops\tseed\ttp\tfn\tfp\ttn\taccuracy\tf1\trecall\tprecision\tnodes\texpanded\tpruning_ratio\tdegenerate";

/// Tab-separated table in the column order accuracy, F1, recall, precision, |Nodes|.
pub fn format_table(rows: &[EvalRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}\t{:.2}\t{}\t{}",
            r.method,
            r.hops,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.confusion.tp,
            r.confusion.fn_,
            r.confusion.fp,
            r.confusion.tn,
            m.accuracy,
            m.f1,
            m.recall,
            m.precision,
            m.avg_nodes,
            r.avg_expanded,
            r.pruning_ratio.map(|p| format!("{p:.4}")).unwrap_or_default(),
            m.degenerate,
        );
    }
    out
}

/// One logged RL step of one supervised-steps setting and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub supervised_steps: usize,
    pub seed: u64,
    pub step: usize,
    pub entropy: f64,
    pub unique_paths: usize,
    pub mean_reward: f64,
    /// Accuracy on the evaluation set, at steps where it was measured.
    pub accuracy: Option<f64>,
}

pub struct SweepSetup<'a> {
    pub env: &'a Environment<'a>,
    pub table: &'a VectorTable,
    pub questions: &'a [Arc<Question>],
    /// Scored every `eval_every` RL steps; empty or `eval_every == 0` disables it.
    pub eval_set: &'a [QAExample],
    pub eval_every: usize,
}

/// Trains one agent per (supervised steps, seed) and records the RL-phase curves.
pub fn sweep_supervised(setup: &SweepSetup, base: &AgentConfig, settings: &[usize], seeds: &[u64]) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for &supervised_steps in settings {
        for &seed in seeds {
            let config = AgentConfig {
                supervised_steps,
                seed,
                ..base.clone()
            };
            let mut trainer = Trainer::new(setup.env, setup.questions.to_vec(), &config)?;
            trainer.run(|m, agent| {
                if m.phase != Phase::Rl {
                    return Ok(());
                }
                let accuracy = if setup.eval_every > 0 && !setup.eval_set.is_empty() && m.step % setup.eval_every == 0 {
                    let preds = predict_agent(agent, setup.env, setup.table, setup.eval_set, Decoding::Beam(config.beam_width))?;
                    Some(score(&preds, setup.eval_set)?.1.accuracy)
                } else {
                    None
                };
                points.push(CurvePoint {
                    supervised_steps,
                    seed,
                    step: m.step,
                    entropy: m.entropy,
                    unique_paths: m.unique_paths,
                    mean_reward: m.mean_reward,
                    accuracy,
                });
                Ok(())
            })?;
        }
    }
    Ok(points)
}

pub const CURVE_HEADER: &str = "supervised_steps\tseed\tstep\tentropy\tunique_paths\tmean_reward\taccuracy";

pub fn format_curves(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}\t{:.4}\t{}",
            p.supervised_steps,
            p.seed,
            p.step,
            p.entropy,
            p.unique_paths,
            p.mean_reward,
            p.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::FixedPolicy;
    use crate::synthetic::{pneumonia_graph, pneumonia_question};
    use proptest::prelude::*;

    fn preds(labels: &[(&str, Label)]) -> Vec<Prediction> {
        labels
            .iter()
            .map(|(id, l)| Prediction {
                id: id.to_string(),
                verdict: *l,
                nodes: 1,
                expanded: 1,
            })
            .collect()
    }

    fn gold(labels: &[(&str, Label)]) -> Vec<QAExample> {
        labels.iter().map(|(id, l)| QAExample::new(id, "q", "a", "b", *l)).collect()
    }

    #[test]
    fn known_confusion_row() {
        let m = Confusion::new(50, 37, 3, 83).metrics(0.0);
        assert!((m.accuracy - 0.769).abs() < 5e-4);
        assert!((m.f1 - 0.714).abs() < 5e-4);
        assert!((m.recall - 0.575).abs() < 5e-4);
        assert!((m.precision - 0.943).abs() < 5e-4);
        assert!(!m.degenerate);
    }

    #[test]
    fn perfect_and_base_rate() {
        let ids = [("a", Label::Yes), ("b", Label::No), ("c", Label::Yes), ("d", Label::No)];
        let (_, m) = score(&preds(&ids), &gold(&ids)).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let all_yes: Vec<_> = ids.iter().map(|(i, _)| (*i, Label::Yes)).collect();
        let (c, m) = score(&preds(&all_yes), &gold(&ids)).unwrap();
        assert_eq!(c, Confusion::new(2, 0, 2, 0));
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn degenerate_rows_are_flagged() {
        let ids = [("a", Label::No)];
        let (_, m) = score(&preds(&ids), &gold(&ids)).unwrap();
        assert!(m.degenerate);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
        let (_, m) = score(&[], &[]).unwrap();
        assert!(m.degenerate);
    }

    #[test]
    fn mismatched_ids_are_errors() {
        let g = gold(&[("a", Label::Yes), ("b", Label::No)]);
        assert!(score(&preds(&[("a", Label::Yes)]), &g).is_err());
        assert!(score(&preds(&[("a", Label::Yes), ("c", Label::No)]), &g).is_err());
        assert!(score(&preds(&[("a", Label::Yes), ("a", Label::No)]), &g).is_err());
    }

    proptest! {
        #[test]
        fn score_is_order_free_and_f1_consistent(labels in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40), rot in 0usize..40) {
            let ids: Vec<String> = (0..labels.len()).map(|i| format!("q{i}")).collect();
            let g: Vec<QAExample> = ids.iter().zip(&labels).map(|(id, (y, _))| QAExample::new(id, "q", "a", "b", Label::from(*y))).collect();
            let mut p: Vec<Prediction> = ids.iter().zip(&labels).map(|(id, (_, v))| Prediction { id: id.clone(), verdict: Label::from(*v), nodes: 2, expanded: 2 }).collect();
            let (c1, m1) = score(&p, &g).unwrap();
            let k = rot % p.len();
            p.rotate_left(k);
            let (c2, m2) = score(&p, &g).unwrap();
            prop_assert_eq!(c1, c2);
            prop_assert_eq!(m1, m2);
            if m1.precision + m1.recall > 0.0 {
                let f1 = 2.0 * m1.precision * m1.recall / (m1.precision + m1.recall);
                prop_assert!((m1.f1 - f1).abs() < 1e-12);
            }
            prop_assert_eq!(c1.total(), labels.len());
        }
    }

    #[test]
    fn fixture_eval_rows_and_pruning_ratio() {
        let g = pneumonia_graph(true);
        let words: Vec<String> = g.entities().map(|e| g.surface(e).to_string()).collect();
        let table = VectorTable::random(words.iter().map(String::as_str), 4, 1).unwrap();
        let emb = GraphEmbeddings::build(&g, &table);
        let policy = FixedPolicy::pneumonia(&g).unwrap();
        let test = vec![
            pneumonia_question(),
            QAExample::new("n", "does grief cause bacteria", "grief", "bacteria", Label::No),
            QAExample::new("u", "does smoking cause grief", "smoking", "grief", Label::No),
        ];
        let rows = run_eval(&g, &emb, &table, &[(3, &policy)], &test, Decoding::Beam(2), Some(0)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].confusion.tp, 1);
        let ratio = rows[0].pruning_ratio.unwrap();
        assert!((ratio - rows[0].metrics.avg_nodes / rows[1].metrics.avg_nodes).abs() < 1e-12);
        // BFS is deterministic
        assert_eq!(bfs_row(&g, &test, 3).unwrap(), rows[1]);

        let greedy = run_eval(&g, &emb, &table, &[(3, &policy)], &test, Decoding::Greedy, None).unwrap();
        let width1 = sweep_beam_width(&policy, &Environment::new(&g, &emb, 3), &table, &test, &[1]).unwrap();
        assert_eq!(greedy[0].confusion, width1[0].confusion);

        let text = format_table(&rows);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("method\thops"));
        let mean = mean_row(&rows[..1]).unwrap();
        assert_eq!(mean.metrics, rows[0].metrics);
    }

    #[test]
    fn supervised_sweep_curves() {
        let g = pneumonia_graph(true);
        let mut words: Vec<String> = g.entities().map(|e| g.surface(e).to_string()).collect();
        words.push("does cause".into());
        let table = VectorTable::random(words.iter().map(String::as_str), 4, 1).unwrap();
        let emb = GraphEmbeddings::build(&g, &table);
        let env = Environment::new(&g, &emb, 3);
        let q = Arc::new(env.question(&table, &pneumonia_question()).unwrap());
        let config = AgentConfig {
            dim: 4,
            hidden: 8,
            horizon: 3,
            steps: 6,
            batch_size: 4,
            supervised_batch: 2,
            beam_width: 3,
            learning_rate: 1e-2,
            ..AgentConfig::default()
        };
        let setup = SweepSetup {
            env: &env,
            table: &table,
            questions: &[q],
            eval_set: &[pneumonia_question()],
            eval_every: 3,
        };
        let points = sweep_supervised(&setup, &config, &[0, 5], &[1, 2]).unwrap();
        assert_eq!(points.len(), 2 * 2 * 6);
        // T steps averaged over B(T-1)
        let bound = (g.max_out_degree() as f64 + 1.0).ln() * 3.0 / 2.0;
        assert!(points.iter().all(|p| p.entropy.is_finite() && p.entropy <= bound));
        assert!(points.iter().all(|p| p.accuracy.is_some() == (p.step % 3 == 0)));
        assert_eq!(format_curves(&points).lines().count(), points.len() + 1);
    }
}
