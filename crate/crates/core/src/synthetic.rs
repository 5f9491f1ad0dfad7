//! Small fixture graphs and planted random graphs for tests, benches and sweeps.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Label, QAExample, Split};
use crate::graph::{CausalGraph, GraphRecord};

const PNEUMONIA_URL: &str = "fixture:pneumonia";

/// Edges of the pneumonia neighborhood excerpt, in file order.
pub const PNEUMONIA_EDGES: &[(&str, &str)] = &[
    ("bacteria", "myocarditis"),
    ("bacteria", "organ failure"),
    ("pneumonia", "sepsis"),
    ("pneumonia", "ards"),
    ("pneumonia", "hospitalization"),
    ("bacteria", "pneumonia"),
    ("kidney failure", "anemia"),
    ("kidney failure", "bone pain"),
    ("anemia", "fatigue"),
    ("hospitalization", "infections"),
    ("sepsis", "hypoglycemia"),
    ("sepsis", "organ failure"),
    ("myocarditis", "pericarditis"),
    ("myocarditis", "arrhythmia"),
    ("pericarditis", "pain"),
    ("sepsis", "kidney failure"),
    ("ards", "death"),
    ("death", "grief"),
];

/// Policy probabilities annotated on the excerpt's edges.
pub const PNEUMONIA_PROBABILITIES: &[(&str, &str, f64)] = &[
    ("pneumonia", "sepsis", 0.6),
    ("pneumonia", "ards", 0.25),
    ("pneumonia", "hospitalization", 0.15),
    ("sepsis", "kidney failure", 0.7),
    ("sepsis", "organ failure", 0.2),
    ("sepsis", "hypoglycemia", 0.1),
    ("kidney failure", "anemia", 0.8),
    ("kidney failure", "bone pain", 0.2),
    ("ards", "death", 1.0),
    ("death", "grief", 1.0),
];

pub fn pneumonia_records() -> Vec<GraphRecord> {
    PNEUMONIA_EDGES
        .iter()
        .map(|(c, e)| GraphRecord::new(c, e, &format!("{c} can lead to {e}."), PNEUMONIA_URL))
        .collect()
}

pub fn pneumonia_graph(add_inverse: bool) -> CausalGraph {
    CausalGraph::from_records(&pneumonia_records(), add_inverse)
}

pub fn pneumonia_question() -> QAExample {
    QAExample::new("pneumonia", "Does pneumonia cause anemia?", "pneumonia", "anemia", Label::Yes)
}

#[derive(Clone, Debug)]
pub struct PlantedConfig {
    pub nodes: usize,
    /// Random forward edges per node, on top of the planted paths.
    pub out_degree: usize,
    pub questions: usize,
    pub hops: usize,
    /// Negative questions: pairs with no forward path of any length.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            nodes: 200,
            out_degree: 3,
            questions: 50,
            hops: 3,
            negatives: 0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub records: Vec<GraphRecord>,
    pub questions: Vec<QAExample>,
}

pub fn node_name(i: usize) -> String {
    format!("n{i}")
}

/// A random DAG over `n0..n{nodes-1}` (edges only go from lower to higher
/// index) with `questions` planted paths of exactly `hops` edges.
pub fn planted_dag(config: &PlantedConfig) -> PlantedTask {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.nodes;
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();

    for src in 0..n.saturating_sub(1) {
        for _ in 0..config.out_degree {
            let dst = rng.gen_range(src + 1..n);
            edges.insert((src, dst));
        }
    }

    let mut questions = Vec::new();
    let mut used = HashSet::new();
    while questions.len() < config.questions {
        let mut chain: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(&mut rng, config.hops + 1).copied().collect();
        chain.sort_unstable();
        let (cause, effect) = (chain[0], chain[config.hops]);
        if !used.insert((cause, effect)) {
            continue;
        }
        for w in chain.windows(2) {
            edges.insert((w[0], w[1]));
        }
        let (c, e) = (node_name(cause), node_name(effect));
        questions.push(
            QAExample::new(&format!("p{}", questions.len()), &format!("does {c} cause {e}?"), &c, &e, Label::Yes)
                .with_split(Split::Train),
        );
    }

    let records: Vec<GraphRecord> = edges
        .iter()
        .map(|&(s, d)| {
            let (c, e) = (node_name(s), node_name(d));
            GraphRecord::new(&c, &e, &format!("{c} causes {e}"), "synthetic")
        })
        .collect();

    // Effects earlier in index order are never reachable along forward edges.
    let mut negatives = 0;
    while negatives < config.negatives {
        let a = rng.gen_range(1..n);
        let b = rng.gen_range(0..a);
        let (c, e) = (node_name(a), node_name(b));
        questions.push(
            QAExample::new(&format!("q{negatives}"), &format!("does {c} cause {e}?"), &c, &e, Label::No)
                .with_split(Split::Test),
        );
        negatives += 1;
    }

    PlantedTask { records, questions }
}

/// Random directed graph (cycles allowed) with at most `nodes` entities and
/// `edges` records, duplicates included.
pub fn random_graph(nodes: usize, edges: usize, seed: u64) -> Vec<GraphRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..nodes {
        let j = (i + 1) % nodes;
        if i == 0 || rng.gen_bool(0.5) {
            records.push(GraphRecord::new(&node_name(i), &node_name(j), &format!("r{i}"), ""));
        }
    }
    while records.len() < edges {
        let a = rng.gen_range(0..nodes);
        let b = rng.gen_range(0..nodes);
        if a != b {
            records.push(GraphRecord::new(
                &node_name(a),
                &node_name(b),
                &format!("{} causes {}", node_name(a), node_name(b)),
                "",
            ));
        }
    }
    records
}
