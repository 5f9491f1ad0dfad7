//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use causalqa::embed::GraphEmbeddings;
use causalqa::synthetic::{planted_dag, PlantedConfig};
use causalqa::{AgentConfig, AgentParams, CausalGraph, Environment, QAExample, Question, VectorTable};

/// A planted DAG with random vectors and a small untrained agent.
pub struct Fixture {
    pub graph: CausalGraph,
    pub table: VectorTable,
    pub embeddings: GraphEmbeddings,
    pub questions: Vec<QAExample>,
    pub config: AgentConfig,
    pub agent: AgentParams,
}

impl Fixture {
    pub fn new(nodes: usize, out_degree: usize, dim: usize, hidden: usize) -> Fixture {
        let task = planted_dag(&PlantedConfig {
            nodes,
            out_degree,
            questions: 32,
            hops: 3,
            ..PlantedConfig::default()
        });
        let graph = CausalGraph::from_records(&task.records, true);
        let mut vocab: Vec<String> = graph.entities().map(|e| graph.surface(e).to_string()).collect();
        vocab.extend(task.questions.iter().map(|q| q.question.clone()));
        let table = VectorTable::random(vocab.iter().map(String::as_str), dim, 0).expect("dim > 0");
        let embeddings = GraphEmbeddings::build(&graph, &table);
        let config = AgentConfig {
            dim,
            hidden,
            horizon: 3,
            batch_size: 16,
            supervised_batch: 16,
            ..AgentConfig::default()
        };
        let agent = AgentParams::init(&config, 0).expect("valid config");
        Fixture {
            graph,
            table,
            embeddings,
            questions: task.questions,
            config,
            agent,
        }
    }

    pub fn env(&self) -> Environment<'_> {
        Environment::new(&self.graph, &self.embeddings, self.config.horizon)
    }

    pub fn linked_questions(&self, env: &Environment) -> Vec<Arc<Question>> {
        self.questions
            .iter()
            .map(|q| Arc::new(env.question(&self.table, q).expect("planted questions link")))
            .collect()
    }
}
