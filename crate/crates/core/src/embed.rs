//! Word-vector tables and mean-pooled phrase embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;

/// Dense real vector: length d for phrases, 2d for actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn concat(a: &[f64], b: &[f64]) -> Self {
        let mut v = Vec::with_capacity(a.len() + b.len());
        v.extend_from_slice(a);
        v.extend_from_slice(b);
        Embedding(v)
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct VectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(VectorTable {
            dim,
            vectors: HashMap::new(),
        })
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::contract(format!(
                "vector for {token:?} has length {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }

    /// Deterministic pseudo-random vectors for every token in `vocabulary`.
    /// A token's vector depends only on the token and `seed`.
    pub fn random<'a>(vocabulary: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Result<Self> {
        let mut table = VectorTable::new(dim)?;
        let tokens: BTreeSet<String> = vocabulary.into_iter().flat_map(tokenize).collect();
        for token in tokens {
            let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(token.as_bytes()).finalize();
            let mut key = [0u8; 32];
            key.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(key);
            let v = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            table.vectors.insert(token, v);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

/// Reads a whitespace-separated `token v1 ... vd` text file. The first line
/// fixes the dimension unless `expected_dim` is given.
pub fn load_word_vectors(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<VectorTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<VectorTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, i + 1, "non-finite component"));
        }
        let table = match &mut table {
            Some(t) => t,
            None => {
                let dim = expected_dim.unwrap_or(values.len());
                table.insert(VectorTable::new(dim).map_err(|_| Error::parse(path, i + 1, "empty vector"))?)
            }
        };
        if values.len() != table.dim {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {} components, found {}", table.dim, values.len()),
            ));
        }
        table.vectors.insert(token.to_string(), values);
    }
    table.ok_or_else(|| Error::parse(path, 0, "no vectors"))
}

/// Lowercased whitespace tokens with surrounding punctuation removed.
pub fn tokenize(phrase: &str) -> impl Iterator<Item = String> + '_ {
    phrase
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Mean of the in-vocabulary token vectors; the zero vector when none is known.
pub fn embed_phrase(table: &VectorTable, phrase: &str) -> Embedding {
    let mut sum = vec![0.0; table.dim];
    let mut count = 0usize;
    for token in tokenize(phrase) {
        if let Some(v) = table.get(&token) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    Embedding(sum)
}

/// Entity and provenance-sentence embeddings for a whole graph.
#[derive(Clone, Debug)]
pub struct GraphEmbeddings {
    pub dim: usize,
    pub entities: Vec<Embedding>,
    pub sentences: Vec<Embedding>,
}

impl GraphEmbeddings {
    pub fn build(graph: &CausalGraph, table: &VectorTable) -> Self {
        let entities = graph.entities().map(|e| embed_phrase(table, graph.surface(e))).collect();
        let sentences = (0..graph.provenance_count() as u32)
            .map(|i| embed_phrase(table, &graph.provenance_by_id(crate::graph::ProvenanceId(i)).sentence))
            .collect();
        GraphEmbeddings {
            dim: table.dim(),
            entities,
            sentences,
        }
    }
}
