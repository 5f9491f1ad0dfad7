//! The causality graph: entities are normalized noun phrases, every edge
//! asserts "cause" and carries the sentence it was extracted from.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Label, QAExample};
use crate::error::{Error, Result};

/// Dense entity index, contiguous from zero in order of first appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Index into the graph's provenance table. Inverse edges share the id of
/// the forward edge they mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProvenanceId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub sentence: String,
    pub source_url: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CausalEdge {
    pub src: EntityId,
    pub dst: EntityId,
    pub provenance: ProvenanceId,
    pub is_inverse: bool,
}

/// One line of a graph file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub cause: String,
    pub effect: String,
    pub sentence: String,
    #[serde(default)]
    pub source_url: String,
}

impl GraphRecord {
    pub fn new(cause: &str, effect: &str, sentence: &str, source_url: &str) -> Self {
        GraphRecord {
            cause: cause.to_string(),
            effect: effect.to_string(),
            sentence: sentence.to_string(),
            source_url: source_url.to_string(),
        }
    }
}

/// Optional sidecar `<graph>.manifest.json`; every present field is checked on load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Option<usize>,
    pub entities: Option<usize>,
    pub relations: Option<usize>,
}

impl Manifest {
    pub fn sidecar_path(graph_path: &Path) -> PathBuf {
        let mut name = graph_path.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub records: usize,
    pub forward_edges: usize,
    pub inverse_edges: usize,
    pub duplicates: usize,
    pub self_loops: usize,
    /// Forward edges whose reverse is itself a forward edge; no inverse is added for them.
    pub reciprocal_pairs: usize,
}

#[derive(Clone, Debug)]
pub struct CausalGraph {
    surfaces: Vec<String>,
    surface_index: HashMap<String, EntityId>,
    adjacency: Vec<Vec<CausalEdge>>,
    provenance: Vec<Provenance>,
    has_inverse: bool,
    stats: LoadStats,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfsResult {
    pub path: Option<Vec<EntityId>>,
    /// Unique nodes dequeued.
    pub visited: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BfsAnswer {
    pub verdict: Label,
    pub visited: usize,
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize(phrase: &str) -> String {
    let mut out = String::with_capacity(phrase.len());
    for (i, token) in phrase.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.extend(token.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Reads a newline-delimited graph file. Blank lines are ignored.
pub fn load_graph(path: impl AsRef<Path>, add_inverse: bool) -> Result<CausalGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if normalize(&record.cause).is_empty() || normalize(&record.effect).is_empty() {
            return Err(Error::parse(path, i + 1, "empty cause or effect"));
        }
        if record.sentence.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "empty provenance sentence"));
        }
        records.push(record);
    }
    let graph = CausalGraph::from_records(&records, add_inverse);

    let manifest_path = Manifest::sidecar_path(path);
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, 1, e.to_string()))?;
        graph.check_manifest(&manifest).map_err(|message| Error::Manifest {
            path: path.to_path_buf(),
            message,
        })?;
    }
    Ok(graph)
}

impl CausalGraph {
    pub fn from_records(records: &[GraphRecord], add_inverse: bool) -> Self {
        let mut surfaces = Vec::new();
        let mut surface_index = HashMap::new();
        let mut intern = |phrase: &str| -> EntityId {
            let key = normalize(phrase);
            *surface_index.entry(key.clone()).or_insert_with(|| {
                surfaces.push(key);
                EntityId((surfaces.len() - 1) as u32)
            })
        };

        let mut stats = LoadStats {
            records: records.len(),
            ..LoadStats::default()
        };
        let mut provenance = Vec::new();
        let mut forward: HashMap<(EntityId, EntityId), ProvenanceId> = HashMap::new();
        let mut order = Vec::new();
        for record in records {
            let src = intern(&record.cause);
            let dst = intern(&record.effect);
            if forward.contains_key(&(src, dst)) {
                stats.duplicates += 1;
                continue;
            }
            if src == dst {
                stats.self_loops += 1;
            }
            let id = ProvenanceId(provenance.len() as u32);
            provenance.push(Provenance {
                sentence: record.sentence.clone(),
                source_url: record.source_url.clone(),
            });
            forward.insert((src, dst), id);
            order.push((src, dst, id));
        }
        drop(intern);

        let mut adjacency = vec![Vec::new(); surfaces.len()];
        for &(src, dst, id) in &order {
            adjacency[src.index()].push(CausalEdge {
                src,
                dst,
                provenance: id,
                is_inverse: false,
            });
        }
        stats.forward_edges = order.len();
        if add_inverse {
            for &(src, dst, id) in &order {
                if src == dst {
                    continue;
                }
                if forward.contains_key(&(dst, src)) {
                    stats.reciprocal_pairs += 1;
                    continue;
                }
                adjacency[dst.index()].push(CausalEdge {
                    src: dst,
                    dst: src,
                    provenance: id,
                    is_inverse: true,
                });
                stats.inverse_edges += 1;
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|e| (e.dst, e.is_inverse));
        }

        CausalGraph {
            surfaces,
            surface_index,
            adjacency,
            provenance,
            has_inverse: add_inverse,
            stats,
        }
    }

    /// The same entities with every inverse edge removed.
    pub fn forward_only(&self) -> CausalGraph {
        let mut graph = self.clone();
        for list in &mut graph.adjacency {
            list.retain(|e| !e.is_inverse);
        }
        graph.has_inverse = false;
        graph.stats.inverse_edges = 0;
        graph
    }

    fn check_manifest(&self, manifest: &Manifest) -> std::result::Result<(), String> {
        let checks = [
            ("records", manifest.records, self.stats.records),
            ("entities", manifest.entities, self.entity_count()),
            ("relations", manifest.relations, self.stats.forward_edges),
        ];
        for (name, expected, actual) in checks {
            if let Some(expected) = expected {
                if expected != actual {
                    return Err(format!("{name}: manifest says {expected}, loaded {actual}"));
                }
            }
        }
        Ok(())
    }

    pub fn entity_count(&self) -> usize {
        self.surfaces.len()
    }

    /// Total edges including inverse ones.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> &LoadStats {
        &self.stats
    }

    pub fn has_inverse_edges(&self) -> bool {
        self.has_inverse
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.surfaces.len() as u32).map(EntityId)
    }

    pub fn surface(&self, e: EntityId) -> &str {
        &self.surfaces[e.index()]
    }

    pub fn contains(&self, e: EntityId) -> bool {
        e.index() < self.surfaces.len()
    }

    pub fn provenance(&self, edge: &CausalEdge) -> &Provenance {
        &self.provenance[edge.provenance.0 as usize]
    }

    pub fn provenance_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn provenance_by_id(&self, id: ProvenanceId) -> &Provenance {
        &self.provenance[id.0 as usize]
    }

    /// Exact match after [`normalize`].
    pub fn link(&self, phrase: &str) -> Option<EntityId> {
        self.surface_index.get(&normalize(phrase)).copied()
    }

    pub fn neighbors(&self, e: EntityId) -> Result<&[CausalEdge]> {
        self.adjacency
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("entity {e} out of range")))
    }

    pub fn edge(&self, src: EntityId, dst: EntityId) -> Option<&CausalEdge> {
        let list = self.adjacency.get(src.index())?;
        list.binary_search_by_key(&dst, |e| e.dst).ok().map(|i| &list[i])
    }

    pub fn edges(&self) -> impl Iterator<Item = &CausalEdge> + '_ {
        self.adjacency.iter().flatten()
    }

    pub fn max_out_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Shortest path of at most `max_hops` edges. Adjacency lists are sorted
    /// by destination id, so the first path found is also the
    /// lexicographically smallest among the shortest ones.
    pub fn bfs_shortest_path(&self, src: EntityId, dst: EntityId, max_hops: usize) -> Result<BfsResult> {
        for e in [src, dst] {
            if !self.contains(e) {
                return Err(Error::contract(format!("entity {e} out of range")));
            }
        }
        if max_hops == 0 {
            return Err(Error::contract("max_hops must be at least 1"));
        }

        let n = self.entity_count();
        let mut parent: Vec<Option<EntityId>> = vec![None; n];
        let mut depth: Vec<u32> = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        depth[src.index()] = 0;
        queue.push_back(src);
        let mut visited = 0;

        while let Some(node) = queue.pop_front() {
            visited += 1;
            if node == dst {
                let mut path = vec![dst];
                let mut cur = dst;
                while let Some(p) = parent[cur.index()] {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Ok(BfsResult {
                    path: Some(path),
                    visited,
                });
            }
            let d = depth[node.index()];
            if d as usize >= max_hops {
                continue;
            }
            for edge in &self.adjacency[node.index()] {
                let next = edge.dst.index();
                if depth[next] == u32::MAX {
                    depth[next] = d + 1;
                    parent[next] = Some(node);
                    queue.push_back(edge.dst);
                }
            }
        }
        Ok(BfsResult { path: None, visited })
    }

    /// BFS baseline answer: "no" with zero visits when either phrase fails to link.
    pub fn bfs_answer(&self, question: &QAExample, max_hops: usize) -> Result<BfsAnswer> {
        let (Some(cause), Some(effect)) = (self.link(&question.cause), self.link(&question.effect)) else {
            return Ok(BfsAnswer {
                verdict: Label::No,
                visited: 0,
            });
        };
        let result = self.bfs_shortest_path(cause, effect, max_hops)?;
        Ok(BfsAnswer {
            verdict: if result.path.is_some() { Label::Yes } else { Label::No },
            visited: result.visited,
        })
    }

    /// SHA-256 over the entity count and surfaces, truncated to 64 bits.
    /// Checkpoints record it to detect a mismatched graph.
    pub fn entity_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.surfaces.len() as u64).to_le_bytes());
        for s in &self.surfaces {
            hasher.update(s.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}
