//! Undirected weighted graphs used as the transport geometry.
//!
//! A [`WeightedGraph`] stores each undirected edge once in canonical
//! orientation (`i < j`, sorted), plus a CSR adjacency with ascending
//! neighbor order. Edge-parallel kernels iterate the canonical list;
//! node-local queries go through the CSR rows.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node index in `[0, N)`.
pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("node index {index} out of range for graph with {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("edge ({i}, {j}) has non-positive or non-finite weight {w}")]
    NonPositiveWeight { i: usize, j: usize, w: f64 },
    #[error("edge ({i}, {j}) listed with conflicting weights {first} and {second}")]
    ConflictingDuplicateEdge {
        i: usize,
        j: usize,
        first: f64,
        second: f64,
    },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("source set is empty")]
    EmptySourceSet,
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph json: {0}")]
    Json(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Canonical undirected edge, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: NodeId,
    pub j: NodeId,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    offsets: Vec<usize>,
    adj: Vec<NodeId>,
    adj_w: Vec<f64>,
}

/// On-disk JSON shape: `{"num_nodes": N, "edges": [[i, j, w], ...]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphJson {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    /// Builds a symmetric, deduplicated graph from `(i, j, w)` triples.
    ///
    /// Either orientation may be listed; a pair listed twice must carry the
    /// same weight both times.
    pub fn build(num_nodes: usize, triples: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::Empty);
        }
        let mut canon: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, w) in triples {
            for index in [i, j] {
                if index >= num_nodes {
                    return Err(GraphError::IndexOutOfRange { index, num_nodes });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(GraphError::NonPositiveWeight { i, j, w });
            }
            let key = (i.min(j), i.max(j));
            match canon.get(&key) {
                Some(&prev) if prev != w => {
                    return Err(GraphError::ConflictingDuplicateEdge {
                        i: key.0,
                        j: key.1,
                        first: prev,
                        second: w,
                    })
                }
                Some(_) => {}
                None => {
                    canon.insert(key, w);
                }
            }
        }
        let edges: Vec<Edge> = canon.into_iter().map(|((i, j), w)| Edge { i, j, w }).collect();
        Ok(Self::from_canonical(num_nodes, edges))
    }

    /// Graph with no edges.
    pub fn isolated(num_nodes: usize) -> Result<Self, GraphError> {
        Self::build(num_nodes, &[])
    }

    /// Unit-weight path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let triples: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::build(n, &triples)
    }

    fn from_canonical(num_nodes: usize, edges: Vec<Edge>) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for e in &edges {
            degree[e.i] += 1;
            degree[e.j] += 1;
        }
        let mut offsets = vec![0usize; num_nodes + 1];
        for v in 0..num_nodes {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut cursor = offsets.clone();
        let mut adj = vec![0usize; offsets[num_nodes]];
        let mut adj_w = vec![0.0; offsets[num_nodes]];
        // canonical edges are sorted by (i, j), so each row is filled in
        // ascending neighbor order: first neighbors k < v (as e.j == v, sorted
        // by e.i), then neighbors k > v (as e.i == v, sorted by e.j)
        for e in &edges {
            adj[cursor[e.j]] = e.i;
            adj_w[cursor[e.j]] = e.w;
            cursor[e.j] += 1;
        }
        for e in &edges {
            adj[cursor[e.i]] = e.j;
            adj_w[cursor[e.i]] = e.w;
            cursor[e.i] += 1;
        }
        for v in 0..num_nodes {
            let (s, t) = (offsets[v], offsets[v + 1]);
            debug_assert!(adj[s..t].windows(2).all(|p| p[0] < p[1]));
        }
        WeightedGraph {
            num_nodes,
            edges,
            offsets,
            adj,
            adj_w,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical undirected edges, sorted by `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    fn check_node(&self, i: NodeId) -> Result<(), GraphError> {
        if i >= self.num_nodes {
            Err(GraphError::IndexOutOfRange {
                index: i,
                num_nodes: self.num_nodes,
            })
        } else {
            Ok(())
        }
    }

    /// Neighbors of `i` with edge weights, ascending by neighbor index.
    pub fn neighbors(&self, i: NodeId) -> Result<Vec<(NodeId, f64)>, GraphError> {
        self.check_node(i)?;
        Ok(self.neighbor_slice(i).collect())
    }

    /// Unchecked neighbor iterator for hot loops.
    pub(crate) fn neighbor_slice(&self, i: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        let (s, t) = (self.offsets[i], self.offsets[i + 1]);
        self.adj[s..t].iter().copied().zip(self.adj_w[s..t].iter().copied())
    }

    pub fn degree(&self, i: NodeId) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: NodeId, j: NodeId) -> bool {
        if i >= self.num_nodes || j >= self.num_nodes {
            return false;
        }
        let (s, t) = (self.offsets[i], self.offsets[i + 1]);
        self.adj[s..t].binary_search(&j).is_ok()
    }

    /// Connected components ordered by smallest member; members ascending.
    pub fn connected_components(&self) -> Vec<Vec<NodeId>> {
        let mut comp = vec![usize::MAX; self.num_nodes];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.num_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            comp[start] = id;
            queue.push_back(start);
            let mut members = vec![start];
            while let Some(u) = queue.pop_front() {
                for (v, _) in self.neighbor_slice(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = id;
                        members.push(v);
                        queue.push_back(v);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    /// Component index per node, consistent with [`Self::connected_components`].
    pub fn component_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.num_nodes];
        for (c, members) in self.connected_components().iter().enumerate() {
            for &v in members {
                labels[v] = c;
            }
        }
        labels
    }

    /// Multi-source BFS hop count; `None` marks unreachable nodes.
    pub fn hop_distance(&self, sources: &[NodeId]) -> Result<Vec<Option<usize>>, GraphError> {
        if sources.is_empty() {
            return Err(GraphError::EmptySourceSet);
        }
        let mut dist = vec![None; self.num_nodes];
        let mut queue = VecDeque::new();
        for &s in sources {
            self.check_node(s)?;
            if dist[s].is_none() {
                dist[s] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for (v, _) in self.neighbor_slice(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Adds unit-weight shortcut edges from every labeled node to its `k`
    /// nearest reachable labeled nodes (BFS hops on `self`, ties by index).
    /// Existing edges keep their weights.
    pub fn reconnect_labeled(&self, labeled: &[NodeId], k: usize) -> Result<Self, GraphError> {
        if labeled.is_empty() {
            return Err(GraphError::EmptyLabeledSet);
        }
        if k == 0 {
            return Err(GraphError::ZeroK);
        }
        let mut is_labeled = vec![false; self.num_nodes];
        for &l in labeled {
            self.check_node(l)?;
            is_labeled[l] = true;
        }
        let mut canon: BTreeMap<(usize, usize), f64> =
            self.edges.iter().map(|e| ((e.i, e.j), e.w)).collect();
        let mut sources: Vec<NodeId> = labeled.to_vec();
        sources.sort_unstable();
        sources.dedup();
        for &src in &sources {
            let dist = self.hop_distance(&[src])?;
            let mut found: Vec<(usize, NodeId)> = (0..self.num_nodes)
                .filter(|&v| v != src && is_labeled[v])
                .filter_map(|v| dist[v].map(|d| (d, v)))
                .collect();
            found.sort_unstable();
            for &(_, v) in found.iter().take(k) {
                canon.entry((src.min(v), src.max(v))).or_insert(1.0);
            }
        }
        let edges = canon.into_iter().map(|((i, j), w)| Edge { i, j, w }).collect();
        Ok(Self::from_canonical(self.num_nodes, edges))
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|e| (e.i, e.j, e.w)).collect(),
        }
    }

    pub fn from_json(json: &GraphJson) -> Result<Self, GraphError> {
        Self::build(json.num_nodes, &json.edges)
    }

    pub fn from_json_str(s: &str) -> Result<Self, GraphError> {
        let json: GraphJson = serde_json::from_str(s).map_err(|e| GraphError::Json(e.to_string()))?;
        Self::from_json(&json)
    }

    /// Parses the whitespace edge-list format: one `i j [w]` per line,
    /// `#` starts a comment. Node count is `max index + 1` unless given.
    pub fn parse_edge_list(text: &str, num_nodes: Option<usize>) -> Result<Self, GraphError> {
        let mut triples = Vec::new();
        let mut max_index = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| GraphError::Parse {
                line: lineno + 1,
                msg,
            };
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(format!("expected `i j [w]`, got {} fields", fields.len())));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad node index `{}`", fields[0])))?;
            let j: usize = fields[1]
                .parse()
                .map_err(|_| err(format!("bad node index `{}`", fields[1])))?;
            let w: f64 = match fields.get(2) {
                Some(s) => s.parse().map_err(|_| err(format!("bad weight `{s}`")))?,
                None => 1.0,
            };
            max_index = Some(max_index.unwrap_or(0).max(i).max(j));
            triples.push((i, j, w));
        }
        let n = num_nodes.unwrap_or_else(|| max_index.map_or(0, |m| m + 1));
        Self::build(n, &triples)
    }

    pub fn load_edge_list(path: &Path, num_nodes: Option<usize>) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io(e.to_string()))?;
        Self::parse_edge_list(&text, num_nodes)
    }
}
