//! Undirected skill-relationship graphs.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Simple undirected graph over skills `0..node_count`. Adjacency lists are
/// kept sorted, without duplicates or self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkillGraph {
    adjacency: Vec<Vec<usize>>,
    labels: Option<Vec<String>>,
}

impl SkillGraph {
    pub fn new(node_count: usize) -> Self {
        SkillGraph {
            adjacency: vec![Vec::new(); node_count],
            labels: None,
        }
    }

    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::new(node_count);
        for &(u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    /// Inserts `{u, v}`. Returns whether the edge was new; self-loops are
    /// rejected.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        let n = self.node_count();
        for id in [u, v] {
            if id >= n {
                return Err(Error::Range {
                    id,
                    limit: n,
                    context: "in skill graph".into(),
                });
            }
        }
        if u == v {
            return Err(Error::InvalidArgument(format!("self-loop on skill {u}")));
        }
        match self.adjacency[u].binary_search(&v) {
            Ok(_) => Ok(false),
            Err(pos) => {
                self.adjacency[u].insert(pos, v);
                let pos = self.adjacency[v].binary_search(&u).unwrap_err();
                self.adjacency[v].insert(pos, u);
                Ok(true)
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn is_adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&v| self.degree(v) == 0).collect()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.node_count() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.node_count()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn write_edge_list<W: Write>(&self, mut sink: W) -> Result<()> {
        let io = |e| Error::io("<edge list sink>", e);
        writeln!(sink, "# nodes={} edges={}", self.node_count(), self.edge_count()).map_err(io)?;
        for (u, v) in self.edges() {
            writeln!(sink, "{u}\t{v}").map_err(io)?;
        }
        Ok(())
    }
}

/// Parses a whitespace-separated edge list, one `u v` pair per line. Blank
/// lines and `#` comments are ignored; duplicate and reversed edges collapse.
pub fn load_edge_list<R: Read>(source: R, node_count: usize) -> Result<SkillGraph> {
    let mut graph = SkillGraph::new(node_count);
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<edge list>", e))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected two node ids, found {} tokens", tokens.len()),
            });
        }
        let mut ids = [0usize; 2];
        for (slot, tok) in ids.iter_mut().zip(&tokens) {
            *slot = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("`{tok}` is not a non-negative integer node id"),
            })?;
            if *slot >= node_count {
                return Err(Error::Range {
                    id: *slot,
                    limit: node_count,
                    context: format!("at edge list line {lineno}"),
                });
            }
        }
        if ids[0] == ids[1] {
            log::warn!("edge list line {lineno}: ignoring self-loop on {}", ids[0]);
            continue;
        }
        graph.add_edge(ids[0], ids[1])?;
    }
    Ok(graph)
}

pub fn load_edge_list_path(path: &Path, node_count: usize) -> Result<SkillGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_edge_list(file, node_count)
}

/// Uniformly random simple graph with exactly `edge_count` edges, the
/// structure-free control for an expert graph of the same density.
pub fn random_skill_graph(node_count: usize, edge_count: usize, seed: u64) -> Result<SkillGraph> {
    let max_edges = node_count * node_count.saturating_sub(1) / 2;
    if edge_count > max_edges {
        return Err(Error::InvalidArgument(format!(
            "{edge_count} edges requested but {node_count} nodes allow at most {max_edges}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, max_edges, edge_count).into_iter().collect();
    let mut graph = SkillGraph::new(node_count);
    // Pair index k enumerates (u, v), u < v, row by row.
    let mut k = 0;
    for u in 0..node_count {
        for v in (u + 1)..node_count {
            if chosen.contains(&k) {
                graph.add_edge(u, v)?;
            }
            k += 1;
        }
    }
    Ok(graph)
}
