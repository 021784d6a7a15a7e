use serde::{Deserialize, Serialize};

use crate::autodiff::Csr;
use crate::error::{Error, Result};

/// Number of MRI region nodes.
pub const MRI_NODES: usize = 62;
/// Number of UDS item nodes.
pub const UDS_NODES: usize = 170;

/// Undirected graph with self-inclusive, sorted neighbour lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology from undirected edges. Each edge is normalised to
    /// `(min, max)`; self-loops and duplicates are rejected.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(Error::Config(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            if u == v {
                return Err(Error::Config(format!("self-loop on node {u}")));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate edge {:?}", w[0])));
        }
        let mut neighbors: Vec<Vec<usize>> = (0..node_count).map(|u| vec![u]).collect();
        for &(u, v) in &norm {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Topology {
            node_count,
            edges: norm,
            neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbours of `u`, including `u` itself.
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.node_count];
        let mut count = 0;
        for start in 0..self.node_count {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() <= 1
    }

    /// Nodes within `hops` edges of `u` (including `u`).
    pub fn ball(&self, u: usize, hops: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count];
        dist[u] = 0;
        let mut frontier = vec![u];
        for d in 1..=hops {
            let mut next = Vec::new();
            for &x in &frontier {
                for &y in &self.neighbors[x] {
                    if dist[y] == usize::MAX {
                        dist[y] = d;
                        next.push(y);
                    }
                }
            }
            frontier = next;
        }
        (0..self.node_count).filter(|&v| dist[v] != usize::MAX).collect()
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Topology> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Topology::from_edges(self.node_count, &edges)
    }

    /// Block-diagonal adjacency for `copies` disjoint copies of this graph.
    pub fn batched_csr(&self, copies: usize) -> Csr {
        let per = self.neighbors.iter().map(Vec::len).sum::<usize>();
        let mut offsets = Vec::with_capacity(copies * self.node_count + 1);
        let mut cols = Vec::with_capacity(copies * per);
        offsets.push(0);
        for c in 0..copies {
            let base = c * self.node_count;
            for n in &self.neighbors {
                cols.extend(n.iter().map(|v| v + base));
                offsets.push(cols.len());
            }
        }
        Csr { offsets, cols }
    }
}

/// Lattice layout for the MRI region graph: nodes fill a `rows × cols`
/// grid row-major, the first `nodes` cells are used, and 4-neighbouring
/// cells are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub nodes: usize,
}

impl Default for MriGridSpec {
    fn default() -> Self {
        MriGridSpec {
            rows: 8,
            cols: 8,
            nodes: MRI_NODES,
        }
    }
}

impl MriGridSpec {
    /// Grid coordinates of node `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }
}

/// Deterministic MRI region graph on the lattice described by `spec`.
pub fn build_mri_topology(spec: &MriGridSpec) -> Result<Topology> {
    if spec.nodes != MRI_NODES {
        return Err(Error::Config(format!(
            "MRI grid must have {MRI_NODES} nodes, got {}",
            spec.nodes
        )));
    }
    if spec.rows * spec.cols < spec.nodes || spec.cols == 0 {
        return Err(Error::Config(format!(
            "a {}x{} grid cannot hold {} nodes",
            spec.rows, spec.cols, spec.nodes
        )));
    }
    let mut edges = Vec::new();
    for i in 0..spec.nodes {
        let (r, c) = spec.position(i);
        if c + 1 < spec.cols && i + 1 < spec.nodes {
            edges.push((i, i + 1));
        }
        if r + 1 < spec.rows && i + spec.cols < spec.nodes {
            edges.push((i, i + spec.cols));
        }
    }
    let topo = Topology::from_edges(spec.nodes, &edges)?;
    if !topo.is_connected() {
        return Err(Error::Config("MRI grid is not connected".into()));
    }
    Ok(topo)
}

/// Clinical-domain membership of each UDS item. `None` marks an item that
/// was never assigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainAssignment(pub Vec<Option<usize>>);

impl DomainAssignment {
    /// Contiguous blocks with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        DomainAssignment(
            sizes
                .iter()
                .enumerate()
                .flat_map(|(d, &n)| std::iter::repeat_n(Some(d), n))
                .collect(),
        )
    }

    /// Eight domains of sizes 22, 22, 22, 22, 22, 20, 20, 20.
    pub fn uds_default() -> Self {
        DomainAssignment::from_sizes(&[22, 22, 22, 22, 22, 20, 20, 20])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn domain_count(&self) -> usize {
        self.0.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn domain_of(&self, node: usize) -> Option<usize> {
        self.0[node]
    }
}

/// One clique per clinical domain, no edges across domains.
pub fn build_uds_topology(assignment: &DomainAssignment) -> Result<Topology> {
    if let Some(node) = assignment.0.iter().position(Option::is_none) {
        return Err(Error::Config(format!("UDS node {node} has no domain")));
    }
    let n = assignment.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if assignment.0[u] == assignment.0[v] {
                edges.push((u, v));
            }
        }
    }
    Topology::from_edges(n, &edges)
}
