use crate::error::{dim, Error, Result};
use crate::numeric::{SparseAdj, Tensor2};

/// Undirected attributed graph with optional ground-truth classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub name: String,
    adj: SparseAdj,
    features: Tensor2,
    labels: Option<Vec<usize>>,
    true_k: Option<usize>,
}

impl Graph {
    /// Validates symmetry, the absence of stored self-loops and label range.
    /// `true_k` is the number of classes `0..=max(label)`.
    pub fn new(name: impl Into<String>, adj: SparseAdj, features: Tensor2, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = features.rows();
        if adj.rows() != n || adj.cols() != n {
            return Err(dim("graph", format!("adjacency {}x{} for {n} feature rows", adj.rows(), adj.cols())));
        }
        if !adj.is_symmetric() {
            return Err(Error::Parameter("adjacency must be symmetric".into()));
        }
        if adj.entries().any(|(r, c, _)| r == c) {
            return Err(Error::Parameter("self-loops must not be stored".into()));
        }
        let true_k = match &labels {
            Some(l) if l.len() != n => {
                return Err(dim("graph", format!("{} labels for {n} nodes", l.len())));
            }
            Some(l) => l.iter().max().map(|m| m + 1),
            None => None,
        };
        Ok(Self { name: name.into(), adj, features, labels, true_k })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn adj(&self) -> &SparseAdj {
        &self.adj
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn true_k(&self) -> Option<usize> {
        self.true_k
    }

    /// Undirected edges `(i, j, w)` with `i < j`, row-sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize, f64)> {
        self.adj.entries().filter(|&(r, c, _)| r < c).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.nnz() / 2
    }
}

/// Symmetric adjacency from undirected `(i, j, w)` edges; self-loops are
/// dropped and repeated pairs keep their first weight.
pub fn symmetric_adjacency(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<SparseAdj> {
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::new();
    for (a, b, w) in edges {
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            entries.push((a, b, w));
            entries.push((b, a, w));
        }
    }
    SparseAdj::from_triplets(n, entries)
}

/// Renormalized adjacency `D^-1/2 (A + I) D^-1/2` with `D` the degrees of `A + I`.
pub fn normalize_adjacency(adj: &SparseAdj) -> SparseAdj {
    let n = adj.n();
    let mut entries: Vec<(usize, usize, f64)> = adj.entries().filter(|&(r, c, _)| r != c).collect();
    entries.extend((0..n).map(|i| (i, i, 1.0)));
    let mut degree = vec![0.0; n];
    for &(r, _, w) in &entries {
        degree[r] += w;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let scaled = entries.into_iter().map(|(r, c, w)| (r, c, w * inv_sqrt[r] * inv_sqrt[c])).collect();
    SparseAdj::from_triplets(n, scaled).expect("entries come from a valid adjacency")
}
