use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim, Error, Result};
use crate::graph_io::graph::Graph;
use crate::numeric::{SparseAdj, Tensor2};

/// Edge and feature masks; `true` keeps an entry, `false` hides it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    /// One flag per undirected edge, aligned with [`Graph::undirected_edges`];
    /// both directions of an edge share it.
    pub edge_mask: Vec<bool>,
    /// One flag per node.
    pub feature_mask: Vec<bool>,
    pub p_edge: f64,
    pub p_feat: f64,
    pub seed: u64,
}

impl MaskPair {
    /// Masks that hide nothing.
    pub fn keep_all(graph: &Graph) -> Self {
        Self {
            edge_mask: vec![true; graph.edge_count()],
            feature_mask: vec![true; graph.n()],
            p_edge: 0.0,
            p_feat: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGraph {
    pub adj_masked: SparseAdj,
    pub features_masked: Tensor2,
    /// Nodes touched by either mask, ascending.
    pub masked_nodes: Vec<usize>,
    /// Nodes whose feature row was hidden, ascending.
    pub feature_masked_nodes: Vec<usize>,
}

fn check_rate(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Independent Bernoulli masks: each node's features are hidden with
/// probability `p_feat`, each undirected edge with probability `p_edge`.
/// The ChaCha8 stream seeded by `seed` is consumed nodes first, then edges.
pub fn sample_masks(graph: &Graph, p_edge: f64, p_feat: f64, seed: u64) -> Result<MaskPair> {
    check_rate("p_edge", p_edge)?;
    check_rate("p_feat", p_feat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_mask = (0..graph.n()).map(|_| rng.random::<f64>() >= p_feat).collect();
    let edge_mask = (0..graph.edge_count()).map(|_| rng.random::<f64>() >= p_edge).collect();
    Ok(MaskPair { edge_mask, feature_mask, p_edge, p_feat, seed })
}

pub fn apply_mask(graph: &Graph, masks: &MaskPair) -> Result<MaskedGraph> {
    let edges = graph.undirected_edges();
    if masks.edge_mask.len() != edges.len() || masks.feature_mask.len() != graph.n() {
        return Err(dim(
            "apply_mask",
            format!(
                "masks ({} edges, {} nodes) for graph ({} edges, {} nodes)",
                masks.edge_mask.len(),
                masks.feature_mask.len(),
                edges.len(),
                graph.n()
            ),
        ));
    }
    let mut touched = vec![false; graph.n()];
    let mut kept = Vec::with_capacity(edges.len() * 2);
    for (&(a, b, w), &keep) in edges.iter().zip(&masks.edge_mask) {
        if keep {
            kept.push((a, b, w));
            kept.push((b, a, w));
        } else {
            touched[a] = true;
            touched[b] = true;
        }
    }
    let mut features_masked = graph.features().clone();
    let mut feature_masked_nodes = Vec::new();
    for (i, &keep) in masks.feature_mask.iter().enumerate() {
        if !keep {
            features_masked.row_mut(i).fill(0.0);
            touched[i] = true;
            feature_masked_nodes.push(i);
        }
    }
    let masked_nodes = touched.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect();
    Ok(MaskedGraph {
        adj_masked: SparseAdj::from_triplets(graph.n(), kept)?,
        features_masked,
        masked_nodes,
        feature_masked_nodes,
    })
}
