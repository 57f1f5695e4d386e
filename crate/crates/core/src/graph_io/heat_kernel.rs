use crate::error::{Error, Result};
use crate::numeric::{SparseAdj, Tensor2};

pub const DEFAULT_NEIGHBORS: usize = 10;
const BANDWIDTH_SAMPLE: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared pairwise distance over an evenly strided sample of at most
/// 1000 rows. Falls back to 1 when every sampled row coincides.
pub fn default_bandwidth(features: &Tensor2) -> f64 {
    let n = features.rows();
    let stride = n.div_ceil(BANDWIDTH_SAMPLE).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            total += sq_dist(features.row(i), features.row(j));
            pairs += 1;
        }
    }
    let mean = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// k-nearest-neighbor graph with heat-kernel weights `exp(-||x_i - x_j||^2 / t)`,
/// symmetrized by keeping the larger of the two directed weights.
/// Distance ties are broken by lower node index.
pub fn build_heat_kernel_graph(features: &Tensor2, neighbors: usize, t: f64) -> Result<SparseAdj> {
    let n = features.rows();
    if neighbors == 0 {
        return Err(Error::Parameter("neighbors must be >= 1".into()));
    }
    if neighbors >= n {
        return Err(Error::Parameter(format!("neighbors ({neighbors}) must be < n ({n})")));
    }
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("heat-kernel t must be > 0, got {t}")));
    }
    let mut weight: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(features.row(i), features.row(j)), j)));
        cand.select_nth_unstable_by(neighbors - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &cand[..neighbors] {
            let w = (-d / t).exp();
            let key = (i.min(j), i.max(j));
            let slot = weight.entry(key).or_insert(w);
            *slot = slot.max(w);
        }
    }
    let entries = weight.into_iter().flat_map(|((a, b), w)| [(a, b, w), (b, a, w)]).collect();
    SparseAdj::from_triplets(n, entries)
}
