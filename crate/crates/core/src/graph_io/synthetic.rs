//! Seeded synthetic data: Gaussian blobs and attributed stochastic block
//! model graphs with bag-of-words style features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph_io::graph::{symmetric_adjacency, Graph};
use crate::numeric::Tensor2;

/// Isotropic 2-D Gaussian blobs with `per` points each. Centers are drawn
/// uniformly from `[0, side]²` and kept only if at least `min_sep` from every
/// earlier center.
pub fn gaussian_blobs(k: usize, per: usize, sigma: f64, min_sep: f64, side: f64, seed: u64) -> Result<(Tensor2, Vec<usize>)> {
    if k == 0 || per == 0 || !(sigma >= 0.0) {
        return Err(Error::Parameter("blobs need k >= 1, per >= 1 and sigma >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while centers.len() < k {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Parameter(format!("cannot place {k} centers {min_sep} apart in a square of side {side}")));
        }
        let c = [rng.random::<f64>() * side, rng.random::<f64>() * side];
        if centers.iter().all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= min_sep) {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Vec::with_capacity(k * per * 2);
    let mut labels = Vec::with_capacity(k * per);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            data.push(center[0] + noise.sample(&mut rng));
            data.push(center[1] + noise.sample(&mut rng));
            labels.push(c);
        }
    }
    Ok((Tensor2::from_vec(k * per, 2, data)?, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbmSpec {
    pub communities: usize,
    pub size: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Vocabulary size; every community owns an equal slice of it.
    pub d_in: usize,
    /// Words switched on per node.
    pub words: usize,
    /// Probability that a word is drawn from the node's own slice.
    pub purity: f64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self { communities: 3, size: 40, p_in: 0.15, p_out: 0.01, d_in: 60, words: 8, purity: 0.7 }
    }
}

/// Planted-partition graph with binary features correlated with the blocks.
pub fn attributed_sbm(spec: &SbmSpec, seed: u64) -> Result<Graph> {
    let k = spec.communities;
    if k == 0 || spec.size == 0 || spec.d_in < k || spec.words == 0 {
        return Err(Error::Parameter(format!("invalid block model {spec:?}")));
    }
    for p in [spec.p_in, spec.p_out, spec.purity] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * spec.size;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.size).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    let slice = spec.d_in / k;
    let mut features = Tensor2::zeros(n, spec.d_in);
    for (i, &c) in labels.iter().enumerate() {
        for _ in 0..spec.words {
            let w = if rng.random::<f64>() < spec.purity {
                c * slice + rng.random_range(0..slice)
            } else {
                rng.random_range(0..spec.d_in)
            };
            features.set(i, w, 1.0);
        }
    }
    let adj = symmetric_adjacency(n, edges)?;
    Graph::new(format!("sbm-{k}x{}", spec.size), adj, features, Some(labels))
}
