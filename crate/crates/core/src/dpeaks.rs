//! Density-peaks clustering with a Gaussian density kernel and automatic
//! choice of the number of clusters.
//!
//! Each point gets a local density ρ and the distance δ to its nearest
//! denser point. Points scoring high on both are centers; the rest follow
//! their nearest denser neighbor. The cutoff distance is a percentile of the
//! pairwise distances, and k is decided by a vote over several percentiles.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::numeric::{Tape, Tensor2, Var};

pub const DEFAULT_PERCENTILES: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
pub const K_MAX: usize = 64;

/// Dense symmetric Euclidean distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Distances {
    n: usize,
    d: Vec<f64>,
}

impl Distances {
    pub fn euclidean(points: &Tensor2) -> Self {
        let n = points.rows();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            let a = points.row(i);
            for j in i + 1..n {
                let b = points.row(j);
                let mut s = 0.0;
                for (x, y) in a.iter().zip(b) {
                    s += (x - y) * (x - y);
                }
                let v = s.sqrt();
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    pub fn from_matrix(m: &Tensor2) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(dim("distances", format!("{:?} is not square", m.shape())));
        }
        Ok(Self { n: m.rows(), d: m.data().to_vec() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    /// Nearest denser point; `None` only for the global density maximum.
    pub nn_higher: Vec<Option<usize>>,
    pub d_c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub k: usize,
    pub centers: Vec<usize>,
    pub labels: Vec<usize>,
    pub means: Tensor2,
    pub sizes: Vec<usize>,
}

impl ClusterState {
    /// Builds the state for fixed centers and labels, computing cluster means.
    pub fn from_labels(points: &Tensor2, centers: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let k = centers.len();
        if labels.len() != points.rows() {
            return Err(dim("cluster_state", format!("{} labels for {} points", labels.len(), points.rows())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Parameter(format!("label {bad} out of range for k={k}")));
        }
        let d = points.cols();
        let mut means = Tensor2::zeros(k, d);
        let mut sizes = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sizes[l] += 1;
            for (m, x) in means.row_mut(l).iter_mut().zip(points.row(i)) {
                *m += x;
            }
        }
        for (c, &s) in sizes.iter().enumerate() {
            if s > 0 {
                means.row_mut(c).iter_mut().for_each(|m| *m /= s as f64);
            }
        }
        Ok(Self { k, centers, labels, means, sizes })
    }
}

/// Percentile of the off-diagonal pairwise distances: the value at rank
/// `ceil(p/100 · m)` among the `m` sorted pairs. A zero result falls back to
/// the smallest positive distance.
pub fn cutoff_distance(dists: &Distances, percentile: f64) -> Result<f64> {
    let n = dists.n();
    if n < 2 {
        return Err(Error::Parameter("cutoff distance needs at least two points".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Parameter(format!("percentile must lie in (0, 100], got {percentile}")));
    }
    let mut pairs: Vec<f64> = (0..n).flat_map(|i| dists.row(i)[i + 1..].iter().copied()).collect();
    let m = pairs.len();
    let rank = ((percentile / 100.0 * m as f64).ceil() as usize).clamp(1, m) - 1;
    let (_, &mut d_c, _) = pairs.select_nth_unstable_by(rank, f64::total_cmp);
    if d_c > 0.0 {
        return Ok(d_c);
    }
    pairs.iter().copied().filter(|&d| d > 0.0).min_by(f64::total_cmp).ok_or(Error::DegenerateDistance)
}

/// Gaussian-kernel density `ρ_i = Σ_{j≠i} exp(-(d_ij / d_c)²)`.
pub fn local_density(dists: &Distances, d_c: f64) -> Result<Vec<f64>> {
    if !(d_c > 0.0) {
        return Err(Error::Parameter(format!("cutoff distance must be > 0, got {d_c}")));
    }
    let n = dists.n();
    Ok((0..n)
        .map(|i| {
            let mut rho = 0.0;
            for (j, &d) in dists.row(i).iter().enumerate() {
                if j != i {
                    let r = d / d_c;
                    rho += (-r * r).exp();
                }
            }
            rho
        })
        .collect())
}

/// Indices by decreasing density; equal densities put the lower index first.
pub fn density_order(rho: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    order
}

/// Distance to the nearest denser point, with equal distances resolved to the
/// lower index. The densest point gets its largest distance to any point.
pub fn delta_distance(dists: &Distances, rho: &[f64]) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    let n = dists.n();
    if rho.len() != n {
        return Err(dim("delta_distance", format!("{} densities for {n} points", rho.len())));
    }
    let order = density_order(rho);
    let mut delta = vec![0.0; n];
    let mut nn = vec![None; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos == 0 {
            delta[i] = dists.row(i).iter().copied().fold(0.0, f64::max);
            continue;
        }
        let row = dists.row(i);
        let mut best = (f64::INFINITY, usize::MAX);
        for &j in &order[..pos] {
            let d = row[j];
            if d < best.0 || (d == best.0 && j < best.1) {
                best = (d, j);
            }
        }
        delta[i] = best.0;
        nn[i] = Some(best.1);
    }
    Ok((delta, nn))
}

pub fn density_profile(dists: &Distances, d_c: f64) -> Result<DensityProfile> {
    let rho = local_density(dists, d_c)?;
    let (delta, nn_higher) = delta_distance(dists, &rho)?;
    Ok(DensityProfile { rho, delta, nn_higher, d_c })
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; v.len()]
    }
}

/// Center score `γ = ρ̃·δ̃` on min-max normalized ρ and δ.
pub fn gamma(rho: &[f64], delta: &[f64]) -> Vec<f64> {
    min_max(rho).iter().zip(min_max(delta)).map(|(r, d)| r * d).collect()
}

/// δ with the densest point's value lowered to the largest δ of any other
/// point.
fn capped_delta(rho: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = delta.to_vec();
    if let Some(&top) = density_order(rho).first() {
        let rest = delta.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &d)| d).fold(f64::NEG_INFINITY, f64::max);
        if rest.is_finite() {
            out[top] = rest;
        }
    }
    out
}

/// Picks k at the largest ratio between consecutive sorted γ scores within
/// the first `min(n-1, 64)` ranks and returns the top-k points by γ.
///
/// Scores use [`capped_delta`], and the scan ends at the first rank whose
/// score is not above the mean score.
pub fn select_centers(rho: &[f64], delta: &[f64]) -> Vec<usize> {
    let n = rho.len();
    if n == 0 {
        return Vec::new();
    }
    let g = gamma(rho, &capped_delta(rho, delta));
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    let k_max = (n - 1).min(K_MAX);
    let mean = g.iter().sum::<f64>() / n as f64;
    let mut k = 1;
    let mut best = f64::NEG_INFINITY;
    for m in 1..=k_max {
        let next = g[ranked[m]];
        if g[ranked[m - 1]] <= mean {
            break;
        }
        if next > 0.0 {
            let ratio = g[ranked[m - 1]] / next;
            if ratio > best {
                best = ratio;
                k = m;
            }
        }
    }
    ranked.truncate(k);
    ranked
}

/// Centers take labels `0..k` in the given order; every other point, visited
/// by decreasing density, copies the label of its nearest denser point.
pub fn assign(centers: &[usize], rho: &[f64], nn_higher: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = rho.len();
    if centers.is_empty() {
        return Err(Error::Parameter("assignment needs at least one center".into()));
    }
    if nn_higher.len() != n {
        return Err(dim("assign", format!("{} neighbors for {n} points", nn_higher.len())));
    }
    let mut labels = vec![usize::MAX; n];
    for (c, &i) in centers.iter().enumerate() {
        if i >= n {
            return Err(Error::Parameter(format!("center {i} out of range for n={n}")));
        }
        labels[i] = c;
    }
    for i in density_order(rho) {
        if labels[i] != usize::MAX {
            continue;
        }
        let parent = nn_higher[i].ok_or_else(|| Error::Parameter(format!("densest point {i} is not a center")))?;
        labels[i] = labels[parent];
    }
    Ok(labels)
}

/// Full density-peaks run at one cutoff distance.
pub fn cluster_at(points: &Tensor2, dists: &Distances, d_c: f64) -> Result<(ClusterState, DensityProfile)> {
    let profile = density_profile(dists, d_c)?;
    let centers = select_centers(&profile.rho, &profile.delta);
    let labels = assign(&centers, &profile.rho, &profile.nn_higher)?;
    Ok((ClusterState::from_labels(points, centers, labels)?, profile))
}

/// Outcome of the percentile vote.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub state: ClusterState,
    pub profile: DensityProfile,
    pub percentile: f64,
    /// `(percentile, k)` for every grid member.
    pub votes: Vec<(f64, usize)>,
}

impl Estimate {
    pub fn d_c(&self) -> f64 {
        self.profile.d_c
    }
}

/// Runs density peaks at every percentile in `grid`, takes the most frequent
/// k (ties go to the smaller k) and returns the run at the median percentile
/// among those that voted for it.
pub fn estimate_k(points: &Tensor2, grid: &[f64]) -> Result<Estimate> {
    if grid.is_empty() {
        return Err(Error::Parameter("percentile grid is empty".into()));
    }
    let n = points.rows();
    if n == 0 {
        return Err(Error::Parameter("cannot cluster zero points".into()));
    }
    if n == 1 {
        let state = ClusterState::from_labels(points, vec![0], vec![0])?;
        let profile = DensityProfile { rho: vec![0.0], delta: vec![0.0], nn_higher: vec![None], d_c: 0.0 };
        return Ok(Estimate { state, profile, percentile: grid[0], votes: grid.iter().map(|&p| (p, 1)).collect() });
    }
    let dists = Distances::euclidean(points);
    let mut runs = Vec::with_capacity(grid.len());
    for &p in grid {
        let d_c = cutoff_distance(&dists, p)?;
        let (state, profile) = cluster_at(points, &dists, d_c)?;
        runs.push((p, state, profile));
    }
    let votes: Vec<(f64, usize)> = runs.iter().map(|(p, s, _)| (*p, s.k)).collect();
    let mut tally: std::collections::BTreeMap<usize, usize> = Default::default();
    for &(_, k) in &votes {
        *tally.entry(k).or_default() += 1;
    }
    let top = tally.values().copied().max().unwrap_or(0);
    let modal = tally.iter().find(|(_, &c)| c == top).map(|(&k, _)| k).unwrap_or(1);
    let mut winners: Vec<(f64, ClusterState, DensityProfile)> = runs.into_iter().filter(|(_, s, _)| s.k == modal).collect();
    winners.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (percentile, state, profile) = winners.swap_remove((winners.len() - 1) / 2);
    Ok(Estimate { state, profile, percentile, votes })
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn cluster_loss_value(points: &Tensor2, state: &ClusterState) -> f64 {
    let mut total = 0.0;
    for (i, &l) in state.labels.iter().enumerate() {
        for (x, m) in points.row(i).iter().zip(state.means.row(l)) {
            total += (x - m) * (x - m);
        }
    }
    total
}

/// Differentiable within-cluster loss; labels and means are constants.
pub fn cluster_loss(tape: &mut Tape, z: Var, state: &ClusterState) -> Result<Var> {
    let (n, d) = tape.value(z).shape();
    if state.labels.len() != n || state.means.cols() != d {
        return Err(dim(
            "cluster_loss",
            format!("embedding {n}x{d} vs {} labels, means {:?}", state.labels.len(), state.means.shape()),
        ));
    }
    let target = state.means.select_rows(&state.labels);
    let target = tape.constant(target);
    let diff = tape.sub(z, target)?;
    let sq = tape.hadamard(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Writes `node,rho,delta,gamma,label` rows for plotting a decision graph.
pub fn write_decision_graph(path: &Path, profile: &DensityProfile, labels: &[usize]) -> Result<()> {
    let g = gamma(&profile.rho, &profile.delta);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "node,rho,delta,gamma,label")?;
    for i in 0..profile.rho.len() {
        writeln!(out, "{i},{},{},{},{}", profile.rho[i], profile.delta[i], g[i], labels[i])?;
    }
    out.flush()?;
    Ok(())
}
