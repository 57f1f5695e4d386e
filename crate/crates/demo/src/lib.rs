//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Points cross the boundary as flat `[x0, y0, x1, y1, ...]` arrays.

use gcma_core::dpeaks::{estimate_k, gamma, DEFAULT_PERCENTILES};
use gcma_core::graph_io::synthetic::gaussian_blobs;
use gcma_core::numeric::Tensor2;
use gcma_core::selfopt::soft_assign_value;
use wasm_bindgen::prelude::*;

fn js(e: gcma_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn points(xy: &[f64]) -> Result<Tensor2, JsError> {
    if !xy.len().is_multiple_of(2) {
        return Err(JsError::new("coordinate array has odd length"));
    }
    Tensor2::from_vec(xy.len() / 2, 2, xy.to_vec()).map_err(js)
}

/// Seeded Gaussian blobs in the unit square.
#[wasm_bindgen]
pub fn blobs(k: usize, per: usize, sigma: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let min_sep = (0.5 / (k as f64).sqrt()).min(0.3);
    let (x, _) = gaussian_blobs(k, per, sigma, min_sep, 0.8, seed).map_err(js)?;
    Ok(x.data().iter().map(|v| v + 0.1).collect())
}

/// Density-peaks result with everything needed to draw a decision graph.
#[wasm_bindgen]
pub struct Clustering {
    k: usize,
    percentile: f64,
    d_c: f64,
    labels: Vec<u32>,
    centers: Vec<u32>,
    rho: Vec<f64>,
    delta: Vec<f64>,
    gamma: Vec<f64>,
    votes: Vec<f64>,
}

#[wasm_bindgen]
impl Clustering {
    #[wasm_bindgen(getter)]
    pub fn k(&self) -> usize {
        self.k
    }

    #[wasm_bindgen(getter)]
    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    #[wasm_bindgen(getter)]
    pub fn d_c(&self) -> f64 {
        self.d_c
    }

    #[wasm_bindgen(getter)]
    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    /// Point indices of the centers, in label order.
    #[wasm_bindgen(getter)]
    pub fn centers(&self) -> Vec<u32> {
        self.centers.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rho(&self) -> Vec<f64> {
        self.rho.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn delta(&self) -> Vec<f64> {
        self.delta.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn gamma(&self) -> Vec<f64> {
        self.gamma.clone()
    }

    /// Flat `[percentile, k, ...]` pairs.
    #[wasm_bindgen(getter)]
    pub fn votes(&self) -> Vec<f64> {
        self.votes.clone()
    }
}

/// Estimates the number of clusters by the percentile vote. An empty grid
/// uses the default one.
#[wasm_bindgen]
pub fn cluster(xy: &[f64], percentiles: &[f64]) -> Result<Clustering, JsError> {
    let x = points(xy)?;
    let grid = if percentiles.is_empty() { &DEFAULT_PERCENTILES[..] } else { percentiles };
    let est = estimate_k(&x, grid).map_err(js)?;
    let profile = &est.profile;
    Ok(Clustering {
        k: est.state.k,
        percentile: est.percentile,
        d_c: profile.d_c,
        labels: est.state.labels.iter().map(|&l| l as u32).collect(),
        centers: est.state.centers.iter().map(|&c| c as u32).collect(),
        gamma: gamma(&profile.rho, &profile.delta),
        rho: profile.rho.clone(),
        delta: profile.delta.clone(),
        votes: est.votes.iter().flat_map(|&(p, k)| [p, k as f64]).collect(),
    })
}

/// Student-t soft assignment of every point to every center, flattened row
/// by row.
#[wasm_bindgen]
pub fn soft_assign(xy: &[f64], centers: &[f64], dof: f64) -> Result<Vec<f64>, JsError> {
    let q = soft_assign_value(&points(xy)?, &points(centers)?, dof).map_err(js)?;
    Ok(q.data().to_vec())
}
