//! Multi-target decoding.
//!
//! Masked rows of the fused embedding are swapped for a learned token,
//! mixed with their surviving neighbors, projected by small MLPs and matched
//! against frozen target embeddings with a contrastive (InfoNCE) loss over
//! the masked nodes. The structural target comes from an inner-product graph
//! autoencoder; the feature target is the autoencoder's own embedding.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{glorot_uniform, FeatureInput, LayerInput, Linear};
use crate::error::{dim, Error, Result};
use crate::graph_io::{normalize_adjacency, Graph};
use crate::numeric::{Adam, Elementwise, ParamId, ParamStore, SparseMatrix, Tape, Tensor2, Var, NORM_EPS};

pub const HEAD_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 3],
    /// Softmax temperature ξ.
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0, 1.0, 1.0], xi: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Parameter(format!("lambda weights must be >= 0, got {:?}", self.lambda)));
        }
        if !(self.xi > 0.0) {
            return Err(Error::Parameter(format!("xi must be > 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Frozen structural (`s1`) and feature (`s2`) targets, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEmbeddings {
    pub s1: Tensor2,
    pub s2: Tensor2,
    joint: Tensor2,
}

impl TargetEmbeddings {
    pub fn new(s1: Tensor2, s2: Tensor2) -> Result<Self> {
        let joint = s1.hconcat(&s2)?;
        Ok(Self { s1, s2, joint })
    }

    fn get(&self, n: usize) -> &Tensor2 {
        match n {
            0 => &self.s1,
            1 => &self.s2,
            _ => &self.joint,
        }
    }
}

/// Replaces the listed rows of `z` with the shared `token` row.
pub fn remask(tape: &mut Tape, z: Var, nodes: Rc<Vec<usize>>, token: Var) -> Result<Var> {
    tape.replace_rows(z, nodes, token)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskToken {
    pub id: ParamId,
}

impl MaskToken {
    pub fn new(store: &mut ParamStore, dim: usize) -> Self {
        Self { id: store.insert("decoder.mask_token", Tensor2::zeros(1, dim)) }
    }
}

/// `exp(cos(p, s) / ξ)`.
pub fn pair_score(p: &[f64], s: &[f64], xi: f64) -> Result<f64> {
    if p.len() != s.len() {
        return Err(dim("pair_score", format!("{} vs {}", p.len(), s.len())));
    }
    if !(xi > 0.0) {
        return Err(Error::Parameter(format!("xi must be > 0, got {xi}")));
    }
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || ns == 0.0 {
        return Err(Error::NumericDomain { op: "pair_score", detail: "zero-norm vector".into() });
    }
    let dot: f64 = p.iter().zip(s).map(|(a, b)| a * b).sum();
    Ok((dot / ((np + NORM_EPS) * (ns + NORM_EPS)) / xi).exp())
}

/// `-mean_i log( score(p_i, s_i) / Σ_j score(p_i, s_j) )` over the rows of
/// `proj` against the matching rows of `target`.
pub fn info_nce(tape: &mut Tape, proj: Var, target: &Tensor2, xi: f64) -> Result<Var> {
    if tape.value(proj).shape() != target.shape() {
        return Err(dim("info_nce", format!("{:?} vs {:?}", tape.value(proj).shape(), target.shape())));
    }
    if target.rows() == 0 {
        return Err(Error::LossUndefined("no masked nodes".into()));
    }
    let p = tape.elementwise(Elementwise::L2NormalizeRow, proj)?;
    let s = tape.constant(target.l2_normalize_rows(NORM_EPS).transpose());
    let logits = tape.matmul(p, s)?;
    let logits = tape.scale(logits, 1.0 / xi);
    tape.xent_diag(logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, LayerInput::Var(x))?;
        let h = tape.elementwise(Elementwise::LeakyRelu(HEAD_SLOPE), h)?;
        self.out.forward(tape, store, LayerInput::Var(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub heads: [ProjectionHead; 3],
}

impl ProjectionHeads {
    /// Heads mapping `embed_dim` to the widths of `s1`, `s2` and `s1 ⊕ s2`.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, embed_dim: usize, hidden: usize, d1: usize, d2: usize) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut R, i: usize, out: usize| ProjectionHead {
            hidden: Linear::new(store, rng, &format!("head.{i}.0"), embed_dim, hidden),
            out: Linear::new(store, rng, &format!("head.{i}.1"), hidden, out),
        };
        let h1 = mk(store, rng, 1, d1);
        let h2 = mk(store, rng, 2, d2);
        let h3 = mk(store, rng, 3, d1 + d2);
        Self { heads: [h1, h2, h3] }
    }
}

pub struct InfoLoss {
    pub total: Var,
    /// Unweighted per-target losses.
    pub terms: [f64; 3],
}

/// `λ₁ L(P₁, S₁) + λ₂ L(P₂, S₂) + λ₃ L(P₃, S₁ ⊕ S₂)` over the nodes in
/// `masked`. Terms with zero weight are skipped.
pub fn info_loss(
    tape: &mut Tape,
    store: &ParamStore,
    v_hat: Var,
    targets: &TargetEmbeddings,
    heads: &ProjectionHeads,
    weights: &LossWeights,
    masked: &Rc<Vec<usize>>,
) -> Result<InfoLoss> {
    weights.validate()?;
    if masked.is_empty() {
        return Err(Error::LossUndefined("no masked nodes".into()));
    }
    let n = tape.value(v_hat).rows();
    if targets.s1.rows() != n || targets.s2.rows() != n {
        return Err(dim("info_loss", format!("targets for {}/{} nodes, embedding has {n}", targets.s1.rows(), targets.s2.rows())));
    }
    let rows = tape.gather_rows(v_hat, masked.clone())?;
    let mut total: Option<Var> = None;
    let mut terms = [0.0; 3];
    for (t, head) in heads.heads.iter().enumerate() {
        let lambda = weights.lambda[t];
        if lambda == 0.0 {
            continue;
        }
        let proj = head.forward(tape, store, rows)?;
        let target = targets.get(t).select_rows(masked);
        let term = info_nce(tape, proj, &target, weights.xi)?;
        terms[t] = tape.scalar(term);
        let weighted = tape.scale(term, lambda);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor2::scalar(0.0)),
    };
    Ok(InfoLoss { total, terms })
}

/// Mean squared reconstruction error.
pub fn ae_recon_loss(tape: &mut Tape, recon: Var, features: Rc<Tensor2>) -> Result<Var> {
    tape.mse(recon, features)
}

/// Two-layer graph convolutional encoder scored by inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct Gae {
    pub w0: ParamId,
    pub w1: ParamId,
}

impl Gae {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_in: usize, hidden: usize, embed_dim: usize) -> Self {
        Self {
            w0: store.insert("gae.0.weight", glorot_uniform(rng, d_in, hidden)),
            w1: store.insert("gae.1.weight", glorot_uniform(rng, hidden, embed_dim)),
        }
    }

    /// `Â · relu(Â X W0) · W1`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, a_norm: &Rc<SparseMatrix>, x: &FeatureInput) -> Result<Var> {
        let w0 = tape.param(store, self.w0);
        let xw = x.project(tape, w0)?;
        let h = tape.spmm(a_norm.clone(), xw)?;
        let h = tape.elementwise(Elementwise::LeakyRelu(0.0), h)?;
        let w1 = tape.param(store, self.w1);
        let hw = tape.matmul(h, w1)?;
        tape.spmm(a_norm.clone(), hw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaeConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralTarget {
    pub embedding: Tensor2,
    pub losses: Vec<f64>,
}

/// Trains an inner-product graph autoencoder on the graph's edges, with one
/// uniformly drawn node pair as a negative for each edge and fresh negatives
/// every step, and returns its embedding as the structural target.
pub fn structural_target(graph: &Graph, x: &FeatureInput, cfg: &GaeConfig) -> Result<StructuralTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let gae = Gae::new(&mut store, &mut rng, graph.d_in(), cfg.hidden, cfg.embed_dim);
    let a_norm = Rc::new(normalize_adjacency(graph.adj()));
    let positives: Vec<(usize, usize)> = graph.undirected_edges().into_iter().map(|(a, b, _)| (a, b)).collect();
    let n = graph.n();
    let mut losses = Vec::with_capacity(cfg.steps);
    if positives.is_empty() || n < 2 {
        if cfg.steps > 0 {
            log::warn!("graph has no edges; structural target left at initialization");
        }
    } else {
        let mut targets = vec![1.0; positives.len()];
        targets.extend(std::iter::repeat_n(0.0, positives.len()));
        let targets = Rc::new(targets);
        for _ in 0..cfg.steps {
            let mut pairs = positives.clone();
            for _ in 0..positives.len() {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                pairs.push((a, b));
            }
            let mut tape = Tape::new();
            let z = gae.embed(&mut tape, &store, &a_norm, x)?;
            let logits = tape.edge_dot(z, Rc::new(pairs))?;
            let loss = tape.bce_with_logits(logits, targets.clone())?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("structural target loss became {value}")));
            }
            losses.push(value);
            tape.backward(loss, &mut store)?;
            store.adam_step(cfg.lr, Adam::default(), None)?;
        }
    }
    let mut tape = Tape::new();
    let z = gae.embed(&mut tape, &store, &a_norm, x)?;
    Ok(StructuralTarget { embedding: tape.value(z).clone(), losses })
}
