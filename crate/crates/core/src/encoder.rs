//! Masking fusion encoder: a graph attention stack over the masked graph, a
//! feed-forward autoencoder over the raw features, and a learnable linear
//! blend `Z = (1 - ε) Z_m + ε Z_ae`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::error::{dim, Error, Result};
use crate::numeric::{Elementwise, ParamId, ParamStore, SparseMatrix, Tape, Tensor2, Var};

pub const GAT_SLOPE: f64 = 0.2;
pub const AE_SLOPE: f64 = 0.2;

/// Glorot/Xavier uniform initialization.
pub fn glorot_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor2::from_vec(rows, cols, data).expect("finite init")
}

/// Node features, kept sparse when most entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureInput {
    Dense(Rc<Tensor2>),
    Sparse(Rc<SparseMatrix>),
}

impl FeatureInput {
    pub fn new(x: &Tensor2) -> Self {
        let nonzero = x.data().iter().filter(|v| **v != 0.0).count();
        if (nonzero as f64) < 0.25 * x.len() as f64 {
            FeatureInput::Sparse(Rc::new(SparseMatrix::from_dense(x)))
        } else {
            FeatureInput::Dense(Rc::new(x.clone()))
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            FeatureInput::Dense(t) => t.rows(),
            FeatureInput::Sparse(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            FeatureInput::Dense(t) => t.cols(),
            FeatureInput::Sparse(s) => s.cols(),
        }
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Self {
        match self {
            FeatureInput::Dense(t) => {
                let mut t = (**t).clone();
                for (i, &k) in keep.iter().enumerate() {
                    if !k {
                        t.row_mut(i).fill(0.0);
                    }
                }
                FeatureInput::Dense(Rc::new(t))
            }
            FeatureInput::Sparse(s) => FeatureInput::Sparse(Rc::new(s.mask_rows(keep))),
        }
    }

    pub fn to_dense(&self) -> Tensor2 {
        match self {
            FeatureInput::Dense(t) => (**t).clone(),
            FeatureInput::Sparse(s) => s.to_dense(),
        }
    }

    /// `X · W` on the tape.
    pub fn project(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            FeatureInput::Dense(t) => {
                let x = tape.constant((**t).clone());
                tape.matmul(x, w)
            }
            FeatureInput::Sparse(s) => tape.spmm(s.clone(), w),
        }
    }
}

/// Either a recorded tape value or raw features.
#[derive(Clone, Copy)]
pub enum LayerInput<'a> {
    Var(Var),
    Features(&'a FeatureInput),
}

impl LayerInput<'_> {
    fn project(self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            LayerInput::Var(x) => tape.matmul(x, w),
            LayerInput::Features(f) => f.project(tape, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: store.insert(&format!("{name}.weight"), glorot_uniform(rng, d_in, d_out)),
            bias: store.insert(&format!("{name}.bias"), Tensor2::zeros(1, d_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: LayerInput<'_>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = x.project(tape, w)?;
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub weight: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub bias: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    /// Concatenate heads (hidden layers) or average them (output layer).
    pub concat: bool,
    pub negative_slope: f64,
    pub activation: Option<Elementwise>,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        head_dim: usize,
        heads: usize,
        concat: bool,
        activation: Option<Elementwise>,
    ) -> Self {
        let out = if concat { heads * head_dim } else { head_dim };
        Self {
            weight: store.insert(&format!("{name}.weight"), glorot_uniform(rng, d_in, heads * head_dim)),
            a_src: store.insert(&format!("{name}.a_src"), glorot_uniform(rng, heads, head_dim)),
            a_dst: store.insert(&format!("{name}.a_dst"), glorot_uniform(rng, heads, head_dim)),
            bias: store.insert(&format!("{name}.bias"), Tensor2::zeros(1, out)),
            heads,
            head_dim,
            concat,
            negative_slope: GAT_SLOPE,
            activation,
        }
    }

    pub fn out_dim(&self) -> usize {
        if self.concat {
            self.heads * self.head_dim
        } else {
            self.head_dim
        }
    }
}

/// Attention over the stored entries of `adj`, which must already contain
/// self-loops (see [`attention_graph`]).
pub fn gat_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GatLayer,
    adj: &Rc<SparseMatrix>,
    h: LayerInput<'_>,
) -> Result<Var> {
    let w = tape.param(store, layer.weight);
    let wh = h.project(tape, w)?;
    if tape.value(wh).rows() != adj.rows() {
        return Err(dim("gat_forward", format!("{} rows for {} nodes", tape.value(wh).rows(), adj.rows())));
    }
    let a_src = tape.param(store, layer.a_src);
    let a_dst = tape.param(store, layer.a_dst);
    let agg = tape.gat_attention(wh, a_src, a_dst, adj.clone(), layer.heads, layer.negative_slope, layer.concat)?;
    let b = tape.param(store, layer.bias);
    let out = tape.add_row(agg, b)?;
    match layer.activation {
        Some(op) => tape.elementwise(op, out),
        None => Ok(out),
    }
}

/// Unit-weight adjacency pattern with a self-loop on every node.
pub fn attention_graph(adj: &SparseMatrix) -> Rc<SparseMatrix> {
    Rc::new(adj.with_self_loops())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatEncoder {
    pub layers: Vec<GatLayer>,
}

impl GatEncoder {
    /// One hidden layer of `heads` concatenated heads with ELU, then a
    /// single-head output layer of width `embed_dim`.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_in: usize, hidden: usize, heads: usize, embed_dim: usize) -> Self {
        let l0 = GatLayer::new(store, rng, "gat.0", d_in, hidden, heads, true, Some(Elementwise::Elu));
        let l1 = GatLayer::new(store, rng, "gat.1", l0.out_dim(), embed_dim, 1, false, None);
        Self { layers: vec![l0, l1] }
    }

    /// `Z_m` from the masked graph: `adj` is the attention graph of the
    /// masked adjacency, `x` the masked features.
    pub fn encode_masked(&self, tape: &mut Tape, store: &ParamStore, adj: &Rc<SparseMatrix>, x: &FeatureInput) -> Result<Var> {
        let mut h = gat_forward(tape, store, &self.layers[0], adj, LayerInput::Features(x))?;
        for layer in &self.layers[1..] {
            h = gat_forward(tape, store, layer, adj, LayerInput::Var(h))?;
        }
        Ok(h)
    }
}

/// Feed-forward autoencoder. Hidden layers use leaky ReLU; the embedding and
/// reconstruction layers are linear.
#[derive(Clone, Debug, PartialEq)]
pub struct AeStack {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
    pub slope: f64,
}

impl AeStack {
    /// Encoder `d_in → hidden[0] → … → embed_dim` and its mirror image.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_in: usize, hidden: &[usize], embed_dim: usize) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("ae.enc.{i}"), w[0], w[1]))
            .collect();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("ae.dec.{i}"), w[0], w[1]))
            .collect();
        Self { encoder, decoder, slope: AE_SLOPE }
    }

    fn run(&self, layers: &[Linear], tape: &mut Tape, store: &ParamStore, input: LayerInput<'_>) -> Result<Var> {
        let mut h = layers[0].forward(tape, store, input)?;
        for layer in &layers[1..] {
            h = tape.elementwise(Elementwise::LeakyRelu(self.slope), h)?;
            h = layer.forward(tape, store, LayerInput::Var(h))?;
        }
        Ok(h)
    }

    /// `Z_ae` from the raw features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: LayerInput<'_>) -> Result<Var> {
        self.run(&self.encoder, tape, store, x)
    }

    /// Reconstruction `X′_a` from an embedding.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        self.run(&self.decoder, tape, store, LayerInput::Var(z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionCoeff {
    pub epsilon: ParamId,
}

pub const EPSILON_INIT: f64 = 0.1;

impl FusionCoeff {
    pub fn new(store: &mut ParamStore, init: f64) -> Self {
        Self { epsilon: store.insert("fusion.epsilon", Tensor2::scalar(init)) }
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        store.value(self.epsilon).data()[0]
    }
}

/// `(1 - ε) Z_m + ε Z_ae`, with ε a 1x1 tape value.
pub fn fuse(tape: &mut Tape, z_m: Var, z_ae: Var, eps: Var) -> Result<Var> {
    if tape.value(z_m).shape() != tape.value(z_ae).shape() {
        return Err(dim("fuse", format!("{:?} vs {:?}", tape.value(z_m).shape(), tape.value(z_ae).shape())));
    }
    let diff = tape.sub(z_ae, z_m)?;
    let scaled = tape.scale_by(diff, eps)?;
    tape.add(z_m, scaled)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GCMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary archive of named tensors.
///
/// ```text
/// magic "GCMACKPT" | version u32 | count u32
/// per tensor: name_len u32 | name (UTF-8) | rows u64 | cols u64 | rows*cols f64
/// ```
///
/// All integers and floats are little-endian; tensors are in name order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut entries: Vec<(&str, &Tensor2)> = store.named_values().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn take_u32(cur: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(cur: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(cur, 8)?.try_into().expect("8 bytes")))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor2)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    if take(&mut cur, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = take_u32(&mut cur)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = take_u32(&mut cur)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = take_u32(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = take_u64(&mut cur)? as usize;
        let cols = take_u64(&mut cur)? as usize;
        let raw = take(&mut cur, rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor2::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if !cur.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Overwrites parameters in `store` with checkpointed values of the same
/// name and shape. Every parameter in the store must be present.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let mut seen = 0;
    for (name, t) in entries {
        let Some(id) = store.id(&name) else {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        };
        if store.value(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {seen} of {} parameters", store.len())));
    }
    Ok(())
}
