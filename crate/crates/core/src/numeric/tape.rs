//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation records its inputs and whatever forward state its
//! gradient rule needs. [`Tape::backward`] walks the tape once in reverse,
//! pushes parameter gradients into a [`ParamStore`] and clears the tape.

use std::rc::Rc;

use crate::error::{dim, Error, Result};
use crate::numeric::tensor::gemm;
use crate::numeric::{ParamId, ParamStore, SparseMatrix, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise and row-wise maps with registered gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    LeakyRelu(f64),
    Elu,
    Exp,
    Log,
    SoftmaxRow,
    /// Rows divided by `norm + 1e-12`.
    L2NormalizeRow,
}

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
struct GatState {
    adj: Rc<SparseMatrix>,
    heads: usize,
    slope: f64,
    concat: bool,
    pre: Vec<f64>,
    alpha: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    SpMM(Rc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Unary(Var, Elementwise),
    GatherRows(Var, Rc<Vec<usize>>),
    ReplaceRows(Var, Rc<Vec<usize>>, Var),
    Sum(Var),
    Mean(Var),
    MseConst(Var, Rc<Tensor2>),
    XentDiag(Var),
    SqDist(Var, Var),
    StudentT(Var, f64),
    RowNormalize(Var),
    KlConst(Rc<Tensor2>, Var),
    EdgeDot(Var, Rc<Vec<(usize, usize)>>),
    BceLogits(Var, Rc<Vec<f64>>),
    Gat { wh: Var, a_src: Var, a_dst: Var, state: Box<GatState> },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn spmm(&mut self, a: Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let value = a.spmm(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SpMM(a, x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// `x + 1 * bias` with `bias` a single row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(dim("add_row", format!("{:?} plus row {:?}", xv.shape(), bv.shape())));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `x * s` for a 1x1 variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).as_scalar().ok_or_else(|| dim("scale_by", "scale must be 1x1"))?;
        let value = self.value(x).scale(sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn elementwise(&mut self, op: Elementwise, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = match op {
            Elementwise::LeakyRelu(slope) => xv.map(|v| leaky(v, slope)),
            Elementwise::Elu => xv.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Elementwise::Exp => xv.map(f64::exp),
            Elementwise::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::NumericDomain { op: "log", detail: format!("input {bad} <= 0") });
                }
                xv.map(f64::ln)
            }
            Elementwise::SoftmaxRow => softmax_rows(xv),
            Elementwise::L2NormalizeRow => xv.l2_normalize_rows(NORM_EPS),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unary(x, op), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(dim("gather_rows", format!("row {bad} of {}", xv.rows())));
        }
        let value = xv.select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, idx), rg))
    }

    /// Copy of `x` with the rows in `idx` overwritten by the single-row `token`.
    pub fn replace_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, token: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        if tv.rows() != 1 || tv.cols() != xv.cols() {
            return Err(dim("replace_rows", format!("token {:?} for {:?}", tv.shape(), xv.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(dim("replace_rows", format!("row {bad} of {}", xv.rows())));
        }
        let mut value = xv.clone();
        for &i in idx.iter() {
            value.row_mut(i).copy_from_slice(tv.data());
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(value, Op::ReplaceRows(x, idx, token), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor2::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::LossUndefined("mean of empty tensor".into()));
        }
        let value = Tensor2::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Rc<Tensor2>) -> Result<Var> {
        let xv = self.value(x);
        same_shape("mse", xv, &target)?;
        if xv.is_empty() {
            return Err(Error::LossUndefined("mse of empty tensor".into()));
        }
        let sq: f64 = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor2::scalar(sq / xv.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MseConst(x, target), rg))
    }

    /// `-mean_i log softmax(logits_i)_i` for a square logit matrix: each row's
    /// positive is its diagonal entry.
    pub fn xent_diag(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != lv.cols() {
            return Err(dim("xent_diag", format!("logits must be square, got {:?}", lv.shape())));
        }
        let m = lv.rows();
        if m == 0 {
            return Err(Error::LossUndefined("no rows to score".into()));
        }
        let mut total = 0.0;
        for i in 0..m {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[i];
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor2::scalar(total / m as f64), Op::XentDiag(logits), rg))
    }

    /// Pairwise squared distances `||z_i - mu_j||^2`.
    pub fn sq_dist(&mut self, z: Var, mu: Var) -> Result<Var> {
        let (zv, mv) = (self.value(z), self.value(mu));
        if zv.cols() != mv.cols() {
            return Err(dim("sq_dist", format!("{:?} vs {:?}", zv.shape(), mv.shape())));
        }
        let mut out = Tensor2::zeros(zv.rows(), mv.rows());
        for i in 0..zv.rows() {
            for j in 0..mv.rows() {
                let d: f64 = zv.row(i).iter().zip(mv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                out.set(i, j, d);
            }
        }
        let rg = self.rg(z) || self.rg(mu);
        Ok(self.push(out, Op::SqDist(z, mu), rg))
    }

    /// `(1 + d / dof)^-1` applied to squared distances.
    pub fn student_t(&mut self, d: Var, dof: f64) -> Result<Var> {
        if !(dof > 0.0) {
            return Err(Error::Parameter(format!("degrees of freedom must be > 0, got {dof}")));
        }
        let value = self.value(d).map(|x| 1.0 / (1.0 + x / dof));
        let rg = self.rg(d);
        Ok(self.push(value, Op::StudentT(d, dof), rg))
    }

    /// Rows divided by their sums.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::NumericDomain { op: "row_normalize", detail: format!("row {r} sums to {s}") });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowNormalize(x), rg))
    }

    /// `sum p log(p / q)` with `p` constant; `0 log 0 = 0`.
    pub fn kl(&mut self, p: Rc<Tensor2>, q: Var) -> Result<Var> {
        let qv = self.value(q);
        same_shape("kl", &p, qv)?;
        let mut total = 0.0;
        for (&pi, &qi) in p.data().iter().zip(qv.data()) {
            if pi > 0.0 {
                if !(qi > 0.0) {
                    return Err(Error::NumericDomain { op: "kl", detail: "q = 0 where p > 0".into() });
                }
                total += pi * (pi / qi).ln();
            }
        }
        let rg = self.rg(q);
        Ok(self.push(Tensor2::scalar(total), Op::KlConst(p, q), rg))
    }

    /// Column of inner products `z_a . z_b` for each listed pair.
    pub fn edge_dot(&mut self, z: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let zv = self.value(z);
        let mut out = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs.iter() {
            if a >= zv.rows() || b >= zv.rows() {
                return Err(dim("edge_dot", format!("pair ({a},{b}) for {} rows", zv.rows())));
            }
            out.push(zv.row(a).iter().zip(zv.row(b)).map(|(x, y)| x * y).sum());
        }
        let rg = self.rg(z);
        Ok(self.push(Tensor2::raw(pairs.len(), 1, out), Op::EdgeDot(z, pairs), rg))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Vec<f64>>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || lv.is_empty() {
            return Err(dim("bce_with_logits", format!("{} logits vs {} targets", lv.len(), targets.len())));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor2::scalar(total / lv.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceLogits(logits, targets), rg))
    }

    /// Multi-head graph attention aggregation.
    ///
    /// `wh` holds the projected features (n x heads*f). For every head the
    /// coefficient of edge i <- j is the row softmax of
    /// `leaky_relu(a_dst . wh_i + a_src . wh_j)` over the stored neighbors of `i`.
    /// Heads are concatenated (`concat`) or averaged.
    pub fn gat_attention(
        &mut self,
        wh: Var,
        a_src: Var,
        a_dst: Var,
        adj: Rc<SparseMatrix>,
        heads: usize,
        slope: f64,
        concat: bool,
    ) -> Result<Var> {
        let (whv, sv, dv) = (self.value(wh), self.value(a_src), self.value(a_dst));
        let n = whv.rows();
        if heads == 0 || whv.cols() % heads != 0 {
            return Err(dim("gat", format!("{} columns not divisible into {heads} heads", whv.cols())));
        }
        let f = whv.cols() / heads;
        if sv.shape() != (heads, f) || dv.shape() != (heads, f) {
            return Err(dim("gat", format!("attention vectors must be {heads}x{f}")));
        }
        if adj.rows() != n || adj.cols() != n {
            return Err(dim("gat", format!("adjacency {}x{} for {n} nodes", adj.rows(), adj.cols())));
        }
        let mut src = vec![0.0; n * heads];
        let mut dst = vec![0.0; n * heads];
        for i in 0..n {
            let row = whv.row(i);
            for h in 0..heads {
                let block = &row[h * f..(h + 1) * f];
                src[i * heads + h] = block.iter().zip(sv.row(h)).map(|(a, b)| a * b).sum();
                dst[i * heads + h] = block.iter().zip(dv.row(h)).map(|(a, b)| a * b).sum();
            }
        }
        let nnz = adj.nnz();
        let mut pre = vec![0.0; nnz * heads];
        let mut alpha = vec![0.0; nnz * heads];
        let out_cols = if concat { heads * f } else { f };
        let mut out = Tensor2::zeros(n, out_cols);
        let rp = adj.row_ptr();
        let ci = adj.col_idx();
        let head_scale = if concat { 1.0 } else { 1.0 / heads as f64 };
        for i in 0..n {
            let span = rp[i]..rp[i + 1];
            if span.is_empty() {
                continue;
            }
            for h in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for k in span.clone() {
                    let p = dst[i * heads + h] + src[ci[k] * heads + h];
                    pre[k * heads + h] = p;
                    max = max.max(leaky(p, slope));
                }
                let mut total = 0.0;
                for k in span.clone() {
                    let e = (leaky(pre[k * heads + h], slope) - max).exp();
                    alpha[k * heads + h] = e;
                    total += e;
                }
                let off = if concat { h * f } else { 0 };
                for k in span.clone() {
                    let a = alpha[k * heads + h] / total;
                    alpha[k * heads + h] = a;
                    let j = ci[k];
                    let w = a * head_scale;
                    let srow = &whv.row(j)[h * f..(h + 1) * f];
                    for (o, v) in out.row_mut(i)[off..off + f].iter_mut().zip(srow) {
                        *o += w * v;
                    }
                }
            }
        }
        let rg = self.rg(wh) || self.rg(a_src) || self.rg(a_dst);
        let state = Box::new(GatState { adj, heads, slope, concat, pre, alpha });
        Ok(self.push(out, Op::Gat { wh, a_src, a_dst, state }, rg))
    }

    /// Attention coefficients (edge-major, `heads` per stored entry) of a
    /// recorded attention node.
    pub fn attention_coefficients(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Gat { state, .. } => Some(&state.alpha),
            _ => None,
        }
    }

    /// Reverse sweep from the scalar `loss`; parameter gradients are added to
    /// `store` and the tape is cleared.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, store)?;
        }
        self.nodes.clear();
        Ok(())
    }

    /// Discards recorded nodes without differentiating.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn propagate(&self, i: usize, g: Tensor2, grads: &mut [Option<Tensor2>], store: &mut ParamStore) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Tensor2| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, &g)?,
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, gemm(&g, false, val(*b), true));
                }
                if rg(*b) {
                    acc(*b, gemm(val(*a), true, &g, false));
                }
            }
            Op::SpMM(m, x) => acc(*x, m.spmm_transposed(&g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, bias) => {
                if rg(*bias) {
                    let mut col = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in col.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*bias, col);
                }
                acc(*x, g);
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::ScaleBy(x, s) => {
                let sv = val(*s).data()[0];
                if rg(*s) {
                    let d: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor2::scalar(d));
                }
                acc(*x, g.scale(sv));
            }
            Op::Unary(x, op) => {
                let xv = val(*x);
                let yv = &nodes[i].value;
                let dx = match *op {
                    Elementwise::LeakyRelu(slope) => g.zip_map(xv, |gi, xi| gi * leaky_grad(xi, slope)),
                    Elementwise::Elu => g.zip_map(xv, |gi, xi| if xi > 0.0 { gi } else { gi * xi.exp() }),
                    Elementwise::Exp => g.zip_map(yv, |gi, yi| gi * yi),
                    Elementwise::Log => g.zip_map(xv, |gi, xi| gi / xi),
                    Elementwise::SoftmaxRow => {
                        let mut dx = g.zip_map(yv, |gi, yi| gi * yi);
                        for r in 0..dx.rows() {
                            let dot: f64 = dx.row(r).iter().sum();
                            let yr = yv.row(r);
                            for (d, &y) in dx.row_mut(r).iter_mut().zip(yr) {
                                *d -= y * dot;
                            }
                        }
                        dx
                    }
                    Elementwise::L2NormalizeRow => {
                        let mut dx = g.clone();
                        for r in 0..dx.rows() {
                            let xr = xv.row(r);
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let s = norm + NORM_EPS;
                            let gr = g.row(r);
                            let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let coef = if norm > 0.0 { xg / (s * s * norm) } else { 0.0 };
                            for ((d, &gv), &xvv) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                                *d = gv / s - xvv * coef;
                            }
                        }
                        dx
                    }
                };
                acc(*x, dx);
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::ReplaceRows(x, idx, token) => {
                if rg(*token) {
                    let mut dt = Tensor2::zeros(1, g.cols());
                    let mut seen = vec![false; g.rows()];
                    for &r in idx.iter() {
                        if !std::mem::replace(&mut seen[r], true) {
                            for (o, v) in dt.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    acc(*token, dt);
                }
                let mut dx = g;
                for &r in idx.iter() {
                    dx.row_mut(r).fill(0.0);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Tensor2::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MseConst(x, t) => {
                let k = 2.0 * g.data()[0] / t.len() as f64;
                acc(*x, val(*x).zip_map(t, |a, b| k * (a - b)));
            }
            Op::XentDiag(l) => {
                let lv = val(*l);
                let m = lv.rows();
                let mut dl = softmax_rows(lv);
                for r in 0..m {
                    let v = dl.get(r, r);
                    dl.set(r, r, v - 1.0);
                }
                acc(*l, dl.scale(g.data()[0] / m as f64));
            }
            Op::SqDist(z, mu) => {
                let (zv, mv) = (val(*z), val(*mu));
                let mut dz = Tensor2::zeros(zv.rows(), zv.cols());
                let mut dmu = Tensor2::zeros(mv.rows(), mv.cols());
                for a in 0..zv.rows() {
                    for b in 0..mv.rows() {
                        let w = 2.0 * g.get(a, b);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..zv.cols() {
                            let diff = w * (zv.get(a, c) - mv.get(b, c));
                            dz.row_mut(a)[c] += diff;
                            dmu.row_mut(b)[c] -= diff;
                        }
                    }
                }
                if rg(*mu) {
                    acc(*mu, dmu);
                }
                acc(*z, dz);
            }
            Op::StudentT(d, dof) => {
                let y = &nodes[i].value;
                acc(*d, g.zip_map(y, |gi, yi| -gi * yi * yi / dof));
            }
            Op::RowNormalize(x) => {
                let xv = val(*x);
                let y = &nodes[i].value;
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let s: f64 = xv.row(r).iter().sum();
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    dx.row_mut(r).iter_mut().for_each(|v| *v = (*v - dot) / s);
                }
                acc(*x, dx);
            }
            Op::KlConst(p, q) => {
                let k = g.data()[0];
                acc(*q, p.zip_map(val(*q), |pi, qi| if pi > 0.0 { -k * pi / qi } else { 0.0 }));
            }
            Op::EdgeDot(z, pairs) => {
                let zv = val(*z);
                let mut dz = Tensor2::zeros(zv.rows(), zv.cols());
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    let w = g.data()[k];
                    for c in 0..zv.cols() {
                        let (za, zb) = (zv.get(a, c), zv.get(b, c));
                        dz.row_mut(a)[c] += w * zb;
                        dz.row_mut(b)[c] += w * za;
                    }
                }
                acc(*z, dz);
            }
            Op::BceLogits(l, t) => {
                let lv = val(*l);
                let k = g.data()[0] / lv.len() as f64;
                let d: Vec<f64> =
                    lv.data().iter().zip(t.iter()).map(|(&x, &y)| k * (1.0 / (1.0 + (-x).exp()) - y)).collect();
                acc(*l, Tensor2::raw(lv.rows(), lv.cols(), d));
            }
            Op::Gat { wh, a_src, a_dst, state } => {
                let (dwh, dsrc, ddst) = gat_backward(val(*wh), val(*a_src), val(*a_dst), state, &g);
                if rg(*a_src) {
                    acc(*a_src, dsrc);
                }
                if rg(*a_dst) {
                    acc(*a_dst, ddst);
                }
                acc(*wh, dwh);
            }
        }
        Ok(())
    }
}

fn gat_backward(
    wh: &Tensor2,
    a_src: &Tensor2,
    a_dst: &Tensor2,
    st: &GatState,
    g: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let n = wh.rows();
    let heads = st.heads;
    let f = wh.cols() / heads;
    let rp = st.adj.row_ptr();
    let ci = st.adj.col_idx();
    let head_scale = if st.concat { 1.0 } else { 1.0 / heads as f64 };
    let mut dwh = Tensor2::zeros(n, wh.cols());
    let mut dsrc_node = vec![0.0; n * heads];
    let mut ddst_node = vec![0.0; n * heads];
    let mut dalpha = Vec::new();
    for i in 0..n {
        let span = rp[i]..rp[i + 1];
        for h in 0..heads {
            let off = if st.concat { h * f } else { 0 };
            let gi: Vec<f64> = g.row(i)[off..off + f].iter().map(|v| v * head_scale).collect();
            dalpha.clear();
            let mut weighted = 0.0;
            for k in span.clone() {
                let j = ci[k];
                let a = st.alpha[k * heads + h];
                let whj = &wh.row(j)[h * f..(h + 1) * f];
                let da: f64 = gi.iter().zip(whj).map(|(x, y)| x * y).sum();
                dalpha.push(da);
                weighted += a * da;
                for (o, v) in dwh.row_mut(j)[h * f..(h + 1) * f].iter_mut().zip(&gi) {
                    *o += a * v;
                }
            }
            for (slot, k) in span.clone().enumerate() {
                let a = st.alpha[k * heads + h];
                let de = a * (dalpha[slot] - weighted);
                let dpre = de * leaky_grad(st.pre[k * heads + h], st.slope);
                ddst_node[i * heads + h] += dpre;
                dsrc_node[ci[k] * heads + h] += dpre;
            }
        }
    }
    let mut dsrc = Tensor2::zeros(heads, f);
    let mut ddst = Tensor2::zeros(heads, f);
    for i in 0..n {
        for h in 0..heads {
            let (ds, dd) = (dsrc_node[i * heads + h], ddst_node[i * heads + h]);
            if ds == 0.0 && dd == 0.0 {
                continue;
            }
            for c in 0..f {
                let v = wh.get(i, h * f + c);
                dsrc.row_mut(h)[c] += ds * v;
                ddst.row_mut(h)[c] += dd * v;
                dwh.row_mut(i)[h * f + c] += ds * a_src.get(h, c) + dd * a_dst.get(h, c);
            }
        }
    }
    (dwh, dsrc, ddst)
}
