//! Self-training on soft cluster assignments: a Student-t kernel between
//! embeddings and cluster centers gives Q, a sharpened copy of Q gives the
//! target P, and KL(P || Q) pulls Q toward it.

use std::rc::Rc;

use crate::error::{dim, Error, Result};
use crate::numeric::{Tape, Tensor2, Var};

pub const DEFAULT_DOF: f64 = 1.0;

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Usage("soft assignment needs at least one center".into()));
    }
    Ok(())
}

/// `q_ij ∝ (1 + ||z_i - μ_j||² / v)^-1`, rows normalized.
pub fn soft_assign(tape: &mut Tape, z: Var, centers: Var, v: f64) -> Result<Var> {
    check_k(tape.value(centers).rows())?;
    let d = tape.sq_dist(z, centers)?;
    let t = tape.student_t(d, v)?;
    tape.row_normalize(t)
}

pub fn soft_assign_value(z: &Tensor2, centers: &Tensor2, v: f64) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let (z, c) = (tape.constant(z.clone()), tape.constant(centers.clone()));
    let q = soft_assign(&mut tape, z, c, v)?;
    Ok(tape.value(q).clone())
}

/// `p_ij ∝ q_ij² / f_j` with cluster frequencies `f_j = Σ_i q_ij`, rows normalized.
/// Columns with zero frequency contribute nothing.
pub fn target_distribution(q: &Tensor2) -> Result<Tensor2> {
    let (n, k) = q.shape();
    check_k(k)?;
    let mut freq = vec![0.0; k];
    for i in 0..n {
        for (f, &x) in freq.iter_mut().zip(q.row(i)) {
            *f += x;
        }
    }
    let mut p = Tensor2::zeros(n, k);
    for i in 0..n {
        let row = p.row_mut(i);
        for j in 0..k {
            if freq[j] > 0.0 {
                let x = q.get(i, j);
                row[j] = x * x / freq[j];
            }
        }
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::NumericDomain { op: "target_distribution", detail: format!("row {i} is all zero") });
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(p)
}

/// `Σ p log(p / q)`; P is a constant.
pub fn kl_loss(tape: &mut Tape, p: Rc<Tensor2>, q: Var) -> Result<Var> {
    if p.shape() != tape.value(q).shape() {
        return Err(dim("kl_loss", format!("{:?} vs {:?}", p.shape(), tape.value(q).shape())));
    }
    tape.kl(p, q).map_err(|e| match e {
        Error::NumericDomain { detail, .. } => Error::LossUndefined(format!("KL divergence is infinite: {detail}")),
        other => other,
    })
}

pub fn kl_value(p: &Tensor2, q: &Tensor2) -> Result<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let l = kl_loss(&mut tape, Rc::new(p.clone()), qv)?;
    Ok(tape.scalar(l))
}
