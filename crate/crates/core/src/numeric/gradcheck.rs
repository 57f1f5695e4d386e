//! Central finite-difference checks for losses built on a [`Tape`].

use crate::error::Result;
use crate::numeric::{ParamStore, Tape, Tensor2, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(parameter name, relative error)` for every trainable parameter. The
    /// denominator is floored at `1e-6`, so a parameter whose true gradient
    /// is zero is judged on the absolute difference.
    pub per_param: Vec<(String, f64)>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all entries.
    pub rel_err: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(self.rel_err, f64::max)
    }
}

fn rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step `h` on every trainable entry of `store`.
pub fn check<F>(store: &mut ParamStore, h: f64, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    store.zero_grad();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let analytic: Vec<Tensor2> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };
    let mut per_param = Vec::new();
    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    for (&id, a) in ids.iter().zip(&analytic) {
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_param.push((store.name(id).to_string(), rel(a.data(), &numeric, 1e-6)));
        all_a.extend_from_slice(a.data());
        all_n.extend(numeric);
    }
    Ok(GradCheck { per_param, rel_err: rel(&all_a, &all_n, 1e-12) })
}
