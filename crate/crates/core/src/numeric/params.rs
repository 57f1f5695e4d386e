use std::collections::BTreeMap;

use crate::error::{dim, Error, Result};
use crate::numeric::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
    steps: u64,
    trainable: bool,
}

/// Named parameters with gradient and Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter, or replaces the value of an existing one
    /// (resetting its gradient and moments).
    pub fn insert(&mut self, name: &str, value: Tensor2) -> ParamId {
        let (r, c) = value.shape();
        let slot = Slot {
            name: name.to_string(),
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            value,
            steps: 0,
            trainable: true,
        };
        match self.by_name.get(name) {
            Some(&id) => {
                let trainable = self.slots[id.0].trainable;
                self.slots[id.0] = Slot { trainable, ..slot };
                id
            }
            None => {
                let id = ParamId(self.slots.len());
                self.slots.push(slot);
                self.by_name.insert(name.to_string(), id);
                id
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0].grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.grad.shape() != g.shape() {
            return Err(dim("accumulate_grad", format!("{}: {:?} vs {:?}", slot.name, slot.grad.shape(), g.shape())));
        }
        slot.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam update over the trainable parameters in `ids` (all when `None`),
    /// then clears every gradient.
    pub fn adam_step(&mut self, lr: f64, opt: Adam, ids: Option<&[ParamId]>) -> Result<()> {
        let selected: Vec<usize> = match ids {
            Some(ids) => ids.iter().map(|id| id.0).collect(),
            None => (0..self.slots.len()).collect(),
        };
        for &i in &selected {
            let slot = &self.slots[i];
            if slot.trainable && !slot.grad.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for {}", slot.name)));
            }
        }
        for &i in &selected {
            let slot = &mut self.slots[i];
            if !slot.trainable {
                continue;
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let bc1 = 1.0 - opt.beta1.powi(t);
            let bc2 = 1.0 - opt.beta2.powi(t);
            let Slot { value, grad, m, v, .. } = slot;
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Snapshot of every `(name, value)` pair in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }
}
