use std::collections::HashMap;

use super::ops::{self, Op};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Index of a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, waiting to be
/// folded into the owning [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// Append-only tape of executed primitives.
///
/// Single-writer: build one forward pass, then call [`Graph::backward`]
/// as often as needed.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (images, masks, ...).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A free variable that does receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bring a stored parameter onto the tape. Repeated calls with the same
    /// id return the same `Var`, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let op = if store.is_trainable(id) {
            Op::Param(id)
        } else {
            Op::Constant
        };
        let v = self.push(store.get(id).clone(), op);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// The trainable parameter behind `v`, if it is one.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn record_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Rows flagged as degenerate by an `l2_normalize` node, if `v` is one.
    pub fn degenerate_rows(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::L2Normalize { degenerate, .. } => Some(degenerate),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.op.inputs().is_empty() {
                continue;
            }
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let contributions = ops::backward(&node.op, &node.value, g, self, &needs)?;
            for (v, dv) in contributions {
                debug_assert_eq!(dv.shape(), self.shape(v), "gradient shape for {v:?}");
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradient for every trainable parameter of `store`; parameters the
    /// loss does not reach get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        store
            .trainable_ids()
            .map(|id| {
                let g = self
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::ones(&[2]));
        let q = store.add("q", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let loss = g.sum_all(pv);
        let grads = g.backward(loss).unwrap();
        let all = grads.for_store(&store);
        assert_eq!(all[0].1.data(), &[1.0, 1.0]);
        assert_eq!(all[1].0, q);
        assert_eq!(all[1].1.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_replay_is_identical() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = g.squash(x);
        let z = g.mul(y, y).unwrap();
        let loss = g.sum_all(z);
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        assert_eq!(a.wrt(x).unwrap().data(), b.wrt(x).unwrap().data());
    }

    #[test]
    fn shared_parameter_accumulates_once_per_use() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(p).unwrap().item().unwrap(), 2.0);
    }
}
