//! Adam optimisation and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{descriptor_loss, LossConfig};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor};
use crate::{Branch, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pairs per batch (`M`).
    #[serde(alias = "batch_M")]
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for hard negative mining, got {}",
                self.batch_size
            )));
        }
        let checks = [
            ("lr", self.lr >= 0.0),
            ("adam_beta1", (0.0..1.0).contains(&self.adam_beta1)),
            ("adam_beta2", (0.0..1.0).contains(&self.adam_beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{name} is out of range")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    ids: Vec<ParamId>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        AdamState {
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Rebuild from saved moments, one pair per trainable tensor in store
    /// order.
    pub fn restore(store: &ParamStore<T>, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        if m.len() != ids.len() || v.len() != ids.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "optimiser state has {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                ids.len()
            )));
        }
        for ((id, m), v) in ids.iter().zip(&m).zip(&v) {
            let shape = store.get(*id).shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "optimiser state for {} has the wrong shape",
                    store.name(*id)
                )));
            }
        }
        Ok(AdamState { step, m, v, ids })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

/// One Adam update with bias correction, followed by decoupled weight
/// decay `lr · weight_decay · p`. `grads` must list every id in `state`.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} optimiser slots",
            grads.len(),
            state.ids.len()
        )));
    }
    for (id, g) in grads {
        if !g.all_finite() {
            let bad = g.data().iter().filter(|x| !x.is_finite()).count();
            return Err(Error::Numerical(format!(
                "non-finite gradient in {} ({bad} of {} entries) at step {}",
                store.name(*id),
                g.len(),
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(config.adam_beta1), T::of(config.adam_beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(config.lr);
    let decay = T::of(config.lr * config.weight_decay);
    let eps = T::of(config.adam_eps);
    for (slot, (id, g)) in grads.iter().enumerate() {
        if state.ids[slot] != *id {
            return Err(Error::Contract(format!("gradient order differs at {}", store.name(*id))));
        }
        let p = store.get_mut(*id);
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} for parameter of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - decay * *p;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Train-mode loss graph of one batch.
fn batch_graph<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(Graph<T>, crate::tensor::Var)> {
    let mut g = Graph::new();
    let ground = g.constant(batch.ground.cast());
    let satellite = g.constant(batch.satellite.cast());
    let dg = model.forward_branch(&mut g, Branch::Ground, ground, Mode::Train)?;
    let ds = model.forward_branch(&mut g, Branch::Satellite, satellite, Mode::Train)?;
    let l = descriptor_loss(&mut g, dg, ds, loss)?;
    Ok((g, l))
}

/// Train-mode loss of a batch without touching parameters or statistics.
pub fn batch_loss<T: Real>(model: &Model<T>, batch: &Batch, loss: &LossConfig) -> Result<f64> {
    let (g, l) = batch_graph(model, batch, loss)?;
    Ok(g.value(l).item()?.to_f64().unwrap_or(f64::NAN))
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            model,
            adam,
            config,
            loss,
            epoch: 0,
        })
    }

    /// One forward/backward/update on `batch`, returning its loss.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let (mut g, l) = batch_graph(&self.model, batch, &self.loss)?;
        let value = g.value(l).item()?.to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {value} at epoch {} step {}",
                self.epoch + 1,
                self.adam.step + 1
            )));
        }
        let grads = g.backward(l)?.for_store(&self.model.store);
        adam_step(&mut self.model.store, &grads, &mut self.adam, &self.config)?;
        let updates = g.take_bn_updates();
        self.model.store.apply_bn_updates(updates);
        Ok(value)
    }

    /// Batches of the next epoch, in order.
    pub fn epoch_plan(&self, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
        epoch_batches(dataset.len(), self.config.batch_size, self.config.seed, self.epoch)
    }

    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics> {
        let plan = self.epoch_plan(dataset)?;
        let mut total = 0.0;
        for idx in &plan {
            let batch = dataset.batch(idx)?;
            total += self.step(&batch)?;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_loss: total / plan.len() as f64,
            batches: plan.len(),
        })
    }

    /// Mean train-mode loss over the batches the next epoch would use.
    pub fn evaluate_loss(&self, dataset: &Dataset) -> Result<f64> {
        let plan = self.epoch_plan(dataset)?;
        let mut total = 0.0;
        for idx in &plan {
            total += batch_loss(&self.model, &dataset.batch(idx)?, &self.loss)?;
        }
        Ok(total / plan.len() as f64)
    }
}
