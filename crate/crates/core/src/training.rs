//! Optimiser, learning-rate schedule and the per-batch update.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::losses::HybridLossConfig;
use crate::model::{ExampleGrad, KwsModel, LossValues, BN_MOMENTUM};
use crate::params::{Kind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub half_cycle_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr_min: 1e-8,
            lr_max: 1e-3,
            half_cycle_steps: 20_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || !(self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.half_cycle_steps == 0 {
            return Err(Error::Config("half_cycle_steps must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Triangular2 cyclical learning rate: a triangle of half-width
/// `half_cycle_steps` between `lr_min` and a peak that halves every cycle.
pub fn cyclical_lr(step: u64, cfg: &TrainConfig) -> f64 {
    let h = cfg.half_cycle_steps as f64;
    let s = step as f64;
    let cycle = libm::floor(1.0 + s / (2.0 * h));
    let x = libm::fabs(s / h - 2.0 * cycle + 1.0);
    let amplitude = (cfg.lr_max - cfg.lr_min) * (1.0 - x).max(0.0);
    cfg.lr_min + amplitude / libm::pow(2.0, cycle - 1.0)
}

/// Adam with bias correction. Moment tensors are indexed like the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect()
        };
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).kind != Kind::Trainable {
                continue;
            }
            let g = grads[id.0].data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Mean loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Training-mode gradient of one example under `loss`.
pub fn example_grad(
    model: &KwsModel,
    ex: &TrainingExample,
    loss: &HybridLossConfig,
) -> Result<ExampleGrad> {
    let labels: Vec<Option<usize>> = ex.y_phoneme.iter().map(|&p| Some(p)).collect();
    model.example_grad(
        &ex.features,
        Some(ex.y_word),
        ex.y_speaker,
        Some(&labels),
        loss,
    )
}

/// One optimiser step on the mean loss of `batch`.
///
/// Gradients are summed in batch order, so a fixed batch order gives
/// bit-identical updates.
pub fn train_step(
    model: &mut KwsModel,
    adam: &mut Adam,
    batch: &[&TrainingExample],
    loss: &HybridLossConfig,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let grads = batch
        .iter()
        .map(|ex| example_grad(model, ex, loss))
        .collect::<Result<Vec<_>>>()?;
    apply_example_grads(model, adam, batch, grads, cfg)
}

/// The update of [`train_step`] from precomputed per-example gradients,
/// which must be in batch order.
pub fn apply_example_grads(
    model: &mut KwsModel,
    adam: &mut Adam,
    batch: &[&TrainingExample],
    per_example: Vec<ExampleGrad>,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if per_example.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for a batch of {}",
            per_example.len(),
            batch.len()
        )));
    }
    let lr = cyclical_lr(adam.step, cfg);
    let mut sum: Option<Vec<Tensor>> = None;
    let mut bn = Vec::new();
    let mut totals = LossValues::default();
    let (mut spk, mut phn) = (0.0, 0.0);
    let (mut has_spk, mut has_phn) = (false, false);
    for g in per_example {
        totals.word += g.loss.word;
        totals.total += g.loss.total;
        if let Some(s) = g.loss.speaker {
            spk += s;
            has_spk = true;
        }
        if let Some(p) = g.loss.phoneme {
            phn += p;
            has_phn = true;
        }
        match &mut sum {
            Some(acc) => acc
                .iter_mut()
                .zip(&g.grads)
                .for_each(|(a, b)| a.add_assign(b)),
            None => sum = Some(g.grads),
        }
        bn.extend(g.bn_updates);
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
    let stats_loss = LossValues {
        word: totals.word / n,
        speaker: has_spk.then_some(spk / n),
        phoneme: has_phn.then_some(phn / n),
        total: totals.total / n,
    };
    let grad_norm = libm::sqrt(
        grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum(),
    );
    if !stats_loss.total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} / grad norm {} at step {} in batch [{}]",
            stats_loss.total,
            grad_norm,
            adam.step,
            batch_ids(batch)
        )));
    }
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            grads
                .iter_mut()
                .for_each(|g| g.scale_in_place(clip / grad_norm));
        }
    }
    adam.update(&mut model.store, &grads, lr);
    model.apply_bn_updates(&bn, BN_MOMENTUM);
    Ok(StepStats {
        loss: stats_loss,
        lr,
        grad_norm,
    })
}

fn batch_ids(batch: &[&TrainingExample]) -> String {
    let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
    ids.join(", ")
}
