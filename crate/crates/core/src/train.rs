//! Mini-batch SGD with momentum, L2 regularization and a linearly decaying
//! learning rate, plus warm-start retraining of pruned networks.
//!
//! The data term is the batch *mean* cross-entropy, so `lambda` plays the
//! role of the regularization weight relative to a per-sample loss.

use std::fmt::Write as _;

use log::debug;

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::data::{Batch, PatchDataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::net::{LayerParams, Network};
use crate::tensor::softmax_xent;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Coefficient of `‖W‖²` in the objective.
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// History cadence in iterations.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            momentum: 0.9,
            lambda: 0.01,
            batch_size: 256,
            iterations: 1000,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::input(format!("base learning rate {} must be > 0", self.base_lr)));
        }
        self.validate_rest()
    }

    fn validate_rest(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::input(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::input("batch size and eval cadence must be positive"));
        }
        Ok(())
    }

    /// Learning rate for 0-based iteration `i`: linear decay from `base_lr`
    /// towards zero at `iterations`.
    pub fn lr_at(&self, i: u64) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.base_lr * (1.0 - i as f64 / self.iterations as f64)
    }
}

/// How retraining derives its schedule from the original one.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrainConfig {
    pub lr_scale: f64,
    pub iteration_fraction: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            lr_scale: 0.1,
            iteration_fraction: 0.25,
        }
    }
}

impl RetrainConfig {
    pub fn derive(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            base_lr: base.base_lr * self.lr_scale,
            iterations: (base.iterations as f64 * self.iteration_fraction).ceil() as u64,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_loss,val_accuracy,lr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.iteration, r.train_loss, r.val_accuracy, r.lr);
        }
        s
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_accuracy)
    }
}

/// Momentum SGD on the objective `data loss + λ‖W‖²`.
pub struct Sgd {
    pub velocity: Vec<LayerParams>,
    pub momentum: f64,
    pub lambda: f64,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, lambda: f64) -> Self {
        let velocity = net
            .layers()
            .iter()
            .map(|l| LayerParams {
                weights: crate::tensor::Tensor::zeros(l.weights.shape()),
                bias: crate::tensor::Tensor::zeros(l.bias.shape()),
            })
            .collect();
        Sgd {
            velocity,
            momentum,
            lambda,
        }
    }

    /// One update `v ← μv − lr(∇ + 2λW)`, `W ← W + v`. Maps masked out in
    /// the network are left untouched (and therefore stay zero). Returns
    /// the batch data loss before the update.
    pub fn step(&mut self, net: &mut Network, batch: &Batch, lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let trace = net.forward_trace(&batch.inputs)?;
        let (loss, grad_logits) = softmax_xent(trace.logits(), &batch.labels)?;
        let grads = net.backward(&trace, &grad_logits)?;
        const NAMES: [&str; 5] = ["c1", "c2", "c3", "fc4", "fc5"];
        for (g, name) in grads.iter().zip(NAMES) {
            g.weights.check_finite(name)?;
            g.bias.check_finite(name)?;
        }
        let masks = net.masks().clone();
        let (mu, decay) = (self.momentum, 2.0 * self.lambda);
        for (i, ((p, g), v)) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.velocity)
            .enumerate()
        {
            let outputs = p.outputs();
            let row = p.weights.len() / outputs;
            for m in 0..outputs {
                if i < 4 && !masks.0[i][m] {
                    continue;
                }
                let r = m * row..(m + 1) * row;
                update(
                    &mut p.weights.data_mut()[r.clone()],
                    &g.weights.data()[r.clone()],
                    &mut v.weights.data_mut()[r],
                    mu,
                    decay,
                    lr,
                );
                update(
                    &mut p.bias.data_mut()[m..m + 1],
                    &g.bias.data()[m..m + 1],
                    &mut v.bias.data_mut()[m..m + 1],
                    mu,
                    decay,
                    lr,
                );
            }
            p.weights
                .check_finite(NAMES[i])
                .map_err(|e| e.context("parameter update"))?;
        }
        Ok(loss)
    }
}

/// Value and gradient of the full objective `mean xent + λ‖W‖²` on one
/// batch, masks respected.
pub fn objective_gradient(net: &Network, batch: &Batch, lambda: f64) -> Result<(f64, Vec<LayerParams>)> {
    let trace = net.forward_trace(&batch.inputs)?;
    let (loss, grad_logits) = softmax_xent(trace.logits(), &batch.labels)?;
    let mut grads = net.backward(&trace, &grad_logits)?;
    for (g, p) in grads.iter_mut().zip(net.layers()) {
        for (g, w) in g.weights.data_mut().iter_mut().zip(p.weights.data()) {
            *g += 2.0 * lambda * w;
        }
        for (g, w) in g.bias.data_mut().iter_mut().zip(p.bias.data()) {
            *g += 2.0 * lambda * w;
        }
    }
    Ok((loss + lambda * net.l2_norm_sq(), grads))
}

#[inline]
fn update(w: &mut [f64], g: &[f64], v: &mut [f64], mu: f64, decay: f64, lr: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v - lr * (g + decay * *w);
        *w += *v;
    }
}

/// Train from scratch (or from the network's current parameters) for
/// `cfg.iterations` steps.
pub fn fit(net: Network, train: &PatchDataset, val: &PatchDataset, cfg: &TrainConfig) -> Result<(Network, History)> {
    cfg.validate()?;
    let ck = Checkpoint {
        network: net,
        state: TrainingState::untrained(cfg.seed),
    };
    let (ck, history) = continue_training(ck, train, val, cfg, None)?;
    Ok((ck.network, history))
}

/// Run the schedule of `cfg` from `ck.state.iteration` up to `stop_at`
/// (default: the end). Batches depend only on `(seed, iteration)`, so an
/// interrupted run resumed from its checkpoint matches an uninterrupted one.
pub fn continue_training(
    ck: Checkpoint,
    train: &PatchDataset,
    val: &PatchDataset,
    cfg: &TrainConfig,
    stop_at: Option<u64>,
) -> Result<(Checkpoint, History)> {
    cfg.validate_rest()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::input("training and validation sets must be non-empty"));
    }
    let Checkpoint { mut network, state } = ck;
    let (mut loss_sum, mut loss_n) = state.loss_window;
    let start = state.iteration;
    let end = stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut sgd = Sgd::new(&network, cfg.momentum, cfg.lambda);
    if let Some(v) = state.velocity {
        if v.iter().map(|l| l.weights.shape()).ne(network.layers().iter().map(|l| l.weights.shape())) {
            return Err(Error::shape("checkpoint velocity does not match the network"));
        }
        sgd.velocity = v;
    }

    let batch_size = cfg.batch_size.min(train.len());
    let per_epoch = (train.len() / batch_size) as u64;
    let mut order: Option<(u64, Vec<usize>)> = None;
    let mut history = History::default();
    let mut lr = state.lr;

    for i in start..end {
        let epoch = i / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, train.epoch_order(cfg.seed, epoch)));
        }
        let k = (i % per_epoch) as usize;
        let idx = &order.as_ref().unwrap().1[k * batch_size..(k + 1) * batch_size];
        let batch = train.batch(idx)?;
        lr = cfg.lr_at(i);
        let loss = sgd
            .step(&mut network, &batch, lr)
            .map_err(|e| e.context(format!("iteration {i}")))?;
        loss_sum += loss;
        loss_n += 1;
        let done = i + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let acc = accuracy(&network, val)?;
            debug!("iter {done}: loss {:.4} val acc {:.4} lr {lr:.6}", loss_sum / loss_n as f64, acc);
            history.rows.push(HistoryRow {
                iteration: done,
                train_loss: loss_sum / loss_n as f64,
                val_accuracy: acc,
                lr,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }

    let state = TrainingState {
        iteration: end.max(start),
        total_iterations: cfg.iterations,
        seed: cfg.seed,
        base_lr: cfg.base_lr,
        lr,
        loss_window: (loss_sum, loss_n),
        velocity: Some(sgd.velocity),
    };
    Ok((Checkpoint { network, state }, history))
}

/// Warm-start retraining: the same procedure as [`fit`] starting from the
/// given (pruned) parameters, with the learning rate and iteration budget
/// scaled down by `retrain`.
pub fn retrain(
    net: Network,
    train: &PatchDataset,
    val: &PatchDataset,
    cfg: &TrainConfig,
    retrain: &RetrainConfig,
) -> Result<(Network, History)> {
    cfg.validate()?;
    if !(retrain.lr_scale >= 0.0) || !(retrain.iteration_fraction >= 0.0) {
        return Err(Error::input("retrain scales must be non-negative"));
    }
    let derived = retrain.derive(cfg);
    let ck = Checkpoint {
        network: net,
        state: TrainingState::untrained(cfg.seed),
    };
    let (ck, history) = continue_training(ck, train, val, &derived, None)?;
    Ok((ck.network, history))
}
