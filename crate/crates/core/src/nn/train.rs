use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::{stack_trials, EvalWorkspace, Network, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, softmax, RunningStats, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Fraction of the training trials held out for early stopping; 0 disables.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch, weighted by actual batch sizes.
    pub train_loss: Vec<f64>,
    /// Eval-mode loss on the held-out split (empty when disabled).
    pub validation_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: u64,
    pub train_trials: usize,
    pub validation_trials: usize,
}

struct Snapshot<T> {
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
}

fn snapshot<T: Scalar>(net: &Network<T>) -> Snapshot<T> {
    Snapshot {
        params: net.parameters().into_iter().map(|p| {
            let mut p = p.clone();
            p.clear_grad();
            p
        }).collect(),
        stats: net.blocks.iter().map(|b| b.norm.stats.clone()).collect(),
    }
}

fn restore<T: Scalar>(net: &mut Network<T>, snap: Snapshot<T>) {
    for (dst, src) in net.parameters_mut().into_iter().zip(snap.params) {
        *dst = src;
    }
    for (b, s) in net.blocks.iter_mut().zip(snap.stats) {
        b.norm.stats = s;
    }
}

fn eval_loss<T: Scalar>(net: &Network<T>, inputs: &[&[f32]], labels: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut ws = EvalWorkspace::default();
    for (xs, ys) in inputs.chunks(batch).zip(labels.chunks(batch)) {
        let probs = softmax(&net.forward_eval_with(&stack_trials::<T>(xs)?, &mut ws)?)?;
        total += cross_entropy(&probs, ys)?.as_f64() * xs.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Minimises mean cross-entropy with Adam over seeded, epoch-shuffled
/// minibatches. The last partial minibatch is kept.
///
/// With a validation split, training stops after `patience` epochs without
/// improvement and the best-validation parameters are restored.
pub fn train<T: Scalar>(net: &mut Network<T>, inputs: &[&[f32]], labels: &[usize], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Empty("training set has no trials".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::shape(format!("{} trials but {} labels", inputs.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {bad} is not a class index")));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        log::warn!("training set contains a single class (counts {counts:?})");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let n_val = (inputs.len() as f64 * cfg.validation_fraction).round() as usize;
    let (val_idx, mut train_idx) = if n_val > 0 && n_val < inputs.len() {
        order.shuffle(&mut rng);
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    } else {
        (Vec::new(), order)
    };
    let val_inputs: Vec<&[f32]> = val_idx.iter().map(|&i| inputs[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let adam = cfg.adam();
    let mut state = OptimizerState::new(&net.parameters());
    let mut history = TrainHistory {
        train_trials: train_idx.len(),
        validation_trials: val_idx.len(),
        ..Default::default()
    };
    let mut best: Option<(f64, Snapshot<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = stack_trials::<T>(&xs)?;
            net.zero_grad();
            let loss = net.loss_and_backward(&x, &ys)?;
            let mut params = net.parameters_mut();
            adam_step(&mut params, &mut state, &adam)?;
            total += loss.as_f64() * batch.len() as f64;
        }
        history.train_loss.push(total / train_idx.len() as f64);
        history.steps = state.step;
        log::debug!("epoch {epoch}: train loss {:.5}", total / train_idx.len() as f64);

        if val_inputs.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let v = eval_loss(net, &val_inputs, &val_labels, cfg.batch_size)?;
        history.validation_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, snapshot(net)));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(net, snap);
    }
    net.drop_caches();
    for p in net.parameters_mut() {
        p.clear_grad();
    }
    net.meta.train = Some(cfg.clone());
    Ok(history)
}
