//! Supervised training on dialogue corpora and REINFORCE fine-tuning
//! against a frozen partner.

mod rl;

pub use rl::{compute_returns, reinforce_update, train_rl, BaselineState, RlConfig, RlEpisode, RlReport};

use std::fmt;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Gradients, Graph, ParamStore};
use crate::model::{EncodedExample, ModelError, NegotiationModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Divisor applied to the learning rate each epoch once validation
    /// perplexity has stopped improving.
    pub anneal: f64,
    /// Weight of the output-choice loss.
    pub alpha: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1.0,
            momentum: 0.1,
            clip: 0.5,
            epochs: 30,
            anneal: 5.0,
            alpha: 0.5,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("clip", self.clip),
            ("epochs", self.epochs as f64),
            ("anneal", self.anneal),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with Nesterov momentum: `v ← μv + g`, `θ ← θ − lr (g + μv)`.
#[derive(Debug, Clone)]
pub struct Nesterov {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Nesterov {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.values().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let mu = self.momentum;
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let g = store.grad(id).data().to_vec();
            let value = store.value_mut(id).data_mut();
            for ((x, v), g) in value.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *x -= lr * (g + mu * *v);
            }
        }
    }
}

/// Gradient of one minibatch's mean loss, with that loss. Token NLL is
/// averaged over tokens and output NLL over trainable output positions.
pub fn batch_gradient(
    model: &NegotiationModel,
    batch: &[&EncodedExample],
    alpha: f64,
) -> Result<(f64, Gradients), TrainError> {
    let n_tokens: usize = batch.iter().map(|e| e.tokens.len()).sum();
    let n_outputs = batch
        .iter()
        .filter(|e| has_target(model, e))
        .count()
        * crate::model::NUM_OUTPUTS;
    let mut total = 0.0;
    let mut acc = Gradients::default();
    for ex in batch {
        let grads = {
            let mut g = Graph::new(model.store());
            let l = model.example_loss(&mut g, ex)?;
            let mut loss = g.scale(l.token_nll, 1.0 / n_tokens as f64)?;
            if let (Some(o), true) = (l.output_nll, alpha > 0.0) {
                let w = g.scale(o, alpha / n_outputs as f64)?;
                loss = g.add(loss, w)?;
            }
            total += g.value(loss).item()?;
            g.backward(loss)?
        };
        acc.merge(&grads);
    }
    Ok((total, acc))
}

/// One clipped update from a minibatch; returns the batch loss.
pub(crate) fn supervised_step(
    model: &mut NegotiationModel,
    batch: &[&EncodedExample],
    alpha: f64,
    clip: f64,
    update: impl FnOnce(&mut ParamStore),
) -> Result<f64, TrainError> {
    let (loss, grads) = batch_gradient(model, batch, alpha)?;
    if !loss.is_finite() {
        return Err(TrainError::Compute(ComputeError::NonFinite("batch loss".into())));
    }
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    store.clip_global_norm(clip)?;
    update(store);
    Ok(loss)
}

fn has_target(model: &NegotiationModel, ex: &EncodedExample) -> bool {
    ex.output
        .is_some_and(|o| o.iter().all(|&c| c <= model.config().max_count))
}

/// `exp(Σ token NLL / Σ tokens)` over a dataset.
pub fn perplexity(model: &NegotiationModel, data: &[EncodedExample]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for ex in data {
        nll += model.score_tokens(&ex.goal, &ex.tokens)?.0;
        n += ex.tokens.len();
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    /// Validation perplexity of the parameters after the last epoch.
    pub final_valid_ppl: f64,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# epoch train_loss valid_ppl lr")?;
        for e in &self.epochs {
            writeln!(f, "{} {:.6} {:.6} {:.6e}", e.epoch, e.train_loss, e.valid_ppl, e.lr)?;
        }
        writeln!(f, "# best_epoch={} best_valid_ppl={:.6}", self.best_epoch, self.best_valid_ppl)
    }
}

/// Trains on `train`, validating after every epoch. The learning rate is
/// held until validation perplexity fails to improve, then divided by
/// `cfg.anneal` every following epoch. On return `model` holds the
/// parameters with the best validation perplexity.
pub fn train_supervised<R: Rng + ?Sized>(
    model: &mut NegotiationModel,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &SupervisedConfig,
    rng: &mut R,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut opt = Nesterov::new(model.store(), cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.lr;
    let mut annealing = false;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if annealing {
            lr /= cfg.anneal;
        }
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = match supervised_step(model, &batch, cfg.alpha, cfg.clip, |s| opt.step(s, lr)) {
                Err(TrainError::Compute(ComputeError::NonFinite(_))) => {
                    return Err(TrainError::Diverged { epoch, batch: b })
                }
                r => r?,
            };
            loss_sum += loss;
            batches += 1;
        }
        let valid_ppl = perplexity(model, valid)?;
        if !valid_ppl.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: batches });
        }
        let train_loss = loss_sum / batches as f64;
        info!("epoch {epoch}: train_loss={train_loss:.4} valid_ppl={valid_ppl:.4} lr={lr}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_ppl,
            lr,
        });
        match &best {
            Some((_, b, _)) if valid_ppl >= *b => annealing = true,
            _ => best = Some((epoch, valid_ppl, model.store().clone())),
        }
    }
    let final_valid_ppl = epochs.last().map_or(f64::NAN, |e| e.valid_ppl);
    let (best_epoch, best_valid_ppl, store) = best.expect("at least one epoch");
    model.store_mut().copy_values_from(&store)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_valid_ppl,
        final_valid_ppl,
    })
}
