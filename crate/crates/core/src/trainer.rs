//! Mini-batch fine-tuning of the encoder on labelled examples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::{EncoderWeights, Model};
use crate::par::{self, Exec};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Probability that a training example has a random share of its
    /// non-rationale tokens replaced by `[MASK]`.
    pub mask_augment: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 2e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            mask_augment: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_augment) {
            return Err(Error::Config("mask_augment must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

/// Loss of one example: cross-entropy over classes, or logistic loss for a
/// single-logit model.
fn example_loss<T: Real>(
    model: &Model<T>,
    seq: &TokenSequence,
    label: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut trace = model.forward(seq)?;
    let loss = if model.config().num_outputs == 1 {
        if label > 1 {
            return Err(Error::Contract(format!("label {label} for a binary model")));
        }
        let logit = trace.tape.pick(trace.logits, 0, 0)?;
        trace.tape.logistic_loss(logit, label == 1)?
    } else {
        trace.tape.cross_entropy(trace.logits, label)?
    };
    let value = trace.tape.value(loss).data()[0].as_f64();
    trace.backward(loss)?;
    let grads = trace
        .params
        .iter()
        .zip(model.weights().params())
        .map(|(&v, w)| {
            trace
                .tape
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(w.shape().to_vec()))
        })
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean parameter gradient over a batch. Per-example work may
/// run in parallel; the reduction is always in batch order.
pub fn batch_loss_and_grad<T: Real>(
    model: &Model<T>,
    batch: &[(TokenSequence, usize)],
    exec: Exec,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let parts = par::try_map(exec, batch, |_, (seq, label)| example_loss(model, seq, *label))?;
    let scale = T::one() / T::of(batch.len() as f64);
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.add_assign(g);
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v = *v * scale;
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

struct OptimizerState<T> {
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    fn new(weights: &EncoderWeights<T>) -> Self {
        let zeros = || {
            weights
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, weights: &mut EncoderWeights<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let lr = T::of(cfg.learning_rate);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in weights.params_mut().iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let params = weights.params_mut().iter_mut();
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, &d), m), v) in it {
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w = *w - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Replaces a random share of the non-gold real tokens with `[MASK]`.
fn augment(rng: &mut ChaCha8Rng, ex: &Example, prob: f64) -> TokenSequence {
    let mut seq = ex.seq.clone();
    if prob == 0.0 || rng.random::<f64>() >= prob {
        return seq;
    }
    let share: f64 = rng.random();
    for i in seq.real_positions() {
        if !ex.gold.contains(&i) && rng.random::<f64>() < share {
            seq.ids[i] = MASK_ID;
            seq.tokens[i] = crate::tokenizer::MASK.to_string();
        }
    }
    seq
}

/// Fraction of examples the model classifies correctly.
pub fn accuracy<T: Real>(model: &Model<T>, examples: &[Example], exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = par::try_map(exec, examples, |_, ex| Ok(model.predict(&ex.seq)? == ex.label))?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Trains from `init`. The result depends only on the inputs and
/// `config.seed`, not on the executor.
pub fn train<T: Real>(
    init: EncoderWeights<T>,
    train_set: &[Example],
    validation: &[Example],
    config: &TrainConfig,
    exec: Exec,
) -> Result<(EncoderWeights<T>, TrainReport)> {
    config.validate()?;
    let classes = init.config().num_classes();
    if let Some(ex) = train_set.iter().chain(validation).find(|e| e.label >= classes) {
        return Err(Error::Config(format!(
            "example {} has label {} but the model has {classes} classes",
            ex.id, ex.label
        )));
    }
    let mut model = Model::new(init)?;
    let mut state = OptimizerState::new(model.weights());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let inputs: Vec<(TokenSequence, usize)> = order
            .iter()
            .map(|&i| {
                let ex = &train_set[i];
                (augment(&mut rng, ex, config.mask_augment), ex.label)
            })
            .collect();
        let mut total = 0.0;
        for batch in inputs.chunks(config.batch_size) {
            let (loss, grads) = batch_loss_and_grad(&model, batch, exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            let mut weights = model.into_weights();
            state.apply(config, &mut weights, &grads);
            if weights.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            model = Model::new(weights)?;
        }
        let mean = if train_set.is_empty() {
            0.0
        } else {
            total / train_set.len() as f64
        };
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let train_accuracy = accuracy(&model, train_set, exec)?;
    let validation_accuracy = if validation.is_empty() {
        None
    } else {
        Some(accuracy(&model, validation, exec)?)
    };
    Ok((
        model.into_weights(),
        TrainReport {
            epoch_losses,
            train_accuracy,
            validation_accuracy,
        },
    ))
}
