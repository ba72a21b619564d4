use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Split};
use super::model::{EncoderConfig, Model, ModelConfig, PoolingChoice};
use super::optim::{PlateauScheduler, Sgd};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, MarginSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate (and step the plateau scheduler) every this many steps.
    pub validate_every: usize,
    pub patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    pub margin_warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            max_steps: 2000,
            validate_every: 200,
            patience: 2,
            decay_factor: 0.1,
            min_lr: 1e-6,
            margin_warmup_steps: 500,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("train.learning_rate", self.learning_rate),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
        ];
        for (field, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be non-negative and finite"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("train.validate_every", "must be positive"));
        }
        if self.margin_warmup_steps == 0 {
            return Err(Error::config("train.margin_warmup_steps", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0, 1)"));
        }
        if self.min_lr.is_nan() || self.min_lr < 0.0 {
            return Err(Error::config("train.min_lr", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Training batch loss before each update.
    pub losses: Vec<f64>,
    /// Learning rate used for each update.
    pub learning_rates: Vec<f64>,
    pub validations: Vec<Validation>,
    pub warnings: Vec<String>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `window` losses.
    pub fn final_mean(&self, window: usize) -> Option<f64> {
        let n = window.min(self.losses.len());
        if n == 0 {
            return None;
        }
        Some(self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: LossTrace,
}

/// Trains a freshly initialized model on the dataset's training split.
pub fn train(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    pooling: &PoolingChoice,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if loss.classes != dataset.spec.num_speakers {
        return Err(Error::config(
            "loss.classes",
            format!(
                "is {} but the dataset has {} speakers",
                loss.classes, dataset.spec.num_speakers
            ),
        ));
    }
    let model_config = ModelConfig {
        feature_dim: dataset.spec.feature_dim,
        encoder: encoder.clone(),
        pooling: pooling.clone(),
        loss: loss.clone(),
    };
    let model = Model::init(model_config, config.seed)?;
    train_model(dataset, model, config)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_model(dataset: &Dataset, mut model: Model, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set: Vec<(&Tensor, usize)> = dataset
        .split(Split::Train)
        .map(|u| (&u.features, u.speaker))
        .collect();
    let heldout: Vec<(&Tensor, usize)> = dataset
        .split(Split::Heldout)
        .map(|u| (&u.features, u.speaker))
        .collect();
    if train_set.is_empty() {
        return Err(Error::EmptyInput("dataset has no training utterances".into()));
    }

    let schedule = MarginSchedule::new(model.config.loss.margin, config.margin_warmup_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut plateau = PlateauScheduler::new(config.decay_factor, config.patience, config.min_lr);
    let mut lr = config.learning_rate;
    let mut trace = LossTrace::default();
    let batch_size = config.batch_size.min(train_set.len());

    for step in 0..config.max_steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]]);
            cursor += 1;
        }
        let m_current = schedule.at(step);
        let out = model.loss_and_grad(&batch, m_current).map_err(|e| match e {
            Error::Numeric(_) => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        for w in out.warnings {
            if !trace.warnings.contains(&w) {
                trace.warnings.push(w);
            }
        }
        trace.losses.push(out.loss);
        trace.learning_rates.push(lr);

        sgd.step(lr, model.tensors_mut(), &out.grads)?;
        model.centers.renormalize();

        if (step + 1) % config.validate_every == 0 && !heldout.is_empty() {
            let val = model.loss(&heldout, model.config.loss.margin)?;
            if !val.is_finite() {
                return Err(Error::Divergence { step, loss: val });
            }
            lr = plateau.observe(val, lr);
            trace.validations.push(Validation {
                step: step + 1,
                loss: val,
                learning_rate: lr,
            });
        }
    }
    Ok(TrainOutcome { model, trace })
}
