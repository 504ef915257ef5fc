use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::model::{Parameters, ProxyModel};
use super::vocab::TokenizedInput;
use super::ProxyError;
use crate::corpus::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ProxyError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ProxyError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ProxyError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProxyModel,
    /// Mean training cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

struct Adam {
    m: Parameters,
    v: Parameters,
    step: i32,
}

impl Adam {
    fn new(like: &Parameters) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Parameters, grads: &Parameters, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let scale = if cfg.clip_norm > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.clip_norm {
                cfg.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Tokenized `(input, gold index)` pairs for a set of examples.
pub fn prepare_examples(
    model: &ProxyModel,
    examples: &[&Example],
) -> Result<Vec<(TokenizedInput, usize)>, ProxyError> {
    examples
        .iter()
        .map(|ex| {
            let gold = model
                .labels
                .index_of(&ex.gold)
                .ok_or_else(|| ProxyError::UnknownLabel(ex.gold.clone()))?;
            let (_, input) = model.tokenize_text(&ex.display_text(&model.labels));
            Ok((input, gold))
        })
        .collect()
}

/// Fine-tunes a copy of `model` on `examples` with mean cross-entropy and
/// Adam. Zero epochs returns the model untouched.
pub fn train(
    model: &ProxyModel,
    examples: &[&Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ProxyError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ProxyError::EmptyTrainingSet);
    }
    let data = prepare_examples(model, examples)?;
    train_tokenized(model, &data, cfg)
}

pub fn train_tokenized(
    model: &ProxyModel,
    data: &[(TokenizedInput, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ProxyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ProxyError::EmptyTrainingSet);
    }
    let mut model = model.clone();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, loss_trace });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let (input, gold) = &data[i];
                epoch_loss += model.loss_and_grads(input, *gold, weight, &mut grads)?;
            }
            adam.update(&mut model.params, &grads, cfg);
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || !model.params.all_finite() {
            return Err(ProxyError::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { model, loss_trace })
}
