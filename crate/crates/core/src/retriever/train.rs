use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::EmbeddingHead;
use super::loss::{cosface_backward, FeatureTriplet, HeadGradient};
use super::triplet::sample_triplets;
use super::CosFaceConfig;
use crate::corpus::SliceRecord;
use crate::error::{Error, Result};
use crate::featurizer::FeatureSet;

/// Cosine decay from `base` at step 0 towards 0 at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update of `params` in place at learning rate `lr`.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p -= lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: EmbeddingHead,
    /// Mean batch loss per epoch, measured before each update.
    pub loss_history: Vec<f64>,
}

/// Trains a fresh head on same-view triplets drawn from `records`.
///
/// An epoch is `ceil(records / batch_size)` optimizer steps; the learning
/// rate follows [`cosine_lr`] over all steps of the run.
pub fn train(records: &[SliceRecord], features: &FeatureSet, config: &CosFaceConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let feature_dim = features
        .dim()
        .ok_or_else(|| Error::InvalidConfig("no feature vectors supplied".into()))?;
    for r in records {
        if features.get(&r.slice_id).is_none() {
            return Err(Error::MissingFeature(r.slice_id.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = EmbeddingHead::init(config.embed_dim, feature_dim, &mut rng)?;
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            head,
            loss_history: history,
        });
    }

    let steps_per_epoch = records.len().div_ceil(config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = AdamW::new(head.weight.len() + head.bias.len(), config.weight_decay);
    let lookup = |id: &str| features.get(id).map(|f| f.values.as_slice()).expect("checked above");

    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let triplets = sample_triplets(records, config.batch_size, &mut rng)?;
            let batch: Vec<FeatureTriplet<'_>> = triplets
                .iter()
                .map(|t| FeatureTriplet {
                    anchor: lookup(&t.anchor),
                    positive: lookup(&t.positive),
                    negative: lookup(&t.negative),
                })
                .collect();
            let (loss, grad) = match cosface_backward(&head, &batch, config.s, config.m) {
                Ok(out) => out,
                Err(Error::DegenerateEmbedding) => return Err(Error::TrainingDiverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            let lr = cosine_lr(config.lr, step, total_steps);
            apply(&mut opt, &mut head, &grad, lr);
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if !mean.is_finite() || head.weight.iter().chain(&head.bias).any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(mean);
    }
    Ok(TrainOutcome {
        head,
        loss_history: history,
    })
}

fn apply(opt: &mut AdamW, head: &mut EmbeddingHead, grad: &HeadGradient, lr: f64) {
    let params = head.weight.iter_mut().chain(head.bias.iter_mut());
    let grads = grad.weight.iter().chain(&grad.bias);
    opt.step(params, grads, lr);
}
