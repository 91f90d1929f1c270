use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, evaluate, Classifier, ConvNet};
use crate::attacks::{run_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::imagecore::{Image, LabeledDataset};
use crate::losses::cross_entropy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTraining {
    pub attack: AttackConfig,
    /// Fraction of each batch replaced by adversarial versions.
    #[serde(default = "default_mix")]
    pub mix: f64,
}

fn default_mix() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub adversarial: Option<AdversarialTraining>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
            adversarial: None,
        }
    }
}

/// PGD steps per adversarial training example.
pub const HARDENING_STEPS: usize = 10;

impl TrainConfig {
    /// Adversarial training recipe: every sample of every batch is replaced
    /// by a short-PGD adversarial version, with a gentler SGD rate and more
    /// epochs than plain training.
    pub fn hardening(attack: AttackConfig) -> Self {
        let mut attack = attack.with_iterations(HARDENING_STEPS, HARDENING_STEPS);
        if let crate::attacks::Optimizer::Adam { lr, .. } = &mut attack.optimizer {
            *lr = 0.02;
        }
        Self {
            epochs: 30,
            learning_rate: 0.02,
            adversarial: Some(AdversarialTraining { attack, mix: 1.0 }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if let Some(adv) = &self.adversarial {
            if !(0.0..=1.0).contains(&adv.mix) {
                return Err(Error::invalid("mix ratio must lie in [0, 1]"));
            }
            adv.attack.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Clean accuracy on the training set after the last epoch.
    pub final_accuracy: f64,
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
pub fn train(net: &mut ConvNet, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut plain = cfg.clone();
    plain.adversarial = None;
    fit(net, data, &plain)
}

/// Like [`train`], but the first `round(mix * batch)` samples of every
/// shuffled batch are replaced by adversarial examples crafted against the
/// current weights.
pub fn adversarial_train(net: &mut ConvNet, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.adversarial.is_none() {
        return Err(Error::invalid("adversarial training needs an attack config"));
    }
    fit(net, data, cfg)
}

pub(crate) fn fit(net: &mut ConvNet, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.num_classes != net.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, network has {}",
            data.num_classes,
            net.num_classes()
        )));
    }
    if let Some(shape) = data.shape() {
        net.input_shape().check(&shape)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = net.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let adv_count = cfg
                .adversarial
                .as_ref()
                .map_or(0, |a| (a.mix * batch.len() as f64).round() as usize);
            let frozen: &ConvNet = net;
            let inputs: Vec<Image> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let x = &data.images[i];
                    match &cfg.adversarial {
                        Some(adv) if k < adv_count => {
                            Ok(run_attack(frozen, x, data.labels[i], &adv.attack)?.perturbed)
                        }
                        _ => Ok(x.clone()),
                    }
                })
                .collect::<Result<_>>()?;
            let per_sample: Vec<(f64, bool, Vec<Vec<f64>>)> = inputs
                .par_iter()
                .zip(batch.par_iter())
                .map(|(x, &i)| {
                    let cache = frozen.forward_cached(x)?;
                    let (loss, d_logits) = cross_entropy(&cache.logits, data.labels[i])?;
                    let hit = argmax(&cache.logits) == data.labels[i];
                    let (grads, _) = frozen.backward(&cache, &d_logits, None, None, true);
                    Ok((loss, hit, grads.expect("parameter gradients requested")))
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grad: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for (loss, hit, g) in &per_sample {
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                loss_sum += loss;
                hits += usize::from(*hit);
                for (acc, t) in grad.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(t) {
                        *a += v;
                    }
                }
            }
            for ((w, v), g) in net.tensors.iter_mut().zip(&mut velocity).zip(&grad) {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi * scale;
                    *wi -= cfg.learning_rate * *vi;
                }
            }
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() || net.tensors.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss,
            train_accuracy: hits as f64 / data.len() as f64,
        });
    }
    net.trained = true;
    let final_accuracy = evaluate(&*net, data)?.accuracy;
    Ok(TrainReport {
        epochs,
        final_accuracy,
    })
}
