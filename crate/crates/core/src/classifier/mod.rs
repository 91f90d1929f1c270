//! Differentiable classifiers.
//!
//! [`ConvNet`] is a fixed small convolutional network with hand-written
//! backpropagation; [`LinearClassifier`] is an affine map used as a
//! closed-form reference. Both implement [`Classifier`], which is all the
//! attack drivers need: logits, and input gradients of a logit-space
//! upstream vector.

mod checkpoint;
mod convnet;
mod linear;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use convnet::{ConvCache, ConvNet, ParamGrads};
pub(crate) use convnet::{CONV1_OUT, CONV2_OUT};
pub use linear::LinearClassifier;
pub use train::{adversarial_train, train, AdversarialTraining, EpochLog, TrainConfig, TrainReport, HARDENING_STEPS};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{Image, LabeledDataset, Shape};

pub trait Classifier: Sync {
    type Cache: Send;

    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    /// Logits plus whatever the backward pass needs.
    fn forward(&self, x: &Image) -> Result<(Vec<f64>, Self::Cache)>;

    /// Gradient of `<d_logits, logits(x)>` with respect to `x`.
    fn backward_input(&self, cache: &Self::Cache, d_logits: &[f64]) -> Vec<f64>;

    fn logits(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Activation-space perceptual distance, when the model has one.
    fn perceptual_distance(&self, _x: &Image, _y: &Image) -> Option<f64> {
        None
    }

    /// Input gradient of a loss on the logits: `loss_fn` maps logits to a
    /// value and a logit gradient.
    fn input_gradient<F>(&self, x: &Image, loss_fn: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
        Self: Sized,
    {
        let (logits, cache) = self.forward(x)?;
        let (value, d_logits) = loss_fn(&logits)?;
        Ok((value, self.backward_input(&cache, &d_logits)))
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

pub fn evaluate<M: Classifier>(model: &M, dataset: &LabeledDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let correct = dataset
        .images
        .par_iter()
        .zip(&dataset.labels)
        .map(|(x, &y)| model.predict(x).map(|p| p == y))
        .collect::<Result<Vec<bool>>>()?;
    let hits = correct.iter().filter(|c| **c).count();
    Ok(Evaluation {
        accuracy: hits as f64 / dataset.len() as f64,
        correct,
    })
}
