use super::Classifier;
use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};

/// `logits = W x + b` over the flattened image.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    shape: Shape,
    classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    /// `weights` is row-major `classes × shape.len()`.
    pub fn new(shape: Shape, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 2 || weights.len() != classes * shape.len() || bias.len() != classes {
            return Err(Error::invalid("linear classifier dimensions do not match"));
        }
        Ok(Self {
            shape,
            classes,
            weights,
            bias,
        })
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let n = self.shape.len();
        &self.weights[class * n..(class + 1) * n]
    }
}

impl Classifier for LinearClassifier {
    type Cache = ();

    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, x: &Image) -> Result<(Vec<f64>, ())> {
        self.shape.check(&x.shape())?;
        let logits = (0..self.classes)
            .map(|k| {
                self.row(k)
                    .iter()
                    .zip(x.data())
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[k]
            })
            .collect();
        Ok((logits, ()))
    }

    fn backward_input(&self, _cache: &(), d_logits: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.shape.len()];
        for (k, d) in d_logits.iter().enumerate() {
            for (gi, w) in g.iter_mut().zip(self.row(k)) {
                *gi += d * w;
            }
        }
        g
    }
}
