use serde::{Deserialize, Serialize};

use super::{layer_vjp, LayerParams};
use crate::error::{Error, Result};
use crate::imagecore::Image;

/// Ordered composition; `layers[0]` is applied first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequentialPerturbation {
    pub layers: Vec<LayerParams>,
}

impl SequentialPerturbation {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }
}

pub fn sequential_forward(x: &Image, s: &SequentialPerturbation) -> Result<Image> {
    let mut cur = x.clone();
    for layer in &s.layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Forward pass keeping every intermediate image: entry `i` is the input of
/// layer `i`; the last entry is the composed output.
pub fn sequential_trace(x: &Image, s: &SequentialPerturbation) -> Result<Vec<Image>> {
    let mut trace = Vec::with_capacity(s.layers.len() + 1);
    trace.push(x.clone());
    for layer in &s.layers {
        let next = layer.forward(trace.last().expect("trace starts non-empty"))?;
        trace.push(next);
    }
    Ok(trace)
}

/// Chains [`layer_vjp`] back to front. Returns one flat parameter gradient
/// per layer and the gradient with respect to the original input.
pub fn sequential_vjp(
    trace: &[Image],
    s: &SequentialPerturbation,
    upstream: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if trace.len() != s.layers.len() + 1 {
        return Err(Error::invalid(format!(
            "trace has {} images for {} layers",
            trace.len(),
            s.layers.len()
        )));
    }
    let mut grads = vec![Vec::new(); s.layers.len()];
    let mut g = upstream.to_vec();
    for (i, layer) in s.layers.iter().enumerate().rev() {
        let (pg, ig) = layer_vjp(&trace[i], layer, &g)?;
        grads[i] = pg;
        g = ig;
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Shape;
    use crate::layers::{DeltaParams, FlowParams};

    #[test]
    fn empty_composition_is_identity() {
        let x = Image::new(Shape::new(2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s = SequentialPerturbation::default();
        assert_eq!(sequential_forward(&x, &s).unwrap(), x);
        let trace = sequential_trace(&x, &s).unwrap();
        let (g, ig) = sequential_vjp(&trace, &s, &[1.0; 4]).unwrap();
        assert!(g.is_empty());
        assert_eq!(ig, vec![1.0; 4]);
    }

    #[test]
    fn zero_delta_then_zero_flow_is_identity() {
        let shape = Shape::new(3, 4, 3);
        let x = Image::new(shape, (0..shape.len()).map(|i| i as f64 / 40.0).collect()).unwrap();
        let s = SequentialPerturbation::new(vec![
            LayerParams::Delta(DeltaParams::zeros(shape)),
            LayerParams::Flow(FlowParams::zeros(3, 4)),
        ]);
        assert_eq!(sequential_forward(&x, &s).unwrap(), x);
    }
}
