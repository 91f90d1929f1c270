//! Conv 3×3 (C→8, pad 1) → ReLU → MaxPool 2 → Conv 3×3 (8→16, pad 1) →
//! ReLU → MaxPool 2 → fully connected → logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Classifier;
use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};

pub(crate) const CONV1_OUT: usize = 8;
pub(crate) const CONV2_OUT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Relu,
    /// Linear probe used by tests: the network becomes piecewise linear
    /// (max-pool routing only).
    Identity,
}

/// Tensor order: conv1 weights, conv1 bias, conv2 weights, conv2 bias,
/// fc weights, fc bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub(crate) input: Shape,
    pub(crate) classes: usize,
    pub(crate) tensors: Vec<Vec<f64>>,
    pub(crate) activation: Activation,
    pub(crate) trained: bool,
}

/// Parameter gradients in the same tensor order as the network.
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pool1: Vec<f64>,
    arg1: Vec<u32>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pool2: Vec<f64>,
    arg2: Vec<u32>,
    pub logits: Vec<f64>,
}

impl ConvCache {
    /// Post-activation map of the first conv block, `8 × H × W`.
    pub fn act1(&self) -> &[f64] {
        &self.act1
    }

    /// Post-activation map of the second conv block, `16 × H/2 × W/2`.
    pub fn act2(&self) -> &[f64] {
        &self.act2
    }
}

struct Dims {
    h: usize,
    w: usize,
    c: usize,
}

impl ConvNet {
    /// Fresh network with uniform `±sqrt(6 / (fan_in + fan_out))` weights and
    /// zero biases. Input height and width must be multiples of 4.
    pub fn new(input: Shape, classes: usize, seed: u64) -> Result<Self> {
        if input.height == 0 || input.width == 0 || input.height % 4 != 0 || input.width % 4 != 0 {
            return Err(Error::invalid(format!(
                "input height and width must be positive multiples of 4, got {input}"
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::tensor_shapes(input, classes);
        let fans = [
            (input.channels * 9, CONV1_OUT * 9),
            (CONV1_OUT * 9, CONV2_OUT * 9),
            (shapes[4][1], classes),
        ];
        let mut tensors = Vec::with_capacity(6);
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            if i % 2 == 1 {
                tensors.push(vec![0.0; n]);
            } else {
                let (fan_in, fan_out) = fans[i / 2];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                tensors.push((0..n).map(|_| rng.gen_range(-limit..=limit)).collect());
            }
        }
        Ok(Self {
            input,
            classes,
            tensors,
            activation: Activation::Relu,
            trained: false,
        })
    }

    pub(crate) fn tensor_shapes(input: Shape, classes: usize) -> Vec<Vec<usize>> {
        let flat = CONV2_OUT * (input.height / 4) * (input.width / 4);
        vec![
            vec![CONV1_OUT, input.channels, 3, 3],
            vec![CONV1_OUT],
            vec![CONV2_OUT, CONV1_OUT, 3, 3],
            vec![CONV2_OUT],
            vec![classes, flat],
            vec![classes],
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Flags the weights as usable for perceptual metrics without training,
    /// e.g. for gradient checks on a fresh network.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    #[cfg(test)]
    pub(crate) fn with_identity_activations(mut self) -> Self {
        self.activation = Activation::Identity;
        self
    }

    fn activate(&self, pre: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
            Activation::Identity => pre.to_vec(),
        }
    }

    fn activation_backward(&self, pre: &[f64], grad: &mut [f64]) {
        if self.activation == Activation::Relu {
            for (g, p) in grad.iter_mut().zip(pre) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    /// Forward pass with all intermediates kept.
    pub fn forward_cached(&self, x: &Image) -> Result<ConvCache> {
        self.input.check(&x.shape())?;
        let d1 = Dims {
            h: self.input.height,
            w: self.input.width,
            c: self.input.channels,
        };
        let pre1 = conv3x3(x.data(), &d1, &self.tensors[0], &self.tensors[1], CONV1_OUT);
        let act1 = self.activate(&pre1);
        let (pool1, arg1) = maxpool2(&act1, CONV1_OUT, d1.h, d1.w);
        let d2 = Dims {
            h: d1.h / 2,
            w: d1.w / 2,
            c: CONV1_OUT,
        };
        let pre2 = conv3x3(&pool1, &d2, &self.tensors[2], &self.tensors[3], CONV2_OUT);
        let act2 = self.activate(&pre2);
        let (pool2, arg2) = maxpool2(&act2, CONV2_OUT, d2.h, d2.w);
        let fc_w = &self.tensors[4];
        let n = pool2.len();
        let logits = (0..self.classes)
            .map(|k| {
                fc_w[k * n..(k + 1) * n]
                    .iter()
                    .zip(&pool2)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.tensors[5][k]
            })
            .collect();
        Ok(ConvCache {
            input: x.data().to_vec(),
            pre1,
            act1,
            pool1,
            arg1,
            pre2,
            act2,
            pool2,
            arg2,
            logits,
        })
    }

    /// Backpropagation from a logit gradient plus optional gradients injected
    /// at the two post-activation maps. Returns parameter gradients when
    /// `want_params` is set, and the input gradient.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_logits: &[f64],
        d_act1: Option<&[f64]>,
        d_act2: Option<&[f64]>,
        want_params: bool,
    ) -> (Option<ParamGrads>, Vec<f64>) {
        let (h1, w1) = (self.input.height, self.input.width);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let n = cache.pool2.len();
        let fc_w = &self.tensors[4];

        let mut d_pool2 = vec![0.0; n];
        for (k, &d) in d_logits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, w) in d_pool2.iter_mut().zip(&fc_w[k * n..(k + 1) * n]) {
                *g += d * w;
            }
        }
        let mut d_act2v = vec![0.0; cache.act2.len()];
        for (i, &a) in cache.arg2.iter().enumerate() {
            d_act2v[a as usize] += d_pool2[i];
        }
        if let Some(extra) = d_act2 {
            for (g, e) in d_act2v.iter_mut().zip(extra) {
                *g += e;
            }
        }
        self.activation_backward(&cache.pre2, &mut d_act2v);
        let d_pre2 = d_act2v;

        let d2 = Dims {
            h: h2,
            w: w2,
            c: CONV1_OUT,
        };
        let d_pool1 = conv3x3_backward_input(&d_pre2, &d2, &self.tensors[2], CONV2_OUT);
        let mut d_act1v = vec![0.0; cache.act1.len()];
        for (i, &a) in cache.arg1.iter().enumerate() {
            d_act1v[a as usize] += d_pool1[i];
        }
        if let Some(extra) = d_act1 {
            for (g, e) in d_act1v.iter_mut().zip(extra) {
                *g += e;
            }
        }
        self.activation_backward(&cache.pre1, &mut d_act1v);
        let d_pre1 = d_act1v;
        let d1 = Dims {
            h: h1,
            w: w1,
            c: self.input.channels,
        };
        let d_input = conv3x3_backward_input(&d_pre1, &d1, &self.tensors[0], CONV1_OUT);

        let params = want_params.then(|| {
            let mut d_fc = vec![0.0; fc_w.len()];
            for (k, &d) in d_logits.iter().enumerate() {
                for (g, v) in d_fc[k * n..(k + 1) * n].iter_mut().zip(&cache.pool2) {
                    *g = d * v;
                }
            }
            let (dw2, db2) = conv3x3_backward_params(&d_pre2, &cache.pool1, &d2, CONV2_OUT);
            let (dw1, db1) = conv3x3_backward_params(&d_pre1, &cache.input, &d1, CONV1_OUT);
            vec![dw1, db1, dw2, db2, d_fc, d_logits.to_vec()]
        });
        (params, d_input)
    }

    /// True when both passes share ReLU masks and pooling routes, so the
    /// network is one smooth piece on the segment between the inputs.
    pub fn same_pattern(&self, a: &ConvCache, b: &ConvCache) -> bool {
        let mask = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
        a.arg1 == b.arg1
            && a.arg2 == b.arg2
            && (self.activation == Activation::Identity || (mask(&a.pre1, &b.pre1) && mask(&a.pre2, &b.pre2)))
    }

    /// Smallest distance to a non-differentiable point: the nearest ReLU
    /// pre-activation to zero, or the smallest gap between a pooling
    /// window's winner and runner-up.
    pub fn kink_margin(&self, cache: &ConvCache) -> f64 {
        let mut m = f64::INFINITY;
        if self.activation == Activation::Relu {
            for p in cache.pre1.iter().chain(&cache.pre2) {
                m = m.min(p.abs());
            }
        }
        let (h1, w1) = (self.input.height, self.input.width);
        m = m.min(pool_gap(&cache.act1, CONV1_OUT, h1, w1));
        m.min(pool_gap(&cache.act2, CONV2_OUT, h1 / 2, w1 / 2))
    }
}

impl Classifier for ConvNet {
    type Cache = ConvCache;

    fn input_shape(&self) -> Shape {
        self.input
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, x: &Image) -> Result<(Vec<f64>, ConvCache)> {
        let cache = self.forward_cached(x)?;
        Ok((cache.logits.clone(), cache))
    }

    fn backward_input(&self, cache: &ConvCache, d_logits: &[f64]) -> Vec<f64> {
        self.backward(cache, d_logits, None, None, false).1
    }

    fn perceptual_distance(&self, x: &Image, y: &Image) -> Option<f64> {
        crate::metrics::lpips_style(self, x, y).ok()
    }
}

fn conv3x3(input: &[f64], d: &Dims, weights: &[f64], bias: &[f64], out_c: usize) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; out_c * plane];
    for o in 0..out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..d.c {
            let src = &input[i * plane..(i + 1) * plane];
            for kr in 0..3 {
                for kc in 0..3 {
                    let wv = weights[((o * d.c + i) * 3 + kr) * 3 + kc];
                    // output column range whose source column c + kc - 1 is in bounds
                    let c_lo = 1usize.saturating_sub(kc);
                    let c_hi = (d.w + 1 - kc).min(d.w);
                    for r in 0..d.h {
                        let sr = r + kr;
                        if sr == 0 || sr > d.h {
                            continue;
                        }
                        let srow = &src[(sr - 1) * d.w..sr * d.w];
                        let drow = &mut dst[r * d.w..(r + 1) * d.w];
                        for c in c_lo..c_hi {
                            drow[c] += wv * srow[c + kc - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward_input(d_out: &[f64], d: &Dims, weights: &[f64], out_c: usize) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut d_in = vec![0.0; d.c * plane];
    for o in 0..out_c {
        let g = &d_out[o * plane..(o + 1) * plane];
        for i in 0..d.c {
            let dst = &mut d_in[i * plane..(i + 1) * plane];
            for kr in 0..3 {
                for kc in 0..3 {
                    let wv = weights[((o * d.c + i) * 3 + kr) * 3 + kc];
                    let c_lo = 1usize.saturating_sub(kc);
                    let c_hi = (d.w + 1 - kc).min(d.w);
                    for r in 0..d.h {
                        let sr = r + kr;
                        if sr == 0 || sr > d.h {
                            continue;
                        }
                        let grow = &g[r * d.w..(r + 1) * d.w];
                        let drow = &mut dst[(sr - 1) * d.w..sr * d.w];
                        for c in c_lo..c_hi {
                            drow[c + kc - 1] += wv * grow[c];
                        }
                    }
                }
            }
        }
    }
    d_in
}

fn conv3x3_backward_params(d_out: &[f64], input: &[f64], d: &Dims, out_c: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = d.h * d.w;
    let mut dw = vec![0.0; out_c * d.c * 9];
    let mut db = vec![0.0; out_c];
    for o in 0..out_c {
        let g = &d_out[o * plane..(o + 1) * plane];
        db[o] = g.iter().sum();
        for i in 0..d.c {
            let src = &input[i * plane..(i + 1) * plane];
            for kr in 0..3 {
                for kc in 0..3 {
                    let c_lo = 1usize.saturating_sub(kc);
                    let c_hi = (d.w + 1 - kc).min(d.w);
                    let mut acc = 0.0;
                    for r in 0..d.h {
                        let sr = r + kr;
                        if sr == 0 || sr > d.h {
                            continue;
                        }
                        let srow = &src[(sr - 1) * d.w..sr * d.w];
                        let grow = &g[r * d.w..(r + 1) * d.w];
                        for c in c_lo..c_hi {
                            acc += grow[c] * srow[c + kc - 1];
                        }
                    }
                    dw[((o * d.c + i) * 3 + kr) * 3 + kc] = acc;
                }
            }
        }
    }
    (dw, db)
}

/// 2×2 stride-2 max pooling; the argmax is the first maximum in row-major
/// order within each window.
fn maxpool2(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ho * wo);
    let mut arg = Vec::with_capacity(channels * ho * wo);
    for ch in 0..channels {
        let base = ch * h * w;
        for r in 0..ho {
            for c in 0..wo {
                let mut best = base + 2 * r * w + 2 * c;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * r + dr) * w + 2 * c + dc;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

fn pool_gap(input: &[f64], channels: usize, h: usize, w: usize) -> f64 {
    let mut gap = f64::INFINITY;
    for ch in 0..channels {
        let base = ch * h * w;
        for r in 0..h / 2 {
            for c in 0..w / 2 {
                let mut v = [0.0; 4];
                for (k, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    v[k] = input[base + (2 * r + dr) * w + 2 * c + dc];
                }
                v.sort_by(|a, b| b.total_cmp(a));
                gap = gap.min(v[0] - v[1]);
            }
        }
    }
    gap
}
