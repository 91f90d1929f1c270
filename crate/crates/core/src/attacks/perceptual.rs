use serde::{Deserialize, Serialize};

use super::engine::{finish, ImageTerm, Problem, Schedule};
use super::AttackResult;
use crate::classifier::ConvNet;
use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::layers::{LayerKind, LayerParams};
use crate::losses::{AdversarialTerm, AttackObjective};
use crate::metrics::{lpips_style_grad, ssim_grad};
use crate::threat::{ComposedThreat, ThreatSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMetric {
    LpipsStyle,
    /// `1 - ssim`.
    Ssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualVariant {
    /// Unbounded additive perturbation.
    Delta,
    /// Unbounded flow followed by unbounded additive perturbation.
    DeltaFlow,
}

/// Minimises `metric(x, x') + lambda * cw_f6` with a fixed `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    #[serde(default = "default_metric")]
    pub metric: PerceptualMetric,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_min")]
    pub min_iterations: usize,
    #[serde(default = "default_max")]
    pub max_iterations: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
}

fn default_metric() -> PerceptualMetric {
    PerceptualMetric::LpipsStyle
}
fn default_lambda() -> f64 {
    10.0
}
fn default_lr() -> f64 {
    super::DEFAULT_LR
}
fn default_min() -> usize {
    100
}
fn default_max() -> usize {
    500
}
fn default_window() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-5
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            metric: default_metric(),
            lambda: default_lambda(),
            kappa: 0.0,
            lr: default_lr(),
            min_iterations: default_min(),
            max_iterations: default_max(),
            window: default_window(),
            tolerance: default_tol(),
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("lambda and kappa must be finite values >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if self.min_iterations < 1 || self.max_iterations < self.min_iterations || self.window < 1 {
            return Err(Error::invalid("need 1 <= min_iterations <= max_iterations and window >= 1"));
        }
        Ok(())
    }

    fn schedule(&self, layers: usize) -> Schedule {
        Schedule {
            min_iterations: self.min_iterations,
            max_iterations: self.max_iterations,
            window: self.window,
            tolerance: self.tolerance,
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            layer_lr: vec![None; layers],
        }
    }
}

fn kinds(variant: PerceptualVariant) -> Vec<LayerKind> {
    match variant {
        PerceptualVariant::Delta => vec![LayerKind::Delta],
        PerceptualVariant::DeltaFlow => vec![LayerKind::Flow, LayerKind::Delta],
    }
}

fn run(
    net: &ConvNet,
    x: &Image,
    label: usize,
    cfg: &PerceptualConfig,
    variant: PerceptualVariant,
    init: Vec<LayerParams>,
) -> Result<AttackResult> {
    let metric = cfg.metric;
    let term = move |y: &Image| -> Result<(f64, Vec<f64>)> {
        match metric {
            PerceptualMetric::LpipsStyle => lpips_style_grad(net, x, y),
            PerceptualMetric::Ssim => {
                let (s, g) = ssim_grad(x, y)?;
                Ok((1.0 - s, g.into_iter().map(|v| -v).collect()))
            }
        }
    };
    let term_ref: &ImageTerm<'_> = &term;
    let k = kinds(variant);
    let prob = Problem {
        model: net,
        x,
        label,
        threat: ComposedThreat::new(k.iter().map(|k| ThreatSpec::unbounded(*k)).collect()),
        objective: AttackObjective {
            adversarial: AdversarialTerm::CwF6 { kappa: cfg.kappa },
            tv_weight: 0.0,
        },
        adv_weight: cfg.lambda,
        image_term: Some(term_ref),
    };
    let (p, e, steps) = prob.descend(init, &cfg.schedule(k.len()))?;
    let name = match variant {
        PerceptualVariant::Delta => "perceptual-delta",
        PerceptualVariant::DeltaFlow => "perceptual-delta+flow",
    };
    finish(net, x, label, name, p, e, steps)
}

fn check(net: &ConvNet, x: &Image, label: usize, cfg: &PerceptualConfig) -> Result<()> {
    cfg.validate()?;
    if !net.is_trained() {
        return Err(Error::InvalidState("perceptual attack needs trained network weights".into()));
    }
    use crate::classifier::Classifier;
    net.input_shape().check(&x.shape())?;
    if label >= net.num_classes() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    Ok(())
}

/// Perceptual Carlini-Wagner attack. Returns the successful iterate with the
/// smallest metric value, or the lowest-loss iterate when none succeeds.
/// The delta+flow variant starts from the delta variant's solution.
pub fn perceptual_cw(
    net: &ConvNet,
    x: &Image,
    label: usize,
    cfg: &PerceptualConfig,
    variant: PerceptualVariant,
) -> Result<AttackResult> {
    match variant {
        PerceptualVariant::Delta => {
            check(net, x, label, cfg)?;
            run(net, x, label, cfg, variant, vec![LayerParams::identity(LayerKind::Delta, x.shape())])
        }
        PerceptualVariant::DeltaFlow => Ok(perceptual_pair(net, x, label, cfg)?.1),
    }
}

/// Both variants, the second warm-started from the first.
pub fn perceptual_pair(
    net: &ConvNet,
    x: &Image,
    label: usize,
    cfg: &PerceptualConfig,
) -> Result<(AttackResult, AttackResult)> {
    check(net, x, label, cfg)?;
    let a = run(
        net,
        x,
        label,
        cfg,
        PerceptualVariant::Delta,
        vec![LayerParams::identity(LayerKind::Delta, x.shape())],
    )?;
    let init = vec![LayerParams::identity(LayerKind::Flow, x.shape()), a.params[0].clone()];
    let b = run(net, x, label, cfg, PerceptualVariant::DeltaFlow, init)?;
    Ok((a, b))
}
