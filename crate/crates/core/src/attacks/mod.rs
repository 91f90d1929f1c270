//! Attack drivers over composed perturbation layers.
//!
//! [`run_attack`] dispatches an [`AttackConfig`] to FGSM or to projected
//! gradient descent with Adam. Combined configs with `warm_start` first run
//! every single-layer attack and start from the best of those solutions, so
//! a combined attack is never weaker than its parts.

mod engine;
mod fgsm;
mod perceptual;
mod suite;

pub use engine::{pgd, pgd_from, run_attack, run_attack_with, AttackMemo};
pub use fgsm::fgsm;
pub use perceptual::{perceptual_cw, perceptual_pair, PerceptualConfig, PerceptualMetric, PerceptualVariant};
pub use suite::{
    attack_suite, defense_matrix, strength_sweep, MatrixReport, MatrixRow, SuiteReport, SuiteRow, SweepCell,
    SweepReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::layers::{LayerKind, LayerParams};
use crate::losses::{AdversarialTerm, AttackObjective};
use crate::metrics::MetricReport;
use crate::threat::{default_threat, ComposedThreat, ThreatSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_FGSM_STEP: f64 = 8.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    /// Single signed-gradient step on cross-entropy, intensity units.
    Fgsm {
        #[serde(default = "default_fgsm_step")]
        step: f64,
    },
}

fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_fgsm_step() -> f64 {
    DEFAULT_FGSM_STEP
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One attack layer: its threat model and an optional learning-rate
/// override.
///
/// The Adam rate is applied in normalised units: spatial parameters (flow
/// fields, shifts) step by `lr * width / 2` horizontally and
/// `lr * height / 2` vertically, everything else by `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub threat: ThreatSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl LayerConfig {
    pub fn new(threat: ThreatSpec) -> Self {
        Self { threat, lr: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub name: String,
    /// Applied in order: `layers[0]` acts on the clean image.
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_min_iterations")]
    pub min_iterations: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub objective: AttackObjective,
    #[serde(default)]
    pub warm_start: bool,
    /// Recorded for reproducibility; PGD itself starts from the identity and
    /// draws no random numbers.
    #[serde(default)]
    pub seed: u64,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_min_iterations() -> usize {
    100
}
fn default_max_iterations() -> usize {
    500
}
fn default_window() -> usize {
    20
}
fn default_tolerance() -> f64 {
    1e-5
}

impl AttackConfig {
    /// PGD config with default optimiser and stopping rule.
    pub fn pgd(name: impl Into<String>, threats: Vec<ThreatSpec>) -> Self {
        let layers: Vec<LayerConfig> = threats.into_iter().map(LayerConfig::new).collect();
        let has_flow = layers.iter().any(|l| l.threat.kind() == LayerKind::Flow);
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            warm_start: layers.len() > 1,
            layers,
            optimizer: Optimizer::default(),
            min_iterations: default_min_iterations(),
            max_iterations: default_max_iterations(),
            window: default_window(),
            tolerance: default_tolerance(),
            objective: if has_flow {
                AttackObjective::stadv()
            } else {
                AttackObjective::default()
            },
            seed: 0,
        }
    }

    pub fn fgsm(name: impl Into<String>, bound: f64, step: f64) -> Self {
        let mut c = Self::pgd(name, vec![ThreatSpec::Delta { linf_bound: bound }]);
        c.optimizer = Optimizer::Fgsm { step };
        c.min_iterations = 1;
        c.max_iterations = 1;
        c
    }

    pub fn with_iterations(mut self, min: usize, max: usize) -> Self {
        self.min_iterations = min;
        self.max_iterations = max;
        self
    }

    pub fn threat(&self) -> ComposedThreat {
        ComposedThreat::new(self.layers.iter().map(|l| l.threat).collect())
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.threat.kind()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("attack '{}': {m}", self.name)));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.layers.is_empty() {
            return fail("needs at least one layer".into());
        }
        for l in &self.layers {
            l.threat.validate()?;
            if let Some(lr) = l.lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return fail("layer lr must be > 0".into());
                }
            }
        }
        if self.min_iterations < 1 || self.max_iterations < self.min_iterations {
            return fail("need 1 <= min_iterations <= max_iterations".into());
        }
        if self.window < 1 || !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return fail("window must be >= 1 and tolerance a finite value >= 0".into());
        }
        self.objective.validate()?;
        match self.optimizer {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return fail("lr must be > 0".into());
                }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return fail("need beta1, beta2 in [0, 1) and eps > 0".into());
                }
            }
            Optimizer::Fgsm { step } => {
                if !(step >= 0.0 && step.is_finite()) {
                    return fail("fgsm step must be >= 0".into());
                }
                if self.layers.len() != 1 || self.layers[0].threat.kind() != LayerKind::Delta {
                    return fail("fgsm needs exactly one delta layer".into());
                }
            }
        }
        Ok(())
    }

    /// Key under which a per-sample result can be reused: the config minus
    /// its name, with settings that cannot affect the result normalised.
    pub(crate) fn memo_key(&self) -> String {
        let mut c = self.clone();
        c.name.clear();
        if !c.kinds().contains(&LayerKind::Flow) {
            c.objective.tv_weight = 0.0;
        }
        if c.layers.len() == 1 {
            c.warm_start = false;
        }
        serde_json::to_string(&c).expect("config serialises")
    }
}

/// Names accepted by [`builtin_attack`].
pub const BUILTIN_ATTACKS: [&str; 10] = [
    "identity",
    "fgsm",
    "delta",
    "delta-ce",
    "rotation",
    "translation",
    "rt",
    "stadv",
    "delta+rt",
    "delta+stadv",
];

/// Default attack configs. Combined attacks place spatial layers first and
/// warm-start from their single-layer parts.
pub fn builtin_attack(name: &str) -> Option<AttackConfig> {
    let delta = default_threat("delta")?;
    let stadv = default_threat("stadv")?;
    let rot = default_threat("rotation")?;
    let trans = default_threat("translation")?;
    let rt = match (rot, trans) {
        (
            ThreatSpec::Affine {
                max_angle,
                max_log_scale,
                ..
            },
            ThreatSpec::Affine { max_shift, .. },
        ) => ThreatSpec::Affine {
            max_angle,
            max_shift,
            max_log_scale,
        },
        _ => return None,
    };
    let bound = match delta {
        ThreatSpec::Delta { linf_bound } => linf_bound,
        _ => return None,
    };
    let cfg = match name {
        "identity" => AttackConfig::pgd(name, vec![ThreatSpec::identity(LayerKind::Delta)]),
        "fgsm" => AttackConfig::fgsm(name, bound, DEFAULT_FGSM_STEP),
        "delta" => AttackConfig::pgd(name, vec![delta]),
        "delta-ce" => {
            let mut c = AttackConfig::pgd(name, vec![delta]);
            c.objective.adversarial = AdversarialTerm::CrossEntropy;
            c
        }
        "rotation" => AttackConfig::pgd(name, vec![rot]),
        "translation" => AttackConfig::pgd(name, vec![trans]),
        "rt" => AttackConfig::pgd(name, vec![rt]),
        "stadv" => AttackConfig::pgd(name, vec![stadv]),
        "delta+rt" => AttackConfig::pgd(name, vec![rt, delta]),
        "delta+stadv" => AttackConfig::pgd(name, vec![stadv, delta]),
        _ => return None,
    };
    Some(cfg)
}

/// Outcome of one attack on one image. The perturbed image itself is not
/// part of the JSON record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    pub attack: String,
    pub label: usize,
    pub predicted: usize,
    pub success: bool,
    /// Optimiser steps taken (0 for a single evaluation).
    pub iterations: usize,
    pub final_loss: f64,
    pub layer_order: Vec<LayerKind>,
    pub params: Vec<LayerParams>,
    pub metrics: MetricReport,
    #[serde(skip)]
    pub perturbed: Image,
}

impl AttackResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("attack result serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for name in BUILTIN_ATTACKS {
            let c = builtin_attack(name).unwrap();
            c.validate().unwrap();
            let json = serde_json::to_string(&c).unwrap();
            let back: AttackConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, c, "{name}");
        }
        assert!(builtin_attack("nope").is_none());
        let combo = builtin_attack("delta+stadv").unwrap();
        assert_eq!(combo.kinds(), vec![LayerKind::Flow, LayerKind::Delta]);
        assert!(combo.warm_start);
    }

    #[test]
    fn minimal_json_gets_defaults() {
        let c: AttackConfig =
            serde_json::from_str(r#"{"name":"d","layers":[{"threat":{"kind":"delta","linf_bound":0.03}}]}"#).unwrap();
        assert_eq!(c.min_iterations, 100);
        assert_eq!(c.max_iterations, 500);
        assert_eq!(c.window, 20);
        assert_eq!(c.tolerance, 1e-5);
        assert_eq!(c.optimizer, Optimizer::default());
        c.validate().unwrap();
        assert!(serde_json::from_str::<AttackConfig>(r#"{"name":"d","layers":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = builtin_attack("delta").unwrap();
        c.min_iterations = 0;
        assert!(c.validate().is_err());
        let mut c = builtin_attack("delta").unwrap();
        c.optimizer = Optimizer::Adam {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        assert!(c.validate().is_err());
        let mut c = builtin_attack("stadv").unwrap();
        c.optimizer = Optimizer::Fgsm { step: 0.1 };
        assert!(c.validate().is_err());
        let mut c = builtin_attack("delta").unwrap();
        c.schema_version = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn memo_key_ignores_irrelevant_fields() {
        let single = builtin_attack("delta").unwrap();
        let mut from_combo = builtin_attack("delta+stadv").unwrap();
        from_combo.layers.remove(0);
        from_combo.name = "x".into();
        assert_eq!(single.memo_key(), from_combo.memo_key());
    }
}
