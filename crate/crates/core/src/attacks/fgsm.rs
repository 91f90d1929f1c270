use super::engine::{finish, Eval};
use super::AttackConfig;
use super::AttackResult;
use crate::classifier::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::layers::{DeltaParams, LayerParams};
use crate::losses::{cross_entropy, AttackObjective};
use crate::threat::{project, ThreatSpec};

/// One signed step of size `step` up the cross-entropy gradient, projected
/// into a delta threat; the output is clamped to valid intensities.
/// `sign(0) = 0`, so coordinates with zero gradient are left alone. The
/// reported loss is the default margin objective at the result.
pub fn fgsm<M: Classifier>(model: &M, x: &Image, label: usize, threat: &ThreatSpec, step: f64) -> Result<AttackResult> {
    let mut cfg = AttackConfig::fgsm("fgsm", 0.0, step);
    cfg.objective = AttackObjective::default();
    fgsm_with(model, x, label, threat, step, &cfg)
}

pub(crate) fn fgsm_with<M: Classifier>(
    model: &M,
    x: &Image,
    label: usize,
    threat: &ThreatSpec,
    step: f64,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !matches!(threat, ThreatSpec::Delta { .. }) {
        return Err(Error::invalid("fgsm needs a delta threat"));
    }
    threat.validate()?;
    model.input_shape().check(&x.shape())?;
    if label >= model.num_classes() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let (_, grad) = model.input_gradient(x, |z| cross_entropy(z, label))?;
    let delta: Vec<f64> = grad
        .iter()
        .map(|g| {
            if *g > 0.0 {
                step
            } else if *g < 0.0 {
                -step
            } else {
                0.0
            }
        })
        .collect();
    let params = project(
        &LayerParams::Delta(DeltaParams {
            shape: x.shape(),
            delta,
        }),
        threat,
    )?;
    let image = params.forward(x)?;
    let logits = model.logits(&image)?;
    let (loss, _) = cfg.objective.adversarial.eval(&logits, label)?;
    let predicted = argmax(&logits);
    let eval = Eval {
        loss,
        term: 0.0,
        success: predicted != label,
        predicted,
        grads: Vec::new(),
        image,
    };
    finish(model, x, label, &cfg.name, vec![params], eval, 1)
}
