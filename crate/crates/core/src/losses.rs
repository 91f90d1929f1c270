//! Attack and training objectives with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::FlowParams;

/// Smoothing constant inside the total-variation square root.
pub const TV_ETA: f64 = 1e-8;

/// Untargeted margin loss `max(Z_y - max_{i != y} Z_i, -kappa)` on logits.
///
/// The gradient is `+1` on the true class and `-1` on the runner-up (lowest
/// index on ties) while the margin is above `-kappa`, zero once clamped.
pub fn cw_f6(logits: &[f64], true_label: usize, kappa: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::invalid("margin loss needs at least two classes"));
    }
    if true_label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {true_label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut runner = usize::MAX;
    for (i, &z) in logits.iter().enumerate() {
        if i != true_label && (runner == usize::MAX || z > logits[runner]) {
            runner = i;
        }
    }
    let margin = logits[true_label] - logits[runner];
    let mut grad = vec![0.0; logits.len()];
    if margin > -kappa || margin.is_nan() {
        grad[true_label] = 1.0;
        grad[runner] = -1.0;
        Ok((margin, grad))
    } else {
        Ok((-kappa, grad))
    }
}

/// Softmax cross-entropy, stabilised by max-subtraction. Gradient is
/// `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Smoothed total variation of a flow field:
/// `sum_p sum_{q in N4(p)} sqrt((u_p-u_q)^2 + (v_p-v_q)^2 + eta)`.
///
/// Each unordered neighbour pair appears twice, once from each side.
/// Returns the value and the gradient laid out as all of `u` then all of `v`.
pub fn tv_flow_loss(p: &FlowParams) -> (f64, Vec<f64>) {
    let (h, w) = (p.height, p.width);
    let n = h * w;
    let mut grad = vec![0.0; 2 * n];
    let mut total = 0.0;
    let mut pair = |a: usize, b: usize, grad: &mut [f64]| {
        let du = p.u[a] - p.u[b];
        let dv = p.v[a] - p.v[b];
        let s = (du * du + dv * dv + TV_ETA).sqrt();
        total += 2.0 * s;
        // d/dx of 2 sqrt(..) over both orderings of the pair
        let gu = 2.0 * du / s;
        let gv = 2.0 * dv / s;
        grad[a] += gu;
        grad[b] -= gu;
        grad[n + a] += gv;
        grad[n + b] -= gv;
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                pair(i, i + 1, &mut grad);
            }
            if r + 1 < h {
                pair(i, i + w, &mut grad);
            }
        }
    }
    (total, grad)
}

/// TV of the zero field, a constant of the grid size. Objectives subtract it
/// so an identity flow layer contributes exactly zero.
pub fn tv_flow_baseline(height: usize, width: usize) -> f64 {
    let pairs = height * width.saturating_sub(1) + width * height.saturating_sub(1);
    2.0 * pairs as f64 * TV_ETA.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversarialTerm {
    /// Minimise the margin loss.
    CwF6 {
        #[serde(default)]
        kappa: f64,
    },
    /// Minimise the negated cross-entropy (gradient ascent on CE).
    CrossEntropy,
}

impl Default for AdversarialTerm {
    fn default() -> Self {
        AdversarialTerm::CwF6 { kappa: 0.0 }
    }
}

impl AdversarialTerm {
    /// Value and logit-gradient of the term as minimised by an attack.
    pub fn eval(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match *self {
            AdversarialTerm::CwF6 { kappa } => cw_f6(logits, label, kappa),
            AdversarialTerm::CrossEntropy => {
                let (l, g) = cross_entropy(logits, label)?;
                Ok((-l, g.into_iter().map(|x| -x).collect()))
            }
        }
    }
}

/// What an attack minimises: the adversarial term plus `tv_weight` times the
/// (baseline-subtracted) TV of every flow layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackObjective {
    #[serde(default)]
    pub adversarial: AdversarialTerm,
    #[serde(default)]
    pub tv_weight: f64,
}

impl Default for AttackObjective {
    fn default() -> Self {
        Self {
            adversarial: AdversarialTerm::default(),
            tv_weight: 0.0,
        }
    }
}

impl AttackObjective {
    pub fn stadv() -> Self {
        Self {
            adversarial: AdversarialTerm::default(),
            tv_weight: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::invalid("tv_weight must be a finite value >= 0"));
        }
        if let AdversarialTerm::CwF6 { kappa } = self.adversarial {
            if !(kappa >= 0.0 && kappa.is_finite()) {
                return Err(Error::invalid("kappa must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f6_values() {
        assert_eq!(cw_f6(&[2.0, 1.0, 0.0], 0, 0.0).unwrap().0, 1.0);
        assert_eq!(cw_f6(&[0.0, 2.0, 0.0], 0, 0.0).unwrap().0, 0.0);
        let (v, g) = cw_f6(&[0.0, 2.0, 0.0], 0, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0; 3]);
        assert_eq!(cw_f6(&[1.5, 1.5, 1.5], 1, 0.0).unwrap().0, 0.0);
    }

    #[test]
    fn f6_gradient_and_ties() {
        let (_, g) = cw_f6(&[3.0, 1.0, 1.0], 0, 0.0).unwrap();
        assert_eq!(g, vec![1.0, -1.0, 0.0]);
        assert!(cw_f6(&[1.0], 0, 0.0).is_err());
        assert!(cw_f6(&[1.0, 2.0], 2, 0.0).is_err());
    }

    #[test]
    fn f6_success_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(0..4);
            let (v, _) = cw_f6(&z, y, 0.0).unwrap();
            let others_max = z
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != y)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(v <= 0.0, others_max >= z[y]);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let (l, g) = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(cross_entropy(&[0.0], 1).is_err());
    }

    #[test]
    fn tv_zero_field_is_near_zero() {
        let (v, g) = tv_flow_loss(&FlowParams::zeros(2, 2));
        assert!(v < 1e-3);
        assert!((v - tv_flow_baseline(2, 2)).abs() < 1e-18);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tv_constant_field_matches_zero_field() {
        let mut p = FlowParams::zeros(3, 3);
        p.u.fill(0.7);
        p.v.fill(-0.2);
        let (v, _) = tv_flow_loss(&p);
        assert!((v - tv_flow_baseline(3, 3)).abs() < 1e-15);
    }

    #[test]
    fn tv_one_by_two_hand_count() {
        let p = FlowParams {
            height: 1,
            width: 2,
            u: vec![1.0, 0.0],
            v: vec![0.0, 0.0],
        };
        let (v, _) = tv_flow_loss(&p);
        assert!((v - 2.0 * (1.0 + TV_ETA).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn objective_json_defaults() {
        let o: AttackObjective = serde_json::from_str("{}").unwrap();
        assert_eq!(o, AttackObjective::default());
        let o: AttackObjective =
            serde_json::from_str(r#"{"adversarial":{"kind":"cross_entropy"},"tv_weight":0.05}"#)
                .unwrap();
        assert_eq!(o.adversarial, AdversarialTerm::CrossEntropy);
    }
}
