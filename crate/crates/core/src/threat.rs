//! Hard-constraint threat models, one per layer class, with Euclidean
//! projection. All balls are closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerParams};

/// Bounds for one attack layer. Intensity bounds are on the `[0, 1]` scale,
/// spatial bounds in pixels, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThreatSpec {
    Delta {
        linf_bound: f64,
    },
    Affine {
        max_angle: f64,
        max_shift: f64,
        #[serde(default)]
        max_log_scale: f64,
    },
    Flow {
        max_disp: f64,
    },
}

impl ThreatSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            ThreatSpec::Delta { .. } => LayerKind::Delta,
            ThreatSpec::Affine { .. } => LayerKind::Affine,
            ThreatSpec::Flow { .. } => LayerKind::Flow,
        }
    }

    /// Unbounded spec of the given kind (used by the perceptual attacks).
    pub fn unbounded(kind: LayerKind) -> Self {
        match kind {
            LayerKind::Delta => ThreatSpec::Delta {
                linf_bound: f64::INFINITY,
            },
            LayerKind::Affine => ThreatSpec::Affine {
                max_angle: f64::INFINITY,
                max_shift: f64::INFINITY,
                max_log_scale: f64::INFINITY,
            },
            LayerKind::Flow => ThreatSpec::Flow {
                max_disp: f64::INFINITY,
            },
        }
    }

    fn bounds(&self) -> Vec<f64> {
        match *self {
            ThreatSpec::Delta { linf_bound } => vec![linf_bound],
            ThreatSpec::Affine {
                max_angle,
                max_shift,
                max_log_scale,
            } => vec![max_angle, max_shift, max_log_scale],
            ThreatSpec::Flow { max_disp } => vec![max_disp],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds().iter().any(|b| b.is_nan() || *b < 0.0) {
            return Err(Error::invalid(format!("threat bounds must be >= 0: {self:?}")));
        }
        Ok(())
    }

    /// True when every bound of `self` is at most the matching bound of `other`.
    pub fn is_tighter_than(&self, other: &ThreatSpec) -> bool {
        self.kind() == other.kind()
            && self
                .bounds()
                .iter()
                .zip(other.bounds())
                .all(|(a, b)| *a <= b)
    }

    /// All bounds zero: only the identity is feasible.
    pub fn identity(kind: LayerKind) -> Self {
        match kind {
            LayerKind::Delta => ThreatSpec::Delta { linf_bound: 0.0 },
            LayerKind::Affine => ThreatSpec::Affine {
                max_angle: 0.0,
                max_shift: 0.0,
                max_log_scale: 0.0,
            },
            LayerKind::Flow => ThreatSpec::Flow { max_disp: 0.0 },
        }
    }
}

fn kind_check(params: &LayerParams, spec: &ThreatSpec) -> Result<()> {
    if params.kind() != spec.kind() {
        return Err(Error::KindMismatch {
            params: params.kind().name(),
            spec: spec.kind().name(),
        });
    }
    Ok(())
}

/// Nearest feasible parameters: a per-coordinate clamp. Dilation is bounded
/// in log space, implemented as a clamp of `scale` to
/// `[exp(-max_log_scale), exp(max_log_scale)]` so the map is exactly
/// idempotent.
pub fn project(params: &LayerParams, spec: &ThreatSpec) -> Result<LayerParams> {
    kind_check(params, spec)?;
    spec.validate()?;
    let mut out = params.clone();
    match (&mut out, *spec) {
        (LayerParams::Delta(p), ThreatSpec::Delta { linf_bound }) => {
            for d in &mut p.delta {
                *d = d.clamp(-linf_bound, linf_bound);
            }
        }
        (
            LayerParams::Affine(p),
            ThreatSpec::Affine {
                max_angle,
                max_shift,
                max_log_scale,
            },
        ) => {
            p.angle = p.angle.clamp(-max_angle, max_angle);
            p.shift_x = p.shift_x.clamp(-max_shift, max_shift);
            p.shift_y = p.shift_y.clamp(-max_shift, max_shift);
            let lo = (-max_log_scale).exp();
            let hi = max_log_scale.exp();
            p.scale = if p.scale.is_nan() { 1.0 } else { p.scale.clamp(lo, hi) };
        }
        (LayerParams::Flow(p), ThreatSpec::Flow { max_disp }) => {
            for x in p.u.iter_mut().chain(p.v.iter_mut()) {
                *x = x.clamp(-max_disp, max_disp);
            }
        }
        _ => unreachable!("kinds checked above"),
    }
    Ok(out)
}

/// Membership in the (closed) threat set, to within `1e-12`.
pub fn contains(params: &LayerParams, spec: &ThreatSpec) -> Result<bool> {
    let projected = project(params, spec)?;
    Ok(params
        .flat()
        .iter()
        .zip(projected.flat())
        .all(|(a, b)| (a - b).abs() <= 1e-12))
}

/// Per-layer specs aligned with a sequential perturbation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComposedThreat {
    pub specs: Vec<ThreatSpec>,
}

impl ComposedThreat {
    pub fn new(specs: Vec<ThreatSpec>) -> Self {
        Self { specs }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.specs.iter().map(ThreatSpec::kind).collect()
    }

    fn check_len(&self, layers: &[LayerParams]) -> Result<()> {
        if layers.len() != self.specs.len() {
            return Err(Error::invalid(format!(
                "{} layers for {} threat specs",
                layers.len(),
                self.specs.len()
            )));
        }
        Ok(())
    }

    pub fn project(&self, layers: &[LayerParams]) -> Result<Vec<LayerParams>> {
        self.check_len(layers)?;
        layers
            .iter()
            .zip(&self.specs)
            .map(|(p, s)| project(p, s))
            .collect()
    }

    pub fn contains(&self, layers: &[LayerParams]) -> Result<bool> {
        self.check_len(layers)?;
        for (p, s) in layers.iter().zip(&self.specs) {
            if !contains(p, s)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Named default threat models, with 0–255 intensity bounds converted to
/// the `[0, 1]` scale.
pub fn default_threats() -> Vec<(&'static str, ThreatSpec)> {
    use std::f64::consts::PI;
    vec![
        (
            "delta",
            ThreatSpec::Delta {
                linf_bound: 8.0 / 255.0,
            },
        ),
        (
            "rotation",
            ThreatSpec::Affine {
                max_angle: PI / 24.0,
                max_shift: 0.0,
                max_log_scale: 0.0,
            },
        ),
        (
            "translation",
            ThreatSpec::Affine {
                max_angle: 0.0,
                max_shift: 3.2,
                max_log_scale: 0.0,
            },
        ),
        ("stadv", ThreatSpec::Flow { max_disp: 1.6 }),
    ]
}

pub fn default_threat(name: &str) -> Option<ThreatSpec> {
    default_threats()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Shape;
    use crate::layers::{AffineParams, DeltaParams, FlowParams};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn delta(values: Vec<f64>) -> LayerParams {
        LayerParams::Delta(DeltaParams {
            shape: Shape::new(1, values.len(), 1),
            delta: values,
        })
    }

    #[test]
    fn delta_clamp() {
        let b = 8.0 / 255.0;
        let p = project(&delta(vec![0.1, -0.05]), &ThreatSpec::Delta { linf_bound: b }).unwrap();
        assert_eq!(p.flat(), vec![b, -b]);
    }

    #[test]
    fn feasible_params_unchanged() {
        let p = delta(vec![0.01, -0.02, 0.0]);
        let spec = ThreatSpec::Delta { linf_bound: 0.03 };
        assert_eq!(project(&p, &spec).unwrap(), p);
        assert!(contains(&p, &spec).unwrap());
    }

    #[test]
    fn angle_clamp() {
        let p = LayerParams::Affine(AffineParams {
            angle: PI / 6.0,
            ..AffineParams::identity()
        });
        let spec = default_threat("rotation").unwrap();
        let LayerParams::Affine(q) = project(&p, &spec).unwrap() else {
            unreachable!()
        };
        assert_eq!(q.angle, PI / 24.0);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn membership_edges() {
        let spec = ThreatSpec::Delta { linf_bound: 0.25 };
        assert!(contains(&delta(vec![0.0; 3]), &ThreatSpec::Delta { linf_bound: 0.0 }).unwrap());
        assert!(contains(&delta(vec![0.25, -0.25]), &spec).unwrap());
        let mut f = FlowParams::zeros(1, 1);
        f.u[0] = 1.61;
        assert!(!contains(&LayerParams::Flow(f), &default_threat("stadv").unwrap()).unwrap());
    }

    #[test]
    fn kind_mismatch() {
        let err = project(&delta(vec![0.0]), &ThreatSpec::Flow { max_disp: 1.0 });
        assert!(matches!(err, Err(Error::KindMismatch { .. })));
        assert!(contains(&delta(vec![0.0]), &ThreatSpec::Flow { max_disp: 1.0 }).is_err());
    }

    #[test]
    fn defaults_table() {
        assert_eq!(
            default_threat("delta"),
            Some(ThreatSpec::Delta {
                linf_bound: 8.0 / 255.0
            })
        );
        let Some(ThreatSpec::Affine { max_shift, .. }) = default_threat("translation") else {
            panic!()
        };
        assert_eq!(max_shift, 3.2);
        assert_eq!(default_threat("stadv"), Some(ThreatSpec::Flow { max_disp: 1.6 }));
        assert_eq!(default_threat("nope"), None);
    }

    #[test]
    fn negative_bounds_rejected() {
        assert!(project(&delta(vec![0.0]), &ThreatSpec::Delta { linf_bound: -1.0 }).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let s: ThreatSpec = serde_json::from_str(r#"{"kind":"flow","max_disp":1.6}"#).unwrap();
        assert_eq!(s, ThreatSpec::Flow { max_disp: 1.6 });
        let a: ThreatSpec =
            serde_json::from_str(r#"{"kind":"affine","max_angle":0.1,"max_shift":2.0}"#).unwrap();
        assert_eq!(a.kind(), LayerKind::Affine);
    }

    proptest! {
        #[test]
        fn flow_projection_is_coordinatewise_nearest(
            vals in prop::collection::vec(-5.0f64..5.0, 8),
            bound in 0.0f64..3.0,
        ) {
            let mut f = FlowParams::zeros(2, 2);
            f.u.copy_from_slice(&vals[..4]);
            f.v.copy_from_slice(&vals[4..]);
            let p = LayerParams::Flow(f);
            let spec = ThreatSpec::Flow { max_disp: bound };
            let q = project(&p, &spec).unwrap();
            for (a, b) in p.flat().iter().zip(q.flat()) {
                // distance to the interval [-bound, bound]
                let d = (a.abs() - bound).max(0.0);
                prop_assert!(((a - b).abs() - d).abs() < 1e-12);
            }
        }

        #[test]
        fn tighter_spec_feasible_is_looser_feasible(
            vals in prop::collection::vec(-1.0f64..1.0, 4),
            a in 0.0f64..0.5, extra in 0.0f64..0.5,
        ) {
            let tight = ThreatSpec::Delta { linf_bound: a };
            let loose = ThreatSpec::Delta { linf_bound: a + extra };
            prop_assert!(tight.is_tighter_than(&loose));
            let p = project(&delta(vals), &tight).unwrap();
            prop_assert!(contains(&p, &loose).unwrap());
        }
    }
}
