//! Differentiable perturbation layers and their sequential composition.
//!
//! Three layer classes act on an [`Image`]:
//!
//! * **delta** adds a per-pixel, per-channel field and clamps into `[0, 1]`;
//! * **affine** rotates about the image centre, dilates and translates,
//!   sampling the source with a bilinear grid;
//! * **flow** gives every output pixel its own displacement `(u, v)` in pixels.
//!
//! Spatial layers use the inverse-warp convention: output pixel `(r, c)`
//! reads the source at its sampling coordinate, and out-of-range coordinates
//! are clamped to the border. Every layer exposes an analytic
//! vector-Jacobian product so attacks can run first-order optimisation
//! through arbitrary compositions.

mod affine;
mod delta;
mod flow;
mod sampling;
mod sequential;

pub use affine::{affine_forward, affine_grid, make_affine_matrix};
pub use delta::delta_forward;
pub use flow::flow_forward;
pub use sampling::{bilinear_sample, SamplingGrid};
pub use sequential::{sequential_forward, sequential_trace, sequential_vjp, SequentialPerturbation};


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Delta,
    Affine,
    Flow,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Delta => "delta",
            LayerKind::Affine => "affine",
            LayerKind::Flow => "flow",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaParams {
    pub shape: Shape,
    pub delta: Vec<f64>,
}

impl DeltaParams {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            delta: vec![0.0; shape.len()],
        }
    }
}

/// Rotation (radians), translation (pixels) and dilation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            scale: 1.0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "affine scale must be positive, got {}",
                self.scale
            )));
        }
        if ![self.angle, self.shift_x, self.shift_y]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("non-finite affine parameter"));
        }
        Ok(())
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// Per-pixel displacement fields, row-major `height * width` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowParams {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub(crate) fn check_image(&self, shape: Shape) -> Result<()> {
        if self.height != shape.height
            || self.width != shape.width
            || self.u.len() != shape.plane()
            || self.v.len() != shape.plane()
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} flow", shape.height, shape.width),
                actual: format!("{}x{} flow", self.height, self.width),
            });
        }
        Ok(())
    }
}

/// Parameters of one attack layer. The layer kind is implied by the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamDocument", try_from = "ParamDocument")]
pub enum LayerParams {
    Delta(DeltaParams),
    Affine(AffineParams),
    Flow(FlowParams),
}

impl LayerParams {
    /// The identity element of a layer for images of `shape`.
    pub fn identity(kind: LayerKind, shape: Shape) -> Self {
        match kind {
            LayerKind::Delta => LayerParams::Delta(DeltaParams::zeros(shape)),
            LayerKind::Affine => LayerParams::Affine(AffineParams::identity()),
            LayerKind::Flow => LayerParams::Flow(FlowParams::zeros(shape.height, shape.width)),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Delta(_) => LayerKind::Delta,
            LayerParams::Affine(_) => LayerKind::Affine,
            LayerParams::Flow(_) => LayerKind::Flow,
        }
    }

    /// Flat parameter vector. Order: delta as stored; affine as
    /// `[angle, shift_x, shift_y, scale]`; flow as all of `u` then all of `v`.
    /// Parameter gradients use the same order.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            LayerParams::Delta(p) => p.delta.clone(),
            LayerParams::Affine(p) => vec![p.angle, p.shift_x, p.shift_y, p.scale],
            LayerParams::Flow(p) => p.u.iter().chain(&p.v).copied().collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        match self {
            LayerParams::Delta(p) => p.delta.len(),
            LayerParams::Affine(_) => 4,
            LayerParams::Flow(p) => p.u.len() + p.v.len(),
        }
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::invalid(format!(
                "{} values for a {} layer with {} parameters",
                values.len(),
                self.kind().name(),
                self.num_values()
            )));
        }
        match self {
            LayerParams::Delta(p) => p.delta.copy_from_slice(values),
            LayerParams::Affine(p) => {
                p.angle = values[0];
                p.shift_x = values[1];
                p.shift_y = values[2];
                p.scale = values[3];
            }
            LayerParams::Flow(p) => {
                let n = p.u.len();
                p.u.copy_from_slice(&values[..n]);
                p.v.copy_from_slice(&values[n..]);
            }
        }
        Ok(())
    }

    /// Checks that these parameters can act on images of `shape`.
    pub fn check_image(&self, shape: Shape) -> Result<()> {
        match self {
            LayerParams::Delta(p) => shape.check(&p.shape),
            LayerParams::Affine(p) => p.validate(),
            LayerParams::Flow(p) => p.check_image(shape),
        }
    }

    pub fn forward(&self, x: &Image) -> Result<Image> {
        match self {
            LayerParams::Delta(p) => delta_forward(x, p),
            LayerParams::Affine(p) => affine_forward(x, p),
            LayerParams::Flow(p) => flow_forward(x, p),
        }
    }
}

/// Vector-Jacobian product of one layer at input `x`: returns the gradient
/// with respect to the layer parameters (flat, see [`LayerParams::flat`])
/// and with respect to the layer input.
pub fn layer_vjp(x: &Image, params: &LayerParams, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    match params {
        LayerParams::Delta(p) => delta::delta_vjp(x, p, upstream),
        LayerParams::Affine(p) => affine::affine_vjp(x, p, upstream),
        LayerParams::Flow(p) => flow::flow_vjp(x, p, upstream),
    }
}

/// JSON form of a layer's parameters: `{kind, shape, values}`.
///
/// Shapes are `[channels, height, width]` for delta, `[4]` for affine and
/// `[2, height, width]` for flow.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamDocument {
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl From<LayerParams> for ParamDocument {
    fn from(p: LayerParams) -> Self {
        let shape = match &p {
            LayerParams::Delta(d) => vec![d.shape.channels, d.shape.height, d.shape.width],
            LayerParams::Affine(_) => vec![4],
            LayerParams::Flow(f) => vec![2, f.height, f.width],
        };
        ParamDocument {
            kind: p.kind(),
            shape,
            values: p.flat(),
        }
    }
}

impl TryFrom<ParamDocument> for LayerParams {
    type Error = Error;

    fn try_from(doc: ParamDocument) -> Result<Self> {
        let expect = |n: usize| -> Result<()> {
            if doc.values.len() != n {
                return Err(Error::invalid(format!(
                    "{} layer document has {} values, shape implies {n}",
                    doc.kind.name(),
                    doc.values.len()
                )));
            }
            Ok(())
        };
        let mut params = match (doc.kind, doc.shape.as_slice()) {
            (LayerKind::Delta, &[c, h, w]) => {
                expect(c * h * w)?;
                LayerParams::Delta(DeltaParams::zeros(Shape::new(h, w, c)))
            }
            (LayerKind::Affine, &[4]) => LayerParams::Affine(AffineParams::identity()),
            (LayerKind::Flow, &[2, h, w]) => {
                expect(2 * h * w)?;
                LayerParams::Flow(FlowParams::zeros(h, w))
            }
            (kind, shape) => {
                return Err(Error::invalid(format!(
                    "bad shape {shape:?} for a {} layer",
                    kind.name()
                )))
            }
        };
        params.set_flat(&doc.values)?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_document_round_trip() {
        let mut flow = FlowParams::zeros(2, 3);
        flow.u[1] = 0.5;
        flow.v[4] = -1.25;
        for p in [
            LayerParams::Flow(flow),
            LayerParams::Affine(AffineParams {
                angle: 0.1,
                shift_x: -2.0,
                shift_y: 1.0,
                scale: 1.1,
            }),
            LayerParams::Delta(DeltaParams::zeros(Shape::new(2, 2, 3))),
        ] {
            let json = serde_json::to_string(&p).unwrap();
            let back: LayerParams = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn param_document_shape() {
        let json = serde_json::to_value(LayerParams::Flow(FlowParams::zeros(2, 3))).unwrap();
        assert_eq!(json["kind"], "flow");
        assert_eq!(json["shape"], serde_json::json!([2, 2, 3]));
        let bad = r#"{"kind":"flow","shape":[2,2,2],"values":[0.0]}"#;
        assert!(serde_json::from_str::<LayerParams>(bad).is_err());
    }
}
