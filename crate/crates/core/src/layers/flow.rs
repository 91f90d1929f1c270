use super::sampling::{bilinear_sample, bilinear_sample_vjp, SamplingGrid};
use super::FlowParams;
use crate::error::{Error, Result};
use crate::imagecore::Image;

fn flow_grid(p: &FlowParams) -> SamplingGrid {
    let mut grid = SamplingGrid::identity(p.height, p.width);
    for (x, u) in grid.xs.iter_mut().zip(&p.u) {
        *x += u;
    }
    for (y, v) in grid.ys.iter_mut().zip(&p.v) {
        *y += v;
    }
    grid
}

/// Output pixel `(r, c)` samples the source at `(c + u, r + v)`; one field
/// is shared by all channels.
pub fn flow_forward(x: &Image, p: &FlowParams) -> Result<Image> {
    p.check_image(x.shape())?;
    bilinear_sample(x, &flow_grid(p))
}

pub(super) fn flow_vjp(x: &Image, p: &FlowParams, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check_image(x.shape())?;
    if upstream.len() != x.shape().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} upstream values", x.shape().len()),
            actual: upstream.len().to_string(),
        });
    }
    let vjp = bilinear_sample_vjp(x, &flow_grid(p), upstream)?;
    let mut grad = vjp.d_xs;
    grad.extend_from_slice(&vjp.d_ys);
    Ok((grad, vjp.d_input))
}
