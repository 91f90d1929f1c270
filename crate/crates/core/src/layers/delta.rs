use super::DeltaParams;
use crate::error::{Error, Result};
use crate::imagecore::Image;

/// `clamp(x + delta, 0, 1)`.
pub fn delta_forward(x: &Image, p: &DeltaParams) -> Result<Image> {
    x.shape().check(&p.shape)?;
    if p.delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite delta"));
    }
    let data = x
        .data()
        .iter()
        .zip(&p.delta)
        .map(|(a, d)| (a + d).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_valid(x.shape(), data))
}

/// Both gradients equal `upstream` where the clamp is inactive, zero where it
/// is active.
pub(super) fn delta_vjp(x: &Image, p: &DeltaParams, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    x.shape().check(&p.shape)?;
    if upstream.len() != p.delta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} upstream values", p.delta.len()),
            actual: upstream.len().to_string(),
        });
    }
    let g: Vec<f64> = x
        .data()
        .iter()
        .zip(&p.delta)
        .zip(upstream)
        .map(|((a, d), u)| {
            let s = a + d;
            if (0.0..=1.0).contains(&s) {
                *u
            } else {
                0.0
            }
        })
        .collect();
    Ok((g.clone(), g))
}
