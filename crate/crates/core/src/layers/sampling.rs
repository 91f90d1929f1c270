//! Bilinear grid sampling with border-replicate addressing.

use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};

/// Per-output-pixel source coordinates in pixel units: `xs` is the column,
/// `ys` the row. Row-major, `height * width` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl SamplingGrid {
    pub fn identity(height: usize, width: usize) -> Self {
        let mut xs = Vec::with_capacity(height * width);
        let mut ys = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                xs.push(c as f64);
                ys.push(r as f64);
            }
        }
        Self {
            height,
            width,
            xs,
            ys,
        }
    }

    fn validate(&self, shape: Shape) -> Result<()> {
        if self.height != shape.height
            || self.width != shape.width
            || self.xs.len() != shape.plane()
            || self.ys.len() != shape.plane()
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} grid", shape.height, shape.width),
                actual: format!("{}x{} grid", self.height, self.width),
            });
        }
        if self.xs.iter().chain(&self.ys).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sampling coordinate"));
        }
        Ok(())
    }
}

/// Where one output pixel reads from: the anchor cell, fractional offsets,
/// and whether each coordinate was inside the image (outside ones are
/// clamped and carry no gradient).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fx: f64,
    pub fy: f64,
    pub x_live: bool,
    pub y_live: bool,
}

#[inline]
fn axis(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let live = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i0 = i0.min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let f = if i1 == i0 { 0.0 } else { c - i0 as f64 };
    (i0, i1, f, live)
}

#[inline]
pub(crate) fn tap(xs: f64, ys: f64, height: usize, width: usize) -> Tap {
    let (c0, c1, fx, x_live) = axis(xs, width);
    let (r0, r1, fy, y_live) = axis(ys, height);
    Tap {
        r0,
        r1,
        c0,
        c1,
        fx,
        fy,
        x_live,
        y_live,
    }
}

/// Interpolated value inside one cell, written in the anchored closed form
/// `x00 + (x10-x00)(1-fy)fx + (x01-x00)fy(1-fx) + (x11-x00)fy fx`, where
/// `x10` is the horizontal neighbour and `x01` the vertical one.
#[inline]
pub(crate) fn cell_value(x00: f64, x10: f64, x01: f64, x11: f64, fx: f64, fy: f64) -> f64 {
    x00 + (x10 - x00) * ((1.0 - fy) * fx) + (x01 - x00) * (fy * (1.0 - fx)) + (x11 - x00) * (fy * fx)
}

pub fn bilinear_sample(x: &Image, grid: &SamplingGrid) -> Result<Image> {
    let shape = x.shape();
    grid.validate(shape)?;
    let plane = shape.plane();
    let w = shape.width;
    let src = x.data();
    let mut out = vec![0.0; shape.len()];
    for p in 0..plane {
        let t = tap(grid.xs[p], grid.ys[p], shape.height, w);
        for ch in 0..shape.channels {
            let base = ch * plane;
            let v = cell_value(
                src[base + t.r0 * w + t.c0],
                src[base + t.r0 * w + t.c1],
                src[base + t.r1 * w + t.c0],
                src[base + t.r1 * w + t.c1],
                t.fx,
                t.fy,
            );
            out[base + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Image::from_valid(shape, out))
}

/// Vector-Jacobian product of [`bilinear_sample`]: gradients with respect to
/// the grid coordinates (`d_xs`, `d_ys`) and to the sampled image.
pub(crate) struct SampleVjp {
    pub d_xs: Vec<f64>,
    pub d_ys: Vec<f64>,
    pub d_input: Vec<f64>,
}

pub(crate) fn bilinear_sample_vjp(
    x: &Image,
    grid: &SamplingGrid,
    upstream: &[f64],
) -> Result<SampleVjp> {
    let shape = x.shape();
    grid.validate(shape)?;
    if upstream.len() != shape.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} upstream values", shape.len()),
            actual: format!("{}", upstream.len()),
        });
    }
    let plane = shape.plane();
    let w = shape.width;
    let src = x.data();
    let mut d_xs = vec![0.0; plane];
    let mut d_ys = vec![0.0; plane];
    let mut d_input = vec![0.0; shape.len()];
    for p in 0..plane {
        let t = tap(grid.xs[p], grid.ys[p], shape.height, w);
        let (i00, i10, i01, i11) = (
            t.r0 * w + t.c0,
            t.r0 * w + t.c1,
            t.r1 * w + t.c0,
            t.r1 * w + t.c1,
        );
        let (w00, w10, w01, w11) = (
            (1.0 - t.fx) * (1.0 - t.fy),
            t.fx * (1.0 - t.fy),
            (1.0 - t.fx) * t.fy,
            t.fx * t.fy,
        );
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..shape.channels {
            let base = ch * plane;
            let g = upstream[base + p];
            if g == 0.0 {
                continue;
            }
            let (x00, x10, x01, x11) = (
                src[base + i00],
                src[base + i10],
                src[base + i01],
                src[base + i11],
            );
            gx += g * ((x10 - x00) * (1.0 - t.fy) + (x11 - x01) * t.fy);
            gy += g * ((x01 - x00) * (1.0 - t.fx) + (x11 - x10) * t.fx);
            d_input[base + i00] += g * w00;
            d_input[base + i10] += g * w10;
            d_input[base + i01] += g * w01;
            d_input[base + i11] += g * w11;
        }
        // Coordinates pinned by the border clamp do not move the output.
        if t.x_live && t.c1 != t.c0 {
            d_xs[p] = gx;
        }
        if t.y_live && t.r1 != t.r0 {
            d_ys[p] = gy;
        }
    }
    Ok(SampleVjp {
        d_xs,
        d_ys,
        d_input,
    })
}
