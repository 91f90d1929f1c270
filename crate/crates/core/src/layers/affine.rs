//! Rotation about the centre, dilation and translation.
//!
//! The normalized matrix maps output coordinates in `[-1, 1]^2` (pixel
//! centres, `x_n = (c - (W-1)/2) / (W/2)`) to source coordinates:
//! `src = R(-angle) p / scale + (-2 shift_x / W, -2 shift_y / H)`.
//! The sampling grid is evaluated with the equivalent pixel-space algebra
//! so the identity parameters reproduce integer coordinates exactly.

use super::sampling::{bilinear_sample, bilinear_sample_vjp, SamplingGrid};
use super::AffineParams;
use crate::error::{Error, Result};
use crate::imagecore::Image;

/// 2×3 inverse-warp matrix in normalized coordinates.
pub fn make_affine_matrix(p: &AffineParams, width: usize, height: usize) -> Result<[[f64; 3]; 2]> {
    p.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("zero image dimension"));
    }
    let (sin, cos) = p.angle.sin_cos();
    let k = 1.0 / p.scale;
    Ok([
        [k * cos, k * sin, -2.0 * p.shift_x / width as f64],
        [-k * sin, k * cos, -2.0 * p.shift_y / height as f64],
    ])
}

struct Linear {
    a: f64,
    b: f64,
    d: f64,
    e: f64,
}

fn grid_with(lin: &Linear, shift_x: f64, shift_y: f64, height: usize, width: usize) -> SamplingGrid {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let aspect_xy = width as f64 / height as f64;
    let aspect_yx = height as f64 / width as f64;
    let mut xs = Vec::with_capacity(height * width);
    let mut ys = Vec::with_capacity(height * width);
    for r in 0..height {
        let dy = r as f64 - cy;
        for c in 0..width {
            let dx = c as f64 - cx;
            xs.push(cx + lin.a * dx + lin.b * aspect_xy * dy - shift_x);
            ys.push(cy + lin.d * aspect_yx * dx + lin.e * dy - shift_y);
        }
    }
    SamplingGrid {
        height,
        width,
        xs,
        ys,
    }
}

fn linear_part(p: &AffineParams) -> Linear {
    let (sin, cos) = p.angle.sin_cos();
    let k = 1.0 / p.scale;
    Linear {
        a: k * cos,
        b: k * sin,
        d: -k * sin,
        e: k * cos,
    }
}

/// Source coordinates (pixels) for every output pixel.
pub fn affine_grid(p: &AffineParams, height: usize, width: usize) -> Result<SamplingGrid> {
    p.validate()?;
    Ok(grid_with(&linear_part(p), p.shift_x, p.shift_y, height, width))
}

pub fn affine_forward(x: &Image, p: &AffineParams) -> Result<Image> {
    bilinear_sample(x, &affine_grid(p, x.height(), x.width())?)
}

pub(super) fn affine_vjp(x: &Image, p: &AffineParams, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (x.height(), x.width());
    let grid = affine_grid(p, h, w)?;
    let vjp = bilinear_sample_vjp(x, &grid, upstream)?;

    // Coordinate derivatives share the grid layout; only the linear part
    // changes with angle and scale.
    let (sin, cos) = p.angle.sin_cos();
    let k = 1.0 / p.scale;
    let d_angle = grid_with(
        &Linear {
            a: -k * sin,
            b: k * cos,
            d: -k * cos,
            e: -k * sin,
        },
        0.0,
        0.0,
        h,
        w,
    );
    let lin = linear_part(p);
    let d_scale = grid_with(
        &Linear {
            a: -lin.a * k,
            b: -lin.b * k,
            d: -lin.d * k,
            e: -lin.e * k,
        },
        0.0,
        0.0,
        h,
        w,
    );
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut g = [0.0; 4];
    for i in 0..h * w {
        let (gx, gy) = (vjp.d_xs[i], vjp.d_ys[i]);
        g[0] += gx * (d_angle.xs[i] - cx) + gy * (d_angle.ys[i] - cy);
        g[1] -= gx;
        g[2] -= gy;
        g[3] += gx * (d_scale.xs[i] - cx) + gy * (d_scale.ys[i] - cy);
    }
    Ok((g.to_vec(), vjp.d_input))
}
