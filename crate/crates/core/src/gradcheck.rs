//! Central finite-difference checks of every analytic gradient.
//!
//! Each check compares the directional derivative `<grad, d>` with
//! `(f(x + h d) - f(x - h d)) / 2h` along random directions, at random
//! points chosen away from clamps, integer sampling coordinates, ReLU
//! zeros and pooling ties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{Classifier, ConvNet};
use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};
use crate::layers::{
    affine_grid, layer_vjp, sequential_forward, sequential_trace, sequential_vjp, AffineParams, DeltaParams,
    FlowParams, LayerParams, SequentialPerturbation,
};
use crate::losses::{cross_entropy, cw_f6, tv_flow_loss};
use crate::metrics::{lpips_style, lpips_style_grad, ssim, ssim_grad};

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Every checked operation, in report order.
pub const OPS: [&str; 11] = [
    "delta",
    "affine",
    "flow",
    "sequential",
    "cw_f6",
    "cross_entropy",
    "tv_flow",
    "convnet_input",
    "convnet_params",
    "ssim",
    "lpips_style",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub ops: Vec<OpCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn image(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Image {
    Image::new(shape, uniform(rng, shape.len(), lo, hi)).expect("values in range")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], s: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

/// Coordinates safely inside one sampling cell, or safely outside the image.
fn coords_ok(xs: &[f64], ys: &[f64], height: usize, width: usize) -> bool {
    let m = 1e-3;
    let ok = |v: f64, len: usize| {
        let hi = (len - 1) as f64;
        if v < -m || v > hi + m {
            return true;
        }
        v > m && v < hi - m && (v - v.floor()) > m && (v - v.floor()) < 1.0 - m
    };
    xs.iter().all(|&x| ok(x, width)) && ys.iter().all(|&y| ok(y, height))
}

type Sample = Option<(f64, f64)>;

fn layer_point(rng: &mut ChaCha8Rng, params: LayerParams, x: &Image) -> Result<Sample> {
    let shape = x.shape();
    let n = params.num_values();
    let c = uniform(rng, shape.len(), -1.0, 1.0);
    let dp = uniform(rng, n, -1.0, 1.0);
    let dx = uniform(rng, shape.len(), -1.0, 1.0);
    let (gp, gx) = layer_vjp(x, &params, &c)?;
    let analytic = dot(&gp, &dp) + dot(&gx, &dx);
    let eval = |s: f64| -> Result<f64> {
        let mut p = params.clone();
        p.set_flat(&axpy(&params.flat(), s, &dp))?;
        let xi = Image::new(shape, axpy(x.data(), s, &dx))?;
        Ok(dot(&c, p.forward(&xi)?.data()))
    };
    Ok(Some((analytic, (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP))))
}

fn check_delta(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = Shape::new(4, 5, 3);
    let x = image(rng, shape, 0.1, 0.9);
    let p = LayerParams::Delta(DeltaParams {
        shape,
        delta: uniform(rng, shape.len(), -0.05, 0.05),
    });
    layer_point(rng, p, &x)
}

fn check_affine(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = Shape::new(8, 8, 3);
    let x = image(rng, shape, 0.05, 0.95);
    let p = AffineParams {
        angle: rng.gen_range(-0.3..0.3),
        shift_x: rng.gen_range(-1.5..1.5),
        shift_y: rng.gen_range(-1.5..1.5),
        scale: rng.gen_range(0.8..1.2),
    };
    let g = affine_grid(&p, shape.height, shape.width)?;
    if !coords_ok(&g.xs, &g.ys, shape.height, shape.width) {
        return Ok(None);
    }
    layer_point(rng, LayerParams::Affine(p), &x)
}

fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Option<FlowParams> {
    let p = FlowParams {
        height: h,
        width: w,
        u: uniform(rng, h * w, -1.5, 1.5),
        v: uniform(rng, h * w, -1.5, 1.5),
    };
    let xs: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 + p.u[i]).collect();
    let ys: Vec<f64> = (0..h * w).map(|i| (i / w) as f64 + p.v[i]).collect();
    coords_ok(&xs, &ys, h, w).then_some(p)
}

fn check_flow(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = Shape::new(6, 7, 3);
    let x = image(rng, shape, 0.05, 0.95);
    match random_flow(rng, shape.height, shape.width) {
        Some(p) => layer_point(rng, LayerParams::Flow(p), &x),
        None => Ok(None),
    }
}

fn check_sequential(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = Shape::new(6, 6, 3);
    let x = image(rng, shape, 0.1, 0.9);
    let Some(flow) = random_flow(rng, shape.height, shape.width) else {
        return Ok(None);
    };
    let s = SequentialPerturbation::new(vec![
        LayerParams::Flow(flow),
        LayerParams::Delta(DeltaParams {
            shape,
            delta: uniform(rng, shape.len(), -0.05, 0.05),
        }),
    ]);
    let c = uniform(rng, shape.len(), -1.0, 1.0);
    let dirs: Vec<Vec<f64>> = s.layers.iter().map(|l| uniform(rng, l.num_values(), -1.0, 1.0)).collect();
    let dx = uniform(rng, shape.len(), -1.0, 1.0);
    let trace = sequential_trace(&x, &s)?;
    let (gp, gx) = sequential_vjp(&trace, &s, &c)?;
    let analytic = gp.iter().zip(&dirs).map(|(g, d)| dot(g, d)).sum::<f64>() + dot(&gx, &dx);
    let eval = |h: f64| -> Result<f64> {
        let mut t = s.clone();
        for (l, d) in t.layers.iter_mut().zip(&dirs) {
            let moved = axpy(&l.flat(), h, d);
            l.set_flat(&moved)?;
        }
        let xi = Image::new(shape, axpy(x.data(), h, &dx))?;
        Ok(dot(&c, sequential_forward(&xi, &t)?.data()))
    };
    Ok(Some((analytic, (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP))))
}

fn check_cw(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let z = uniform(rng, 5, -2.0, 2.0);
    let y = rng.gen_range(0..5);
    let kappa = rng.gen_range(0.0..0.5);
    let mut others: Vec<f64> = z.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| *v).collect();
    others.sort_by(|a, b| b.total_cmp(a));
    let margin = z[y] - others[0];
    if others[0] - others[1] < 1e-3 || (margin + kappa).abs() < 1e-3 {
        return Ok(None);
    }
    let d = uniform(rng, 5, -1.0, 1.0);
    let (_, g) = cw_f6(&z, y, kappa)?;
    let f = |h: f64| cw_f6(&axpy(&z, h, &d), y, kappa).map(|r| r.0);
    Ok(Some((dot(&g, &d), (f(STEP)? - f(-STEP)?) / (2.0 * STEP))))
}

fn check_ce(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let z = uniform(rng, 5, -3.0, 3.0);
    let y = rng.gen_range(0..5);
    let d = uniform(rng, 5, -1.0, 1.0);
    let (_, g) = cross_entropy(&z, y)?;
    let f = |h: f64| cross_entropy(&axpy(&z, h, &d), y).map(|r| r.0);
    Ok(Some((dot(&g, &d), (f(STEP)? - f(-STEP)?) / (2.0 * STEP))))
}

fn check_tv(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (5, 6);
    let p = FlowParams {
        height: h,
        width: w,
        u: uniform(rng, h * w, -1.0, 1.0),
        v: uniform(rng, h * w, -1.0, 1.0),
    };
    let d = uniform(rng, 2 * h * w, -1.0, 1.0);
    let (_, g) = tv_flow_loss(&p);
    let f = |s: f64| {
        let mut q = p.clone();
        for i in 0..h * w {
            q.u[i] += s * d[i];
            q.v[i] += s * d[h * w + i];
        }
        tv_flow_loss(&q).0
    };
    Ok(Some((dot(&g, &d), (f(STEP) - f(-STEP)) / (2.0 * STEP))))
}

fn check_convnet_input(rng: &mut ChaCha8Rng, net: &ConvNet) -> Result<Sample> {
    let shape = net.input_shape();
    let x = image(rng, shape, 0.05, 0.95);
    let c = uniform(rng, net.num_classes(), -1.0, 1.0);
    let dx = uniform(rng, shape.len(), -1.0, 1.0);
    let base = net.forward_cached(&x)?;
    let plus = net.forward_cached(&Image::new(shape, axpy(x.data(), STEP, &dx))?)?;
    let minus = net.forward_cached(&Image::new(shape, axpy(x.data(), -STEP, &dx))?)?;
    if !net.same_pattern(&base, &plus) || !net.same_pattern(&base, &minus) {
        return Ok(None);
    }
    let g = net.backward_input(&base, &c);
    Ok(Some((dot(&g, &dx), (dot(&c, &plus.logits) - dot(&c, &minus.logits)) / (2.0 * STEP))))
}

fn check_convnet_params(rng: &mut ChaCha8Rng, net: &ConvNet) -> Result<Sample> {
    let shape = net.input_shape();
    let x = image(rng, shape, 0.0, 1.0);
    let c = uniform(rng, net.num_classes(), -1.0, 1.0);
    let dirs: Vec<Vec<f64>> = net.tensors().iter().map(|t| uniform(rng, t.len(), -1.0, 1.0)).collect();
    let moved = |s: f64| {
        let mut n = net.clone();
        for (t, d) in n.tensors_mut().iter_mut().zip(&dirs) {
            *t = axpy(t, s, d);
        }
        n
    };
    let base = net.forward_cached(&x)?;
    let plus = moved(STEP).forward_cached(&x)?;
    let minus = moved(-STEP).forward_cached(&x)?;
    if !net.same_pattern(&base, &plus) || !net.same_pattern(&base, &minus) {
        return Ok(None);
    }
    let (grads, _) = net.backward(&base, &c, None, None, true);
    let grads = grads.expect("requested");
    let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| dot(g, d)).sum();
    Ok(Some((analytic, (dot(&c, &plus.logits) - dot(&c, &minus.logits)) / (2.0 * STEP))))
}

fn check_ssim(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = Shape::new(10, 10, 3);
    let x = image(rng, shape, 0.0, 1.0);
    let y = image(rng, shape, 0.05, 0.95);
    let d = uniform(rng, shape.len(), -1.0, 1.0);
    let (_, g) = ssim_grad(&x, &y)?;
    let f = |s: f64| -> Result<f64> { ssim(&x, &Image::new(shape, axpy(y.data(), s, &d))?) };
    Ok(Some((dot(&g, &d), (f(STEP)? - f(-STEP)?) / (2.0 * STEP))))
}

fn check_lpips(rng: &mut ChaCha8Rng, net: &ConvNet) -> Result<Sample> {
    let shape = net.input_shape();
    let x = image(rng, shape, 0.0, 1.0);
    let y = image(rng, shape, 0.05, 0.95);
    let d = uniform(rng, shape.len(), -1.0, 1.0);
    let yp = Image::new(shape, axpy(y.data(), STEP, &d))?;
    let ym = Image::new(shape, axpy(y.data(), -STEP, &d))?;
    let base = net.forward_cached(&y)?;
    if !net.same_pattern(&base, &net.forward_cached(&yp)?) || !net.same_pattern(&base, &net.forward_cached(&ym)?) {
        return Ok(None);
    }
    let (_, g) = lpips_style_grad(net, &x, &y)?;
    let numeric = (lpips_style(net, &x, &yp)? - lpips_style(net, &x, &ym)?) / (2.0 * STEP);
    Ok(Some((dot(&g, &d), numeric)))
}

/// Runs `points` accepted samples per operation. `corrupt` names an op
/// whose analytic gradient is scaled by 1.001 (negative control).
pub fn run_gradcheck(seed: u64, points: usize, corrupt: Option<&str>) -> Result<GradcheckReport> {
    if points == 0 {
        return Err(Error::invalid("need at least one point per op"));
    }
    if let Some(op) = corrupt {
        if !OPS.contains(&op) {
            return Err(Error::invalid(format!("unknown op '{op}' (known: {})", OPS.join(", "))));
        }
    }
    let mut net = ConvNet::new(Shape::new(8, 8, 3), 4, seed)?;
    // the perceptual metric refuses untrained weights; any weights are fine here
    net.mark_trained();
    let mut ops = Vec::with_capacity(OPS.len());
    for (k, op) in OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(k as u64));
        let tolerance = if k < 7 { LAYER_TOLERANCE } else { MODEL_TOLERANCE };
        let scale = if corrupt == Some(*op) { 1.001 } else { 1.0 };
        let mut worst: f64 = 0.0;
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < points {
            attempts += 1;
            if attempts > 50 * points {
                return Err(Error::InvalidState(format!(
                    "{op}: too few smooth sample points ({accepted} of {points})"
                )));
            }
            let sample = match *op {
                "delta" => check_delta(&mut rng)?,
                "affine" => check_affine(&mut rng)?,
                "flow" => check_flow(&mut rng)?,
                "sequential" => check_sequential(&mut rng)?,
                "cw_f6" => check_cw(&mut rng)?,
                "cross_entropy" => check_ce(&mut rng)?,
                "tv_flow" => check_tv(&mut rng)?,
                "convnet_input" => check_convnet_input(&mut rng, &net)?,
                "convnet_params" => check_convnet_params(&mut rng, &net)?,
                "ssim" => check_ssim(&mut rng)?,
                "lpips_style" => check_lpips(&mut rng, &net)?,
                _ => unreachable!("op list is fixed"),
            };
            if let Some((analytic, numeric)) = sample {
                worst = worst.max(rel_error(analytic * scale, numeric));
                accepted += 1;
            }
        }
        ops.push(OpCheck {
            op: op.to_string(),
            points,
            max_rel_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
    }
    let passed = ops.iter().all(|o| o.passed);
    Ok(GradcheckReport {
        seed,
        step: STEP,
        ops,
        passed,
    })
}
