//! Image distances: ℓp, windowed SSIM and an activation-cosine perceptual
//! distance computed on the in-repo network.

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ConvNet};
use crate::error::{Error, Result};
use crate::imagecore::Image;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

/// Distances between an original and a perturbed image. `ssim` is absent
/// for images smaller than the SSIM window, `lpips_style` for models
/// without an activation metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub linf: f64,
    pub l2: f64,
    pub ssim: Option<f64>,
    pub lpips_style: Option<f64>,
}

impl MetricReport {
    pub fn compute<M: Classifier>(model: &M, x: &Image, y: &Image) -> Result<Self> {
        Ok(Self {
            linf: lp_distance(x, y, Norm::Linf)?,
            l2: lp_distance(x, y, Norm::L2)?,
            ssim: ssim(x, y).ok(),
            lpips_style: model.perceptual_distance(x, y),
        })
    }
}

pub fn lp_distance(x: &Image, y: &Image, norm: Norm) -> Result<f64> {
    x.shape().check(&y.shape())?;
    let diffs = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs());
    Ok(match norm {
        Norm::Linf => diffs.fold(0.0, f64::max),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    })
}

struct WindowStats {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn window_stats(gx: &[f64], gy: &[f64], width: usize, r0: usize, c0: usize) -> WindowStats {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in r0..r0 + SSIM_WINDOW {
        for c in c0..c0 + SSIM_WINDOW {
            let (a, b) = (gx[r * width + c], gy[r * width + c]);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
    }
    let (mx, my) = (sx / n, sy / n);
    WindowStats {
        mx,
        my,
        vx: sxx / n - mx * mx,
        vy: syy / n - my * my,
        cxy: sxy / n - mx * my,
    }
}

fn ssim_check(x: &Image, y: &Image) -> Result<()> {
    x.shape().check(&y.shape())?;
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}",
            x.shape()
        )));
    }
    Ok(())
}

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights) of the
/// channel-mean grayscale images, with dynamic range 1.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_check(x, y)?;
    let (gx, gy) = (x.grayscale(), y.grayscale());
    let (h, w) = (x.height(), x.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let s = window_stats(&gx, &gy, w, r0, c0);
            let num = (2.0 * s.mx * s.my + SSIM_C1) * (2.0 * s.cxy + SSIM_C2);
            let den = (s.mx * s.mx + s.my * s.my + SSIM_C1) * (s.vx + s.vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM and its gradient with respect to every intensity of `y`.
pub fn ssim_grad(x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    ssim_check(x, y)?;
    let (gx, gy) = (x.grayscale(), y.grayscale());
    let (h, w) = (x.height(), x.width());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let windows = ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    let mut grad_gray = vec![0.0; h * w];
    let mut total = 0.0;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let s = window_stats(&gx, &gy, w, r0, c0);
            let a1 = 2.0 * s.mx * s.my + SSIM_C1;
            let a2 = 2.0 * s.cxy + SSIM_C2;
            let b1 = s.mx * s.mx + s.my * s.my + SSIM_C1;
            let b2 = s.vx + s.vy + SSIM_C2;
            let v = a1 * a2 / (b1 * b2);
            total += v;
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let i = r * w + c;
                    let d_a1 = 2.0 * s.mx / n;
                    let d_a2 = 2.0 * (gx[i] - s.mx) / n;
                    let d_b1 = 2.0 * s.my / n;
                    let d_b2 = 2.0 * (gy[i] - s.my) / n;
                    let d = (d_a1 * a2 + a1 * d_a2) / (b1 * b2) - v * (d_b1 / b1 + d_b2 / b2);
                    grad_gray[i] += d / windows;
                }
            }
        }
    }
    let channels = x.channels();
    let share = 1.0 / channels as f64;
    let mut grad = vec![0.0; x.data().len()];
    for ch in 0..channels {
        for (g, gg) in grad[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&grad_gray) {
            *g = gg * share;
        }
    }
    Ok((total / windows, grad))
}

fn require_trained(net: &ConvNet) -> Result<()> {
    if !net.is_trained() {
        return Err(Error::InvalidState(
            "perceptual distance needs trained network weights".into(),
        ));
    }
    Ok(())
}

/// Unit-normalises the channel vector at every spatial position; zero
/// vectors stay zero. Returns the normalised map and the norms.
fn normalize_positions(act: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let positions = act.len() / channels;
    let mut out = vec![0.0; act.len()];
    let mut norms = vec![0.0; positions];
    for p in 0..positions {
        let norm = (0..channels)
            .map(|k| act[k * positions + p].powi(2))
            .sum::<f64>()
            .sqrt();
        norms[p] = norm;
        if norm > 0.0 {
            for k in 0..channels {
                out[k * positions + p] = act[k * positions + p] / norm;
            }
        }
    }
    (out, norms)
}

fn layer_distance(a: &[f64], b: &[f64], channels: usize) -> f64 {
    let positions = a.len() / channels;
    let (na, _) = normalize_positions(a, channels);
    let (nb, _) = normalize_positions(b, channels);
    na.iter().zip(&nb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / positions as f64
}

/// Gradient of `layer_distance(a, b)` with respect to `b`.
fn layer_distance_grad(a: &[f64], b: &[f64], channels: usize) -> Vec<f64> {
    let positions = a.len() / channels;
    let (na, _) = normalize_positions(a, channels);
    let (nb, norms) = normalize_positions(b, channels);
    let mut grad = vec![0.0; b.len()];
    for p in 0..positions {
        if norms[p] == 0.0 {
            continue;
        }
        let g_hat: Vec<f64> = (0..channels)
            .map(|k| 2.0 * (nb[k * positions + p] - na[k * positions + p]) / positions as f64)
            .collect();
        let proj: f64 = (0..channels).map(|k| nb[k * positions + p] * g_hat[k]).sum();
        for k in 0..channels {
            grad[k * positions + p] = (g_hat[k] - nb[k * positions + p] * proj) / norms[p];
        }
    }
    grad
}

/// Sum over the two conv blocks of the mean squared difference between
/// unit-normalised post-ReLU channel vectors.
pub fn lpips_style(net: &ConvNet, x: &Image, y: &Image) -> Result<f64> {
    require_trained(net)?;
    x.shape().check(&y.shape())?;
    let cx = net.forward_cached(x)?;
    let cy = net.forward_cached(y)?;
    Ok(layer_distance(cx.act1(), cy.act1(), crate::classifier::CONV1_OUT)
        + layer_distance(cx.act2(), cy.act2(), crate::classifier::CONV2_OUT))
}

/// [`lpips_style`] and its gradient with respect to `y`.
pub fn lpips_style_grad(net: &ConvNet, x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    require_trained(net)?;
    x.shape().check(&y.shape())?;
    let cx = net.forward_cached(x)?;
    let cy = net.forward_cached(y)?;
    use crate::classifier::{CONV1_OUT, CONV2_OUT};
    let value = layer_distance(cx.act1(), cy.act1(), CONV1_OUT) + layer_distance(cx.act2(), cy.act2(), CONV2_OUT);
    let g1 = layer_distance_grad(cx.act1(), cy.act1(), CONV1_OUT);
    let g2 = layer_distance_grad(cx.act2(), cy.act2(), CONV2_OUT);
    let zeros = vec![0.0; net.num_classes()];
    let (_, grad) = net.backward(&cy, &zeros, Some(&g1), Some(&g2), false);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Image {
        Image::new(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn lp_one_hot() {
        let s = Shape::new(2, 2, 1);
        let x = Image::filled(s, 0.5).unwrap();
        let y = x.with_value(0, 1, 0, 0.75).unwrap();
        assert_eq!(lp_distance(&x, &y, Norm::Linf).unwrap(), 0.25);
        assert_eq!(lp_distance(&x, &y, Norm::L2).unwrap(), 0.25);
        assert_eq!(lp_distance(&x, &x, Norm::L2).unwrap(), 0.0);
        let z = Image::filled(Shape::new(2, 2, 3), 0.5).unwrap();
        assert!(lp_distance(&x, &z, Norm::L2).is_err());
    }

    #[test]
    fn ssim_constant_closed_form() {
        let s = Shape::new(8, 8, 3);
        let zero = Image::filled(s, 0.0).unwrap();
        let one = Image::filled(s, 1.0).unwrap();
        let v = ssim(&zero, &one).unwrap();
        assert!((v - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        assert!((v - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_reflexive_symmetric_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(10, 12, 3);
        for _ in 0..20 {
            let (x, y) = (random(&mut rng, s), random(&mut rng, s));
            assert_eq!(ssim(&x, &x).unwrap(), 1.0);
            let a = ssim(&x, &y).unwrap();
            assert_eq!(a, ssim(&y, &x).unwrap());
            assert!((-1.0..=1.0).contains(&a));
        }
        let tiny = Image::filled(Shape::new(7, 9, 1), 0.2).unwrap();
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(9, 10, 3);
        let x = random(&mut rng, s);
        let y = Image::from_clamped(s, random(&mut rng, s).data().iter().map(|v| 0.1 + 0.8 * v).collect()).unwrap();
        let (v, g) = ssim_grad(&x, &y).unwrap();
        assert_eq!(v, ssim(&x, &y).unwrap());
        let h = 1e-5;
        for i in [0, 7, 45, 200, s.len() - 1] {
            let mut p = y.data().to_vec();
            let mut m = y.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (ssim(&x, &Image::new(s, p).unwrap()).unwrap() - ssim(&x, &Image::new(s, m).unwrap()).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn lpips_needs_trained_net() {
        let s = Shape::new(8, 8, 3);
        let mut net = ConvNet::new(s, 3, 1).unwrap();
        let x = Image::filled(s, 0.3).unwrap();
        assert!(matches!(lpips_style(&net, &x, &x), Err(Error::InvalidState(_))));
        net.mark_trained();
        assert_eq!(lpips_style(&net, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn lpips_symmetric_and_gradient_consistent() {
        let s = Shape::new(8, 8, 3);
        let mut net = ConvNet::new(s, 3, 4).unwrap();
        net.mark_trained();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (random(&mut rng, s), random(&mut rng, s));
        let d = lpips_style(&net, &x, &y).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, lpips_style(&net, &y, &x).unwrap());
        let (v, g) = lpips_style_grad(&net, &x, &y).unwrap();
        assert_eq!(v, d);
        assert_eq!(g.len(), s.len());
        let (_, g0) = lpips_style_grad(&net, &x, &x).unwrap();
        assert!(g0.iter().all(|v| *v == 0.0));
    }
}
