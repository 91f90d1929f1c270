use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, LabeledDataset, Shape};
use crate::error::{Error, Result};

/// Filled square, disk, plus-cross.
pub const SYNTH_CLASSES: usize = 3;

/// Half-width of the uniform texture noise added to the rendered shape.
pub const SYNTH_NOISE_AMPLITUDE: f64 = 0.05;

const MIN_SIZE: usize = 8;

/// Deterministic three-class shape dataset.
///
/// Every image is an RGB shape on a flat background. The background is
/// noise-free; the shape carries uniform texture noise. Foreground and
/// background intensities sit in opposite bands (`[0, 0.15]` vs
/// `[0.85, 1]`, polarity chosen per image) so each image has both flat
/// regions and edges with at least `0.7 - 2 * SYNTH_NOISE_AMPLITUDE` contrast.
/// Samples are interleaved by class: sample `i` has label `i % 3`.
pub fn synth_dataset(seed: u64, count: usize, size: usize) -> Result<LabeledDataset> {
    if size < MIN_SIZE {
        return Err(Error::invalid(format!(
            "synthetic images need side length >= {MIN_SIZE}, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("per-class sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(size, size, 3);
    let total = count * SYNTH_CLASSES;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % SYNTH_CLASSES;
        images.push(render(&mut rng, shape, label));
        labels.push(label);
    }
    LabeledDataset::new(images, labels, SYNTH_CLASSES)
}

fn render(rng: &mut ChaCha8Rng, shape: Shape, label: usize) -> Image {
    let s = shape.height as f64;
    let radius = rng.gen_range(0.2 * s..0.3 * s);
    // keep the whole shape at least 1.5 px away from the border
    let lo = radius + 1.5;
    let hi = s - 1.0 - radius - 1.5;
    let cy = rng.gen_range(lo..=hi.max(lo));
    let cx = rng.gen_range(lo..=hi.max(lo));
    let dark_background = rng.gen_bool(0.5);
    let mut band = |dark: bool| -> [f64; 3] {
        let base = if dark { 0.0 } else { 0.85 };
        [0, 1, 2].map(|_| base + rng.gen_range(0.0..0.15))
    };
    let bg = band(dark_background);
    let fg = band(!dark_background);

    let arm = (0.3 * radius).max(0.75);
    let half_side = 0.85 * radius;
    let inside = |dy: f64, dx: f64| match label {
        0 => dy.abs() <= half_side && dx.abs() <= half_side,
        1 => dy * dy + dx * dx <= radius * radius,
        _ => (dy.abs() <= radius && dx.abs() <= arm) || (dx.abs() <= radius && dy.abs() <= arm),
    };

    let plane = shape.plane();
    let mut data = vec![0.0; shape.len()];
    for r in 0..shape.height {
        for c in 0..shape.width {
            let hit = inside(r as f64 - cy, c as f64 - cx);
            for ch in 0..3 {
                let v = if hit {
                    let noise = rng.gen_range(-SYNTH_NOISE_AMPLITUDE..=SYNTH_NOISE_AMPLITUDE);
                    (fg[ch] + noise).clamp(0.0, 1.0)
                } else {
                    bg[ch]
                };
                data[ch * plane + r * shape.width + c] = v;
            }
        }
    }
    Image::from_valid(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let ds = synth_dataset(1, 10, 16).unwrap();
        assert_eq!(ds.len(), 30);
        for k in 0..3 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert_eq!(ds.shape(), Some(Shape::new(16, 16, 3)));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synth_dataset(5, 4, 12).unwrap();
        let b = synth_dataset(5, 4, 12).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(6, 4, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_tiny_images_and_zero_count() {
        assert!(matches!(synth_dataset(1, 1, 7), Err(Error::InvalidArgument(_))));
        assert!(synth_dataset(1, 0, 16).is_err());
        assert!(synth_dataset(1, 1, 8).is_ok());
    }

    #[test]
    fn background_and_shape_both_present() {
        let ds = synth_dataset(2, 20, 16).unwrap();
        for im in &ds.images {
            let p = im.channel_plane(0);
            let corner = p[0];
            assert!(p.iter().any(|&v| (v - corner).abs() > 0.5));
        }
    }
}
