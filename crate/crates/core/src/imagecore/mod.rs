//! Images, datasets and the small set of image utilities every other module
//! leans on.
//!
//! Intensities live in `[0, 1]`. Storage is channel-planar and row-major,
//! the same layout as a CIFAR-10 binary record, so ingestion is a copy.

mod cifar;
mod ppm;
mod synth;

pub use cifar::{load_cifar_binary, parse_cifar_binary, CIFAR_RECORD_LEN};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::{synth_dataset, SYNTH_CLASSES, SYNTH_NOISE_AMPLITUDE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height, width and channel count of an image or of a gradient buffer
/// laid out like one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        channel * self.plane() + row * self.width + col
    }

    pub(crate) fn check(&self, other: &Shape) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch {
                expected: self.to_string(),
                actual: other.to_string(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// An H×W×C grid of intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting non-finite or out-of-range intensities.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {}",
                shape.channels
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { shape, data })
    }

    /// Builds an image from arbitrary reals by clamping into `[0, 1]`.
    /// Non-finite values are still rejected.
    pub fn from_clamped(shape: Shape, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite intensity"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(shape, data)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Values already known to be valid; used on hot paths inside the crate.
    pub(crate) fn from_valid(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.shape.index(channel, row, col)]
    }

    pub fn channel_plane(&self, channel: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Channel-mean grayscale plane.
    pub fn grayscale(&self) -> Vec<f64> {
        let n = self.shape.plane();
        let c = self.shape.channels as f64;
        (0..n)
            .map(|i| {
                (0..self.shape.channels)
                    .map(|ch| self.data[ch * n + i])
                    .sum::<f64>()
                    / c
            })
            .collect()
    }

    /// Returns a copy with one intensity replaced.
    pub fn with_value(&self, channel: usize, row: usize, col: usize, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("intensity {value} outside [0, 1]")));
        }
        let mut data = self.data.clone();
        data[self.shape.index(channel, row, col)] = value;
        Ok(Self {
            shape: self.shape,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::ShapeMismatch {
                    expected: first.shape().to_string(),
                    actual: bad.shape().to_string(),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.images.first().map(Image::shape)
    }

    /// The first `n` samples (or all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Difference visualisation: `0.5 + gain * (perturbed - original)`, clamped.
pub fn diff_image(original: &Image, perturbed: &Image, gain: f64) -> Result<Image> {
    original.shape().check(&perturbed.shape())?;
    if !gain.is_finite() {
        return Err(Error::invalid("gain must be finite"));
    }
    let data = original
        .data()
        .iter()
        .zip(perturbed.data())
        .map(|(a, b)| (0.5 + gain * (b - a)).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_valid(original.shape(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_intensity() {
        let shape = Shape::new(1, 2, 1);
        assert!(Image::new(shape, vec![0.0, 1.5]).is_err());
        assert!(Image::new(shape, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(shape, vec![0.0]).is_err());
        assert!(Image::new(Shape::new(1, 1, 2), vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn diff_of_identical_images_is_mid_gray() {
        let x = Image::new(Shape::new(2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = diff_image(&x, &x, 5.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn diff_gain_and_clamp() {
        let x = Image::new(Shape::new(1, 2, 1), vec![0.5, 0.5]).unwrap();
        let y = Image::new(Shape::new(1, 2, 1), vec![0.55, 0.3]).unwrap();
        let d = diff_image(&x, &y, 5.0).unwrap();
        assert!((d.data()[0] - 0.75).abs() < 1e-12);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn diff_shape_mismatch() {
        let x = Image::filled(Shape::new(2, 2, 1), 0.0).unwrap();
        let y = Image::filled(Shape::new(2, 3, 1), 0.0).unwrap();
        assert!(matches!(
            diff_image(&x, &y, 5.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dataset_validates_labels() {
        let x = Image::filled(Shape::new(2, 2, 1), 0.0).unwrap();
        assert!(LabeledDataset::new(vec![x.clone()], vec![3], 3).is_err());
        assert!(LabeledDataset::new(vec![x], vec![], 3).is_err());
    }
}
