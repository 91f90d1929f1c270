use std::path::Path;

use super::{Image, LabeledDataset, Shape};
use crate::error::{Error, Result};

/// One label byte followed by a 32×32 R, G and B plane.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_cifar_binary(&bytes)
}

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    let shape = Shape::new(32, 32, 3);
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, record) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
        let offset = i * CIFAR_RECORD_LEN;
        if record.len() != CIFAR_RECORD_LEN {
            return Err(Error::Format {
                offset,
                message: format!(
                    "truncated record: {} of {CIFAR_RECORD_LEN} bytes",
                    record.len()
                ),
            });
        }
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let data = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::from_valid(shape, data));
        labels.push(label);
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES)
}
