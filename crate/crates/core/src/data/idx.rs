//! Big-endian IDX files as used by MNIST.
//!
//! Images: `u32 0x00000803, u32 count, u32 rows, u32 cols`, then
//! `count * rows * cols` bytes. Labels: `u32 0x00000801, u32 count`, then
//! `count` bytes in `0..=9`.

use std::fs;
use std::path::Path;

use super::LabeledSample;
use crate::error::{IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            what,
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parsed images: `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadImageMagic(magic));
    }
    let count = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            what: "image data",
            expected,
            found: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..expected]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadLabelMagic(magic));
    }
    let count = be_u32(bytes, 4, "label header")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            what: "label data",
            expected,
            found: bytes.len(),
        });
    }
    let labels = &bytes[8..expected];
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::LabelOutOfRange(bad));
    }
    Ok(labels)
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    decode_idx(&image_bytes, &label_bytes)
}

pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let (count, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len(),
        }
        .into());
    }
    let dim = rows * cols;
    Ok(pixels
        .chunks_exact(dim.max(1))
        .take(count)
        .zip(labels)
        .map(|(px, &l)| LabeledSample {
            features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: usize::from(l),
        })
        .collect())
}

/// Encodes samples as an IDX pair; features are rounded back to bytes.
pub fn encode_idx(samples: &[LabeledSample], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + samples.len() * rows * cols);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + samples.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for s in samples {
        images.extend(
            s.features
                .iter()
                .map(|&f| (f.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        labels.push(s.label as u8);
    }
    (images, labels)
}

pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    samples: &[LabeledSample],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let (images, labels) = encode_idx(samples, rows, cols);
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}
