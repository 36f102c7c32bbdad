use std::path::Path;

use super::{byte_to_pixel, pixel_byte, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let pixels = &images[16..];
    let expected = n * rows * cols;
    if pixels.len() != expected {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, expected {expected}",
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, expected {n}",
            label_bytes.len()
        )));
    }
    let data = pixels.iter().map(|&b| byte_to_pixel(b)).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data)?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, num_classes, Split::Train)
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&ib, &lb, num_classes)
}

/// Encodes single-channel images as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Format(format!("IDX holds N x 1 x H x W images, got {:?}", s)));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| pixel_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&y| y as u8));
    out
}
