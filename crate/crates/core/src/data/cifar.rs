use std::path::PathBuf;

use super::{byte_to_pixel, pixel_byte, Dataset, Split};
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

fn label_bytes(num_classes: usize) -> Result<usize> {
    match num_classes {
        10 => Ok(1),
        100 => Ok(2),
        c => Err(arg_err!("CIFAR binaries have 10 or 100 classes, not {c}")),
    }
}

/// Parses concatenated CIFAR binary records. CIFAR-100 records carry a
/// coarse label byte first, which is skipped.
pub fn parse_cifar_binary(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    let lb = label_bytes(num_classes)?;
    let record = lb + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "CIFAR payload of {} bytes is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(record) {
        labels.push(rec[lb - 1] as usize);
        data.extend(rec[lb..].iter().map(|&b| byte_to_pixel(b)));
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, num_classes, Split::Train)
}

pub fn load_cifar_binary(paths: &[PathBuf], num_classes: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    parse_cifar_binary(&bytes, num_classes)
}

/// Encodes a dataset as CIFAR binary records (coarse label 0 for 100 classes).
pub fn encode_cifar_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let lb = label_bytes(ds.num_classes())?;
    if ds.image_shape() != (3, 32, 32) {
        return Err(Error::Format(format!(
            "CIFAR records hold 3 x 32 x 32 images, got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * (lb + PIXELS));
    for (img, &y) in ds.images().data().chunks(PIXELS).zip(ds.labels()) {
        if lb == 2 {
            out.push(0);
        }
        out.push(y as u8);
        out.extend(img.iter().map(|&v| pixel_byte(v)));
    }
    Ok(out)
}
