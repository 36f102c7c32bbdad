//! Datasets: IDX and CIFAR binary parsers, synthetic blobs, batching.

mod augment;
mod cifar;
mod idx;
mod synth;

pub use augment::augment_batch;
pub use cifar::{encode_cifar_binary, load_cifar_binary, parse_cifar_binary};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx};
pub use synth::{synth_dataset, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `N x C x H x W` in `[0, 1]` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Format(format!(
                "images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Format("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!("label {y} out of range for {num_classes} classes")));
        }
        if let Some(&v) = images.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous samples `start..start + len`.
    pub fn range(&self, start: usize, len: usize) -> (Tensor, Vec<usize>) {
        (
            self.images.slice_rows(start, len),
            self.labels[start..start + len].to_vec(),
        )
    }

    pub fn subset(&self, start: usize, len: usize, split: Split) -> Result<Dataset> {
        if start + len > self.len() {
            return Err(arg_err!("subset {start}..{} exceeds {} samples", start + len, self.len()));
        }
        let (images, labels) = self.range(start, len);
        Dataset::new(images, labels, self.num_classes, split)
    }

    /// Splits off the last `len` samples, e.g. as a validation set.
    pub fn split_tail(&self, len: usize, split: Split) -> Result<(Dataset, Dataset)> {
        if len == 0 || len >= self.len() {
            return Err(arg_err!("cannot hold out {len} of {} samples", self.len()));
        }
        let head = self.len() - len;
        Ok((
            self.subset(0, head, self.split)?,
            self.subset(head, len, split)?,
        ))
    }

    /// Sample order for one epoch, shuffled by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}

/// Validation-set size rule: 1000 samples, or 20% for datasets under 5000.
pub fn default_val_size(n: usize) -> usize {
    if n >= 5000 {
        1000
    } else {
        (n / 5).max(1)
    }
}

pub(crate) fn byte_to_pixel(b: u8) -> Real {
    b as Real / 255.0
}

pub(crate) fn pixel_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
