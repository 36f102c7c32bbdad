use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{arg_err, Result};
use crate::tensor::{Real, Tensor};

fn default_channels() -> usize {
    1
}

fn default_blobs() -> usize {
    2
}

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a prototype made of `blobs` Gaussian bumps at
/// seed-chosen positions; a sample is its class prototype plus i.i.d.
/// pixel noise of standard deviation `sigma`, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub sigma: f64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class == 0 || self.image_size < 2 {
            return Err(arg_err!(
                "synthetic data needs >= 2 classes, >= 1 sample per class and images of side >= 2"
            ));
        }
        if self.channels == 0 || self.blobs == 0 {
            return Err(arg_err!("channels and blobs must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(arg_err!("sigma must be non-negative, got {}", self.sigma));
        }
        Ok(())
    }

    /// Noise-free class prototypes, `C x channels x S x S`.
    pub fn prototypes(&self) -> Result<Tensor> {
        self.validate()?;
        let s = self.image_size;
        let width = (s as f64 / 8.0).max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut protos = Tensor::zeros(&[self.num_classes, self.channels, s, s]);
        let plane = s * s;
        let margin = if s > 4 { 1.0 } else { 0.0 };
        for c in 0..self.num_classes {
            for ch in 0..self.channels {
                let base = (c * self.channels + ch) * plane;
                for _ in 0..self.blobs {
                    let cy = rng.random_range(margin..=(s as f64 - 1.0 - margin));
                    let cx = rng.random_range(margin..=(s as f64 - 1.0 - margin));
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            let v = (-d2 / (2.0 * width * width)).exp();
                            let p = &mut protos.data_mut()[base + y * s + x];
                            *p = p.max(v as Real);
                        }
                    }
                }
            }
        }
        Ok(protos)
    }
}

/// Generates `num_classes * samples_per_class` samples, classes interleaved.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let protos = spec.prototypes()?;
    let per = spec.channels * spec.image_size * spec.image_size;
    let n = spec.num_classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_classes;
        labels.push(c);
        for &p in &protos.data()[c * per..(c + 1) * per] {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (p as f64 + spec.sigma * z).clamp(0.0, 1.0);
            data.push(v as Real);
        }
    }
    let images = Tensor::new(&[n, spec.channels, spec.image_size, spec.image_size], data)?;
    Dataset::new(images, labels, spec.num_classes, Split::Train)
}
