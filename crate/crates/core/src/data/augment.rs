use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

const PAD: usize = 4;

/// Random horizontal flip and random crop after zero padding by 4 pixels,
/// drawn per sample from `seed`.
pub fn augment_batch(x: &Tensor, seed: u64) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(s);
    let plane = h * w;
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let col = if flip { w - 1 - xx } else { xx };
                    let sx = col as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out.data_mut()[base + y * w + xx] = x.data()[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}
