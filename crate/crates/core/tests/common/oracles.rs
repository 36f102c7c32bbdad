//! Independent reference computations shared by several test targets.

use super::LinearModel;
use dhat_core::Tensor;

/// Logits of a linear model by explicit loops.
pub fn linear_logits(m: &LinearModel, x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    let d = x.len() / n;
    let c = m.b.len();
    (0..n)
        .map(|i| {
            (0..c)
                .map(|k| {
                    let mut s = m.b.data()[k] as f64;
                    for j in 0..d {
                        s += x.data()[i * d + j] as f64 * m.w.data()[j * c + k] as f64;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn probs(z: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(z);
    z.iter().map(|v| (v - l).exp()).collect()
}

pub fn ce(z: &[f64], y: usize) -> f64 {
    log_sum_exp(z) - z[y]
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

pub fn trades_oracle(zc: &[Vec<f64>], za: &[Vec<f64>], y: &[usize], il: f64) -> f64 {
    let n = y.len() as f64;
    let mut total = 0.0;
    for i in 0..y.len() {
        total += ce(&zc[i], y[i]) + il * kl(&probs(&zc[i]), &probs(&za[i]));
    }
    total / n
}

pub fn mart_oracle(zc: &[Vec<f64>], za: &[Vec<f64>], y: &[usize], il: f64) -> f64 {
    let n = y.len() as f64;
    let mut total = 0.0;
    for i in 0..y.len() {
        let pa = probs(&za[i]);
        let pc = probs(&zc[i]);
        let other = (0..pa.len()).filter(|&k| k != y[i]).map(|k| pa[k]).fold(f64::MIN, f64::max);
        let bce = -pa[y[i]].ln() - (1.0 - other).ln();
        total += bce + il * kl(&pc, &pa) * (1.0 - pc[y[i]]);
    }
    total / n
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn brute_pairs(c: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..c {
        for j in 0..c {
            if i < j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Parameter count of a wide ResNet by closed form.
pub fn wrn_param_oracle(depth: usize, w: usize, classes: usize) -> usize {
    let n = (depth - 4) / 6;
    let mut total = 3 * 16 * 9;
    let mut prev = 16;
    for width in [16 * w, 32 * w, 64 * w] {
        for b in 0..n {
            let inp = if b == 0 { prev } else { width };
            total += 2 * inp + inp * width * 9 + 2 * width + width * width * 9;
            if b == 0 && inp != width {
                total += inp * width;
            }
        }
        prev = width;
    }
    total + 2 * prev + prev * classes + classes
}
