//! Clean and robust accuracy, cross-model transfer tables and noise images.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{fgsm, pgd, AttackConfig, AttackContext, LossMode, Reference};
use crate::data::Dataset;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::nn::{HeadMode, Model, Pass};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EVAL_BATCH: usize = 200;

/// Attack family used in an evaluation entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// Argmax predictions of `model` on a batch.
pub fn predict<M: Model + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<usize>> {
    let mut pass = Pass::inference();
    let xv = pass.input(x);
    let z = model.logits(&mut pass, xv)?;
    Ok(pass.graph.value(z).argmax_rows())
}

fn chunks(n: usize, batch: usize) -> impl Iterator<Item = (usize, usize)> {
    let batch = batch.max(1);
    (0..n).step_by(batch).map(move |s| (s, batch.min(n - s)))
}

fn accuracy(correct: &[bool]) -> f64 {
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Per-sample clean correctness.
pub fn clean_correct<M: Model + ?Sized>(model: &M, ds: &Dataset, batch: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(ds.len());
    for (s, len) in chunks(ds.len(), batch) {
        let (x, y) = ds.range(s, len);
        out.extend(predict(model, &x)?.into_iter().zip(&y).map(|(p, &t)| p == t));
    }
    Ok(out)
}

pub fn evaluate_clean<M: Model + ?Sized>(model: &M, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(arg_err!("cannot evaluate on an empty dataset"));
    }
    Ok(accuracy(&clean_correct(model, ds, batch)?))
}

/// Per-sample outcome of a robustness evaluation.
#[derive(Clone, Debug)]
pub struct RobustResult {
    pub clean_correct: Vec<bool>,
    /// Attacked prediction correct and clean prediction correct.
    pub robust: Vec<bool>,
    pub adv_predictions: Vec<usize>,
}

impl RobustResult {
    pub fn clean_accuracy(&self) -> f64 {
        accuracy(&self.clean_correct)
    }

    pub fn robust_accuracy(&self) -> f64 {
        accuracy(&self.robust)
    }
}

fn attack_batch<M: Model + ?Sized>(
    model: &M,
    kind: AttackKind,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    ctx: &AttackContext,
) -> Result<Tensor> {
    match kind {
        AttackKind::Fgsm => fgsm(model, x, y, cfg.epsilon, cfg.pixel_bounds),
        AttackKind::Pgd => {
            let cfg = cfg.clone().with_loss(LossMode::Ce);
            Ok(pgd(model, x, Reference::Labels(y), &cfg, ctx)?.x_adv)
        }
    }
}

/// Adversarial copies of every sample, generated against `model`.
pub fn adversarial_dataset<M: Model + ?Sized>(
    model: &M,
    ds: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    ctx: &AttackContext,
    batch: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut parts = Vec::new();
    for (s, len) in chunks(ds.len(), batch) {
        let (x, y) = ds.range(s, len);
        parts.push(attack_batch(model, kind, &x, &y, cfg, &ctx.at(ctx.first_id + s as u64))?);
    }
    Tensor::cat_rows(&parts)
}

/// A sample is robust when both its clean and its attacked prediction are
/// correct.
pub fn evaluate_robust<M: Model + ?Sized>(
    model: &M,
    ds: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    ctx: &AttackContext,
    batch: usize,
) -> Result<RobustResult> {
    if ds.is_empty() {
        return Err(arg_err!("cannot evaluate on an empty dataset"));
    }
    cfg.validate()?;
    let mut res = RobustResult {
        clean_correct: Vec::with_capacity(ds.len()),
        robust: Vec::with_capacity(ds.len()),
        adv_predictions: Vec::with_capacity(ds.len()),
    };
    for (s, len) in chunks(ds.len(), batch) {
        let (x, y) = ds.range(s, len);
        let clean = predict(model, &x)?;
        let adv = attack_batch(model, kind, &x, &y, cfg, &ctx.at(ctx.first_id + s as u64))?;
        let adv_pred = predict(model, &adv)?;
        for i in 0..len {
            let ok = clean[i] == y[i];
            res.clean_correct.push(ok);
            res.robust.push(ok && adv_pred[i] == y[i]);
        }
        res.adv_predictions.extend(adv_pred);
    }
    Ok(res)
}

/// One attack row of an [`EvalReport`], echoing the exact settings used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub num_steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub random_start: bool,
    pub robust_accuracy: f64,
}

impl AttackEntry {
    pub fn new(kind: AttackKind, cfg: &AttackConfig, robust_accuracy: f64) -> Self {
        let (steps, step, restarts, rs) = match kind {
            AttackKind::Fgsm => (1, cfg.epsilon, 1, false),
            AttackKind::Pgd => (
                cfg.num_steps,
                cfg.effective_step_size(),
                cfg.restarts,
                cfg.random_start,
            ),
        };
        AttackEntry {
            attack: kind,
            epsilon: cfg.epsilon,
            num_steps: steps,
            step_size: step,
            restarts,
            random_start: rs,
            robust_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub model_digest: String,
    pub dataset_id: String,
    pub head_mode: HeadMode,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackEntry>,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Adversarial examples crafted on each model, evaluated on both.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferTable {
    /// `robust[src][dst]`: accuracy of model `dst` on examples crafted on `src`.
    pub robust: [[f64; 2]; 2],
    pub clean: [f64; 2],
    pub labels: Vec<usize>,
    /// `predictions[src][dst][i]`.
    pub predictions: [[Vec<usize>; 2]; 2],
}

impl TransferTable {
    /// Mean of the two self-attack cells.
    pub fn self_attack(&self) -> f64 {
        (self.robust[0][0] + self.robust[1][1]) / 2.0
    }

    /// Mean of the two transfer cells.
    pub fn transfer(&self) -> f64 {
        (self.robust[0][1] + self.robust[1][0]) / 2.0
    }
}

pub fn cross_evaluate<A: Model + ?Sized, B: Model + ?Sized>(
    model_a: &A,
    model_b: &B,
    ds: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    ctx: &AttackContext,
    batch: usize,
) -> Result<TransferTable> {
    let clean_a = clean_correct(model_a, ds, batch)?;
    let clean_b = clean_correct(model_b, ds, batch)?;
    let adv = [
        adversarial_dataset(model_a, ds, kind, cfg, ctx, batch)?,
        adversarial_dataset(model_b, ds, kind, cfg, ctx, batch)?,
    ];
    let labels = ds.labels().to_vec();
    let mut predictions: [[Vec<usize>; 2]; 2] = Default::default();
    let mut robust = [[0.0; 2]; 2];
    for (src, xa) in adv.iter().enumerate() {
        for dst in 0..2 {
            let mut preds = Vec::with_capacity(ds.len());
            for (s, len) in chunks(ds.len(), batch) {
                let xb = xa.slice_rows(s, len);
                preds.extend(if dst == 0 { predict(model_a, &xb)? } else { predict(model_b, &xb)? });
            }
            let clean = if dst == 0 { &clean_a } else { &clean_b };
            let ok: Vec<bool> = (0..ds.len())
                .map(|i| clean[i] && preds[i] == labels[i])
                .collect();
            robust[src][dst] = accuracy(&ok);
            predictions[src][dst] = preds;
        }
    }
    Ok(TransferTable {
        robust,
        clean: [accuracy(&clean_a), accuracy(&clean_b)],
        labels,
        predictions,
    })
}

/// `clamp(0.5 + gain * (x_adv - x), 0, 1)`.
pub fn noise_image(x: &Tensor, x_adv: &Tensor, gain: f64) -> Result<Tensor> {
    if x.shape() != x_adv.shape() {
        return Err(dim_err!("noise_image: shapes {:?} and {:?} differ", x.shape(), x_adv.shape()));
    }
    if !(gain > 0.0) {
        return Err(arg_err!("gain must be positive, got {gain}"));
    }
    let g = gain as Real;
    let mut out = x_adv.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(x.data()) {
        *o = (0.5 + g * (*o - c)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Writes one `C x H x W` (or `1 x C x H x W`) image with `C` of 1 or 3.
pub fn write_png(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    let s = if s.len() == 4 && s[0] == 1 { &s[1..] } else { s };
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(dim_err!("PNG export needs a 1- or 3-channel image, got {:?}", img.shape()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            bytes.push(crate::data::pixel_byte(img.data()[ch * plane + p]));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&bytes).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Reads an 8-bit grayscale or RGB PNG as `C x H x W` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = buf[p * c + ch] as Real / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Writes the amplified noise to `path` and the perturbed image next to it
/// (`<stem>_adv.png`); returns both paths.
pub fn export_noise(x: &Tensor, x_adv: &Tensor, gain: f64, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let noise = noise_image(x, x_adv, gain)?;
    write_png(&noise, path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("noise");
    let adv_path = path.with_file_name(format!("{stem}_adv.png"));
    write_png(x_adv, &adv_path)?;
    Ok((path.to_path_buf(), adv_path))
}
