//! ℓ∞-bounded white-box attacks.
//!
//! Attacks evaluate the model in inference mode: parameters are constants
//! and batch norm uses running statistics. Each sample draws its random
//! start from its own stream keyed by `(seed, sample id, restart)`, so the
//! result does not depend on batching or on the number of workers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::nn::{Model, Pass};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Ce,
    Kl,
}

fn default_restarts() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_bounds() -> [f64; 2] {
    [0.0, 1.0]
}

/// Settings of an iterative ℓ∞ attack. When `step_size` is unset it is
/// derived as `2.5 * epsilon / num_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub step_size: Option<f64>,
    pub num_steps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default = "default_bounds")]
    pub pixel_bounds: [f64; 2],
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step_size: f64, num_steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size: Some(step_size),
            num_steps,
            restarts: 1,
            random_start: true,
            loss_mode: LossMode::Ce,
            pixel_bounds: [0.0, 1.0],
        }
    }

    /// PGD with the step size derived from `epsilon` and `num_steps`.
    pub fn pgd_derived(epsilon: f64, num_steps: usize) -> Self {
        AttackConfig {
            step_size: None,
            ..AttackConfig::pgd(epsilon, 1.0, num_steps)
        }
    }

    pub fn with_loss(mut self, mode: LossMode) -> Self {
        self.loss_mode = mode;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.num_steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(arg_err!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(arg_err!("step_size must be positive, got {a}"));
            }
        }
        if self.num_steps == 0 {
            return Err(arg_err!("num_steps must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(arg_err!("restarts must be at least 1"));
        }
        let [lo, hi] = self.pixel_bounds;
        if lo > hi {
            return Err(arg_err!("pixel bounds [{lo}, {hi}] are inverted"));
        }
        Ok(())
    }
}

/// What the attack loss is measured against.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'r> {
    /// True labels, for cross-entropy attacks.
    Labels(&'r [usize]),
    /// Clean log-probabilities `N x C` of the model, for KL attacks.
    Clean(&'r Tensor),
}

/// Clean log-probabilities of `model` on `x`, the reference of a KL attack.
pub fn clean_reference<M: Model + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut pass = Pass::inference();
    let xv = pass.input(x);
    let z = model.logits(&mut pass, xv)?;
    let lp = pass.graph.log_softmax(z)?;
    Ok(pass.graph.value(lp).clone())
}

/// Seed, sample numbering and optional worker pool for an attack call.
#[derive(Clone, Debug, Default)]
pub struct AttackContext {
    pub seed: u64,
    /// Id of the first sample of the batch; sample `i` uses `first_id + i`.
    pub first_id: u64,
    pub workers: Option<Arc<rayon::ThreadPool>>,
}

impl AttackContext {
    pub fn new(seed: u64) -> Self {
        AttackContext {
            seed,
            ..Default::default()
        }
    }

    pub fn at(&self, first_id: u64) -> Self {
        AttackContext {
            first_id,
            ..self.clone()
        }
    }

    /// Uses `n` worker threads (1 means the calling thread only).
    pub fn with_workers(mut self, n: usize) -> Result<Self> {
        self.workers = if n > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        Ok(self)
    }

    fn worker_count(&self) -> usize {
        self.workers.as_ref().map_or(1, |p| p.current_num_threads())
    }
}

/// Adversarial batch with the per-sample final loss of the chosen restart.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub losses: Vec<Real>,
    /// `restart_losses[r][i]`: final loss of restart `r` on sample `i`.
    pub restart_losses: Vec<Vec<Real>>,
}

/// `clamp(clamp(x_adv, x - eps, x + eps), lo, hi)` element-wise.
pub fn project_linf(x_adv: &Tensor, x: &Tensor, epsilon: f64, bounds: [f64; 2]) -> Result<Tensor> {
    if epsilon < 0.0 || epsilon.is_nan() {
        return Err(arg_err!("epsilon must be non-negative, got {epsilon}"));
    }
    if x_adv.shape() != x.shape() {
        return Err(dim_err!(
            "project_linf: shapes {:?} and {:?} differ",
            x_adv.shape(),
            x.shape()
        ));
    }
    let mut out = x_adv.clone();
    project_into(out.data_mut(), x.data(), epsilon as Real, bounds);
    Ok(out)
}

fn project_into(adv: &mut [Real], x: &[Real], eps: Real, [lo, hi]: [f64; 2]) {
    let (lo, hi) = (lo as Real, hi as Real);
    for (a, &c) in adv.iter_mut().zip(x) {
        *a = a.clamp(c - eps, c + eps).clamp(lo, hi);
    }
}

/// Per-sample attack loss and, optionally, its gradient with respect to
/// the input.
fn loss_and_grad<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    reference: Reference<'_>,
    mode: LossMode,
    want_grad: bool,
) -> Result<(Vec<Real>, Option<Tensor>)> {
    let mut pass = Pass::inference();
    let xv = if want_grad {
        pass.graph.variable(x.clone())
    } else {
        pass.graph.constant(x.clone())
    };
    let z = model.logits(&mut pass, xv)?;
    let per_sample = match (mode, reference) {
        (LossMode::Ce, Reference::Labels(y)) => pass.graph.cross_entropy(z, y)?,
        (LossMode::Kl, Reference::Clean(lp)) => {
            let lq = pass.graph.log_softmax(z)?;
            let lp = pass.graph.constant_ref(lp);
            pass.graph.kl_log(lp, lq)?
        }
        (LossMode::Ce, Reference::Clean(_)) => {
            return Err(arg_err!("cross-entropy attack needs labels as reference"))
        }
        (LossMode::Kl, Reference::Labels(_)) => {
            return Err(arg_err!("KL attack needs the clean output as reference"))
        }
    };
    let losses = pass.graph.value(per_sample).data().to_vec();
    if !want_grad {
        return Ok((losses, None));
    }
    let total = pass.graph.sum(per_sample)?;
    pass.graph.backward(total)?;
    let g = pass
        .graph
        .take_grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((losses, Some(g)))
}

fn check_batch(x: &Tensor, reference: Reference<'_>) -> Result<usize> {
    if x.ndim() < 2 {
        return Err(dim_err!("attack input must be batched, got {:?}", x.shape()));
    }
    let n = x.shape()[0];
    let m = match reference {
        Reference::Labels(y) => y.len(),
        Reference::Clean(lp) => lp.shape()[0],
    };
    if m != n {
        return Err(dim_err!("batch of {n} samples has {m} references"));
    }
    Ok(n)
}

/// Single signed-gradient step of size `epsilon` on the cross-entropy.
pub fn fgsm<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    bounds: [f64; 2],
) -> Result<Tensor> {
    check_batch(x, Reference::Labels(labels))?;
    if epsilon < 0.0 {
        return Err(arg_err!("epsilon must be non-negative, got {epsilon}"));
    }
    let (_, g) = loss_and_grad(model, x, Reference::Labels(labels), LossMode::Ce, true)?;
    let g = g.expect("gradient requested");
    let eps = epsilon as Real;
    let mut adv = x.clone();
    for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
        *a += eps * sign(gv);
    }
    project_into(adv.data_mut(), x.data(), eps, bounds);
    Ok(adv)
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, id: u64, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(id ^ mix(restart as u64))))
}

/// Projected gradient ascent on the attack loss with optional random
/// starts. Each sample keeps the restart with the largest final loss.
pub fn pgd<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    reference: Reference<'_>,
    cfg: &AttackConfig,
    ctx: &AttackContext,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let n = check_batch(x, reference)?;
    if let (LossMode::Kl, Reference::Labels(_)) = (cfg.loss_mode, reference) {
        return Err(arg_err!("KL attack needs the clean output as reference"));
    }
    let workers = ctx.worker_count();
    if workers <= 1 || n < 2 {
        return pgd_serial(model, x, reference, cfg, ctx);
    }
    let chunk = n.div_ceil(workers);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let pool = ctx.workers.as_ref().expect("workers > 1");
    let parts: Vec<Result<AttackOutcome>> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let len = chunk.min(n - s);
                let xs = x.slice_rows(s, len);
                let sub_ctx = ctx.at(ctx.first_id + s as u64);
                match reference {
                    Reference::Labels(y) => {
                        pgd_serial(model, &xs, Reference::Labels(&y[s..s + len]), cfg, &sub_ctx)
                    }
                    Reference::Clean(lp) => {
                        let lps = lp.slice_rows(s, len);
                        pgd_serial(model, &xs, Reference::Clean(&lps), cfg, &sub_ctx)
                    }
                }
            })
            .collect()
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let x_adv = Tensor::cat_rows(&parts.iter().map(|p| p.x_adv.clone()).collect::<Vec<_>>())?;
    let losses = parts.iter().flat_map(|p| p.losses.iter().copied()).collect();
    let restart_losses = (0..cfg.restarts)
        .map(|r| {
            parts
                .iter()
                .flat_map(|p| p.restart_losses[r].iter().copied())
                .collect()
        })
        .collect();
    Ok(AttackOutcome {
        x_adv,
        losses,
        restart_losses,
    })
}

fn pgd_serial<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    reference: Reference<'_>,
    cfg: &AttackConfig,
    ctx: &AttackContext,
) -> Result<AttackOutcome> {
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    let eps = cfg.epsilon as Real;
    let alpha = cfg.effective_step_size() as Real;
    let mut best: Option<(Tensor, Vec<Real>)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut adv = x.clone();
        if cfg.random_start && eps > 0.0 {
            for (i, row) in adv.data_mut().chunks_mut(per).enumerate() {
                let mut rng = sample_rng(ctx.seed, ctx.first_id + i as u64, r);
                for v in row {
                    *v += rng.random_range(-eps..=eps);
                }
            }
            project_into(adv.data_mut(), x.data(), eps, cfg.pixel_bounds);
        }
        for _ in 0..cfg.num_steps {
            let (_, g) = loss_and_grad(model, &adv, reference, cfg.loss_mode, true)?;
            let g = g.expect("gradient requested");
            for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
                *a += alpha * sign(gv);
            }
            project_into(adv.data_mut(), x.data(), eps, cfg.pixel_bounds);
        }
        let (losses, _) = loss_and_grad(model, &adv, reference, cfg.loss_mode, false)?;
        restart_losses.push(losses.clone());
        best = Some(match best {
            None => (adv, losses),
            Some((mut best_x, mut best_l)) => {
                for i in 0..n {
                    if losses[i] > best_l[i] {
                        best_l[i] = losses[i];
                        best_x.data_mut()[i * per..(i + 1) * per]
                            .copy_from_slice(&adv.data()[i * per..(i + 1) * per]);
                    }
                }
                (best_x, best_l)
            }
        });
    }
    let (x_adv, losses) = best.expect("at least one restart");
    Ok(AttackOutcome {
        x_adv,
        losses,
        restart_losses,
    })
}
