//! SGD with momentum, L2 weight decay and a milestone learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::nn::{DualHeadNetwork, Gradients, ParamKind};
use crate::tensor::Real;

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    2e-4
}

/// `milestones` are `(epoch, multiplier)` pairs; a multiplier applies from
/// its (1-based) epoch onwards and multipliers compound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn constant(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            milestones: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(arg_err!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(arg_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return Err(arg_err!("weight_decay must be non-negative"));
        }
        for &(e, m) in &self.milestones {
            if e == 0 || !(m > 0.0) {
                return Err(arg_err!("milestone ({e}, {m}) needs epoch >= 1 and a positive multiplier"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.lr, |lr, &(_, m)| lr * m)
    }
}

/// `v = momentum * v + (g + wd * w); w -= lr * v`
pub fn sgd_update(w: &mut [Real], g: &[Real], v: &mut [Real], lr: Real, momentum: Real, wd: Real) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + (g + wd * *w);
        *w -= lr * *v;
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: HashMap<String, Vec<Real>>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Updates every unfrozen weight that has a gradient; returns how many
    /// tensors changed. Gradients of frozen parameters are ignored.
    pub fn step(&mut self, net: &mut DualHeadNetwork, grads: &Gradients, epoch: usize) -> usize {
        let lr = self.cfg.lr_at(epoch) as Real;
        let (mu, wd) = (self.cfg.momentum as Real, self.cfg.weight_decay as Real);
        let velocity = &mut self.velocity;
        let mut updated = 0;
        net.visit_regions_mut(&mut |_, p| {
            if p.frozen || p.kind != ParamKind::Weight {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            sgd_update(p.value.data_mut(), g.data(), v, lr, mu, wd);
            updated += 1;
        });
        updated
    }
}
