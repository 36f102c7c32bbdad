//! Adversarial-training objectives.
//!
//! Every loss is a batch mean. Clean and adversarial batches go through
//! the model in separate forward passes.

use serde::{Deserialize, Serialize};

use crate::attack::{clean_reference, pgd, AttackConfig, AttackContext, LossMode, Reference};
use crate::error::{arg_err, Result};
use crate::nn::{Model, Pass};
use crate::tensor::{Real, Tensor, Var};

/// Lower clamp inside the margin term of the boosted cross entropy.
pub const MART_MARGIN_FLOOR: Real = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Sat,
    Trades,
    Mart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub inv_lambda: f64,
    pub attack: AttackConfig,
}

impl Objective {
    pub fn sat(attack: AttackConfig) -> Self {
        Objective {
            kind: ObjectiveKind::Sat,
            inv_lambda: 0.0,
            attack: attack.with_loss(LossMode::Ce),
        }
    }

    pub fn trades(inv_lambda: f64, attack: AttackConfig) -> Self {
        Objective {
            kind: ObjectiveKind::Trades,
            inv_lambda,
            attack: attack.with_loss(LossMode::Kl),
        }
    }

    pub fn mart(inv_lambda: f64, attack: AttackConfig) -> Self {
        Objective {
            kind: ObjectiveKind::Mart,
            inv_lambda,
            attack: attack.with_loss(LossMode::Ce),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ObjectiveKind::Sat && !(self.inv_lambda >= 0.0 && self.inv_lambda.is_finite()) {
            return Err(arg_err!("inv_lambda must be non-negative, got {}", self.inv_lambda));
        }
        self.attack.validate()
    }

    /// The inner maximization: KL-mode PGD for TRADES, CE-mode otherwise.
    pub fn adversarial<M: Model + ?Sized>(
        &self,
        model: &M,
        x: &Tensor,
        y: &[usize],
        ctx: &AttackContext,
    ) -> Result<Tensor> {
        self.validate()?;
        let out = match self.kind {
            ObjectiveKind::Trades => {
                if self.inv_lambda == 0.0 {
                    return Ok(x.clone());
                }
                let lp = clean_reference(model, x)?;
                let cfg = self.attack.clone().with_loss(LossMode::Kl);
                pgd(model, x, Reference::Clean(&lp), &cfg, ctx)?
            }
            ObjectiveKind::Sat | ObjectiveKind::Mart => {
                let cfg = self.attack.clone().with_loss(LossMode::Ce);
                pgd(model, x, Reference::Labels(y), &cfg, ctx)?
            }
        };
        Ok(out.x_adv)
    }

    /// Builds the scalar loss on `pass` for a given adversarial batch.
    pub fn loss<'a, M: Model + ?Sized>(
        &self,
        pass: &mut Pass<'a>,
        model: &'a M,
        x: &Tensor,
        y: &[usize],
        x_adv: &Tensor,
    ) -> Result<Var> {
        self.validate()?;
        Ok(match self.kind {
            ObjectiveKind::Sat => sat_terms(pass, model, x_adv, y)?,
            ObjectiveKind::Trades => trades_terms(pass, model, x, y, x_adv, self.inv_lambda)?.total,
            ObjectiveKind::Mart => mart_terms(pass, model, x, y, x_adv, self.inv_lambda)?.total,
        })
    }
}

/// A composite loss and its two summands.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub natural: Var,
    pub robust: Option<Var>,
}

/// `mean CE(f(x_adv), y)`.
pub fn sat_terms<'a, M: Model + ?Sized>(
    pass: &mut Pass<'a>,
    model: &'a M,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<Var> {
    let xa = pass.input(x_adv);
    let z = model.logits(pass, xa)?;
    let ce = pass.graph.cross_entropy(z, y)?;
    pass.graph.mean(ce)
}

/// `mean CE(f(x), y) + inv_lambda * mean KL(f(x) || f(x_adv))`.
pub fn trades_terms<'a, M: Model + ?Sized>(
    pass: &mut Pass<'a>,
    model: &'a M,
    x: &Tensor,
    y: &[usize],
    x_adv: &Tensor,
    inv_lambda: f64,
) -> Result<LossTerms> {
    if !(inv_lambda >= 0.0) {
        return Err(arg_err!("inv_lambda must be non-negative, got {inv_lambda}"));
    }
    let xc = pass.input(x);
    let zc = model.logits(pass, xc)?;
    let ce = pass.graph.cross_entropy(zc, y)?;
    let natural = pass.graph.mean(ce)?;
    if inv_lambda == 0.0 {
        return Ok(LossTerms {
            total: natural,
            natural,
            robust: None,
        });
    }
    let xa = pass.input(x_adv);
    let za = model.logits(pass, xa)?;
    let lp = pass.graph.log_softmax(zc)?;
    let lq = pass.graph.log_softmax(za)?;
    let kl = pass.graph.kl_log(lp, lq)?;
    let kl = pass.graph.mean(kl)?;
    let robust = pass.graph.scale(kl, inv_lambda as Real)?;
    let total = pass.graph.add(natural, robust)?;
    Ok(LossTerms {
        total,
        natural,
        robust: Some(robust),
    })
}

/// Boosted cross entropy on the adversarial batch plus a KL term weighted
/// by the clean misclassification probability:
///
/// `mean[-log p_adv[y] - log(1 - max_{k != y} p_adv[k])]
///  + inv_lambda * mean[KL(p_clean || p_adv) * (1 - p_clean[y])]`
pub fn mart_terms<'a, M: Model + ?Sized>(
    pass: &mut Pass<'a>,
    model: &'a M,
    x: &Tensor,
    y: &[usize],
    x_adv: &Tensor,
    inv_lambda: f64,
) -> Result<LossTerms> {
    if !(inv_lambda >= 0.0) {
        return Err(arg_err!("inv_lambda must be non-negative, got {inv_lambda}"));
    }
    let xa = pass.input(x_adv);
    let za = model.logits(pass, xa)?;
    let ce = pass.graph.cross_entropy(za, y)?;
    let pa = pass.graph.softmax(za)?;
    let other = pass.graph.max_excluding(pa, y)?;
    let margin = pass.graph.scale(other, -1.0)?;
    let margin = pass.graph.add_scalar(margin, 1.0)?;
    let margin = pass.graph.clamp(margin, MART_MARGIN_FLOOR, 1.0)?;
    let margin = pass.graph.log(margin)?;
    let bce = pass.graph.sub(ce, margin)?;
    let natural = pass.graph.mean(bce)?;
    if inv_lambda == 0.0 {
        return Ok(LossTerms {
            total: natural,
            natural,
            robust: None,
        });
    }
    let xc = pass.input(x);
    let zc = model.logits(pass, xc)?;
    let lp = pass.graph.log_softmax(zc)?;
    let lq = pass.graph.log_softmax(za)?;
    let kl = pass.graph.kl_log(lp, lq)?;
    let pc = pass.graph.softmax(zc)?;
    let true_p = pass.graph.pick(pc, y)?;
    let weight = pass.graph.scale(true_p, -1.0)?;
    let weight = pass.graph.add_scalar(weight, 1.0)?;
    let weighted = pass.graph.mul(kl, weight)?;
    let weighted = pass.graph.mean(weighted)?;
    let robust = pass.graph.scale(weighted, inv_lambda as Real)?;
    let total = pass.graph.add(natural, robust)?;
    Ok(LossTerms {
        total,
        natural,
        robust: Some(robust),
    })
}

/// Evaluates a loss in inference mode with a fixed adversarial batch.
pub fn loss_value<M: Model + ?Sized>(
    model: &M,
    kind: ObjectiveKind,
    inv_lambda: f64,
    x: &Tensor,
    y: &[usize],
    x_adv: &Tensor,
) -> Result<Real> {
    let mut pass = Pass::inference();
    let v = match kind {
        ObjectiveKind::Sat => sat_terms(&mut pass, model, x_adv, y)?,
        ObjectiveKind::Trades => trades_terms(&mut pass, model, x, y, x_adv, inv_lambda)?.total,
        ObjectiveKind::Mart => mart_terms(&mut pass, model, x, y, x_adv, inv_lambda)?.total,
    };
    Ok(pass.graph.value(v).item())
}

/// Mean clean cross entropy in inference mode.
pub fn clean_ce<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<Real> {
    loss_value(model, ObjectiveKind::Sat, 0.0, x, y, x)
}

/// SAT loss with the adversarial batch generated internally.
pub fn sat_loss<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    attack: &AttackConfig,
    ctx: &AttackContext,
) -> Result<Real> {
    let obj = Objective::sat(attack.clone());
    let adv = obj.adversarial(model, x, y, ctx)?;
    loss_value(model, ObjectiveKind::Sat, 0.0, x, y, &adv)
}

/// TRADES loss with the adversarial batch generated internally.
pub fn trades_loss<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    inv_lambda: f64,
    attack: &AttackConfig,
    ctx: &AttackContext,
) -> Result<Real> {
    let obj = Objective::trades(inv_lambda, attack.clone());
    let adv = obj.adversarial(model, x, y, ctx)?;
    loss_value(model, ObjectiveKind::Trades, inv_lambda, x, y, &adv)
}

/// MART loss with the adversarial batch generated internally.
pub fn mart_loss<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    inv_lambda: f64,
    attack: &AttackConfig,
    ctx: &AttackContext,
) -> Result<Real> {
    let obj = Objective::mart(inv_lambda, attack.clone());
    let adv = obj.adversarial(model, x, y, ctx)?;
    loss_value(model, ObjectiveKind::Mart, inv_lambda, x, y, &adv)
}
