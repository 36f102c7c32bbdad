//! Epoch loop, staged dual-head pipeline and best-epoch selection.

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackContext, LossMode};
use crate::data::{augment_batch, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::eval::{evaluate_robust, AttackKind, DEFAULT_EVAL_BATCH};
use crate::nn::{
    attach_merge, attach_second_head, build_network, ArchSpec, AttachPoint, DualHeadNetwork,
    HeadInit, HeadMode, Init, Pass, Region,
};
use crate::objective::Objective;
use crate::optim::{OptimizerConfig, Sgd};
use crate::tensor::Tensor;

/// Largest epoch budget accepted for the merge stage.
pub const MERGE_EPOCH_CAP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MainHead,
    SecondHead,
    Merge,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::MainHead => 1,
            Stage::SecondHead => 2,
            Stage::Merge => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::MainHead),
            2 => Ok(Stage::SecondHead),
            3 => Ok(Stage::Merge),
            _ => Err(arg_err!("stage must be 1, 2 or 3, got {n}")),
        }
    }

    /// The output trained in this stage.
    pub fn mode(self) -> HeadMode {
        match self {
            Stage::MainHead => HeadMode::Main,
            Stage::SecondHead => HeadMode::Second,
            Stage::Merge => HeadMode::Merged,
        }
    }

    /// Regions that must be frozen while this stage trains.
    pub fn required_frozen(self) -> &'static [Region] {
        match self {
            Stage::MainHead => &[],
            Stage::SecondHead => &[Region::Stem],
            Stage::Merge => &[Region::Stem, Region::HeadMain, Region::HeadSecond],
        }
    }

    /// Regions frozen when a plan does not list any.
    pub fn default_frozen(self) -> &'static [Region] {
        match self {
            Stage::MainHead => &[],
            Stage::SecondHead => &[Region::Stem, Region::HeadMain],
            Stage::Merge => &[Region::Stem, Region::HeadMain, Region::HeadSecond],
        }
    }
}

fn default_batch_size() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub objective: Objective,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Regions frozen for this stage; the stage default when absent.
    #[serde(default)]
    pub freeze_regions: Option<Vec<Region>>,
    /// Second-head initialization (stage 2 only).
    #[serde(default)]
    pub init_second: Option<HeadInit>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: bool,
    /// Attack for per-epoch robust validation; defaults to the training
    /// attack in cross-entropy mode.
    #[serde(default)]
    pub val_attack: Option<AttackConfig>,
    /// Restore the epoch with the best robust validation accuracy at the end.
    #[serde(default)]
    pub restore_best: bool,
}

impl TrainPlan {
    pub fn new(stage: Stage, objective: Objective, epochs: usize, optimizer: OptimizerConfig) -> Self {
        TrainPlan {
            stage,
            objective,
            epochs,
            optimizer,
            freeze_regions: None,
            init_second: None,
            seed: 0,
            batch_size: default_batch_size(),
            augment: false,
            val_attack: None,
            restore_best: false,
        }
    }

    /// Stage 3 defaults: TRADES with `1/λ = 2` against the merged output,
    /// constant learning rate 0.02, 15 epochs.
    pub fn merge_default(attack: AttackConfig) -> Self {
        TrainPlan::new(
            Stage::Merge,
            Objective::trades(2.0, attack),
            15,
            OptimizerConfig::constant(0.02),
        )
    }

    pub fn frozen_regions(&self) -> Vec<Region> {
        self.freeze_regions
            .clone()
            .unwrap_or_else(|| self.stage.default_frozen().to_vec())
    }

    pub fn validation_attack(&self) -> AttackConfig {
        self.val_attack
            .clone()
            .unwrap_or_else(|| self.objective.attack.clone())
            .with_loss(LossMode::Ce)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        if let Some(a) = &self.val_attack {
            a.validate()?;
        }
        if self.batch_size < 2 {
            return Err(arg_err!("batch_size must be at least 2"));
        }
        if self.stage == Stage::Merge && self.epochs > MERGE_EPOCH_CAP {
            return Err(arg_err!(
                "merge stage is capped at {MERGE_EPOCH_CAP} epochs, got {}",
                self.epochs
            ));
        }
        let frozen = self.frozen_regions();
        for r in self.stage.required_frozen() {
            if !frozen.contains(r) {
                return Err(Error::State(format!(
                    "stage {} must freeze {:?}",
                    self.stage.number(),
                    r
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_val_acc: f64,
    pub robust_val_acc: f64,
    pub lr: f64,
}

/// Epoch with the highest robust validation accuracy; ties go to the
/// earliest epoch.
pub fn select_best_checkpoint(history: &[CheckpointRecord]) -> Result<usize> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.robust_val_acc > b.robust_val_acc) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
        .ok_or_else(|| arg_err!("cannot select a checkpoint from an empty history"))
}

/// Outcome of one [`train_stage`] call.
#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub history: Vec<CheckpointRecord>,
    pub best_epoch: Option<usize>,
}

/// Settings shared by all stages of a run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker pool and base seed for attack generation.
    pub attack: AttackContext,
    pub eval_batch: usize,
}

impl RunOptions {
    fn eval_batch(&self) -> usize {
        if self.eval_batch == 0 {
            DEFAULT_EVAL_BATCH
        } else {
            self.eval_batch
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Called after every epoch with the current network and its record.
pub type EpochObserver<'o> = dyn FnMut(&DualHeadNetwork, &CheckpointRecord) -> Result<()> + 'o;

/// Trains `net` for `plan.epochs` epochs on the stage's output.
///
/// The plan's freeze regions are applied first; frozen parameters never
/// change. After each epoch clean and robust validation accuracy are
/// recorded.
pub fn train_stage(
    net: &mut DualHeadNetwork,
    plan: &TrainPlan,
    train: &Dataset,
    val: &Dataset,
    opts: &RunOptions,
    observer: &mut EpochObserver<'_>,
) -> Result<StageReport> {
    plan.validate()?;
    for r in plan.frozen_regions() {
        if net.region_exists(r) {
            net.set_freeze(r, true);
        }
    }
    for &r in plan.stage.required_frozen() {
        if !net.region_exists(r) || !net.is_frozen(r) {
            return Err(Error::State(format!(
                "stage {} needs {:?} present and frozen",
                plan.stage.number(),
                r
            )));
        }
    }
    let mode = plan.stage.mode();
    net.view(mode)?;
    let mut report = StageReport::default();
    if plan.epochs == 0 {
        return Ok(report);
    }
    let mut sgd = Sgd::new(plan.optimizer.clone())?;
    let val_attack = plan.validation_attack();
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
    for epoch in 1..=plan.epochs {
        let order = train.epoch_order(plan.seed, epoch);
        let attack_seed = mix(mix(opts.attack.seed, plan.seed), epoch as u64);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(plan.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (mut xb, yb) = train.batch(chunk);
            if plan.augment {
                xb = augment_batch(&xb, mix(attack_seed, bi as u64));
            }
            let ctx = AttackContext {
                seed: attack_seed,
                first_id: (bi * plan.batch_size) as u64,
                workers: opts.attack.workers.clone(),
            };
            let (loss, grads, bn) = {
                let view = net.view(mode)?;
                let x_adv = plan.objective.adversarial(&view, &xb, &yb, &ctx)?;
                let mut pass = Pass::training();
                let loss = plan.objective.loss(&mut pass, &view, &xb, &yb, &x_adv)?;
                let value = pass.graph.value(loss).item();
                pass.graph.backward(loss)?;
                (value, pass.gradients(), pass.take_bn_updates())
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            net.apply_bn_updates(&bn);
            sgd.step(net, &grads, epoch);
            loss_sum += loss as f64;
            batches += 1;
        }
        let view = net.view(mode)?;
        let val_ctx = AttackContext {
            seed: mix(opts.attack.seed, 0x5A17),
            first_id: 0,
            workers: opts.attack.workers.clone(),
        };
        let res = evaluate_robust(&view, val, AttackKind::Pgd, &val_attack, &val_ctx, opts.eval_batch())?;
        let record = CheckpointRecord {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            clean_val_acc: res.clean_accuracy(),
            robust_val_acc: res.robust_accuracy(),
            lr: sgd.config().lr_at(epoch),
        };
        log::info!(
            "stage {} epoch {epoch}: loss {:.5} clean {:.4} robust {:.4}",
            plan.stage.number(),
            record.train_loss,
            record.clean_val_acc,
            record.robust_val_acc
        );
        if plan.restore_best && best.as_ref().is_none_or(|(acc, _)| record.robust_val_acc > *acc) {
            best = Some((record.robust_val_acc, trainable_snapshot(net)));
        }
        observer(net, &record)?;
        report.history.push(record);
    }
    report.best_epoch = Some(select_best_checkpoint(&report.history)?);
    if let Some((_, snapshot)) = best {
        restore_snapshot(net, snapshot);
    }
    Ok(report)
}

/// Copies of every tensor that training may change (unfrozen parameters
/// and running statistics).
fn trainable_snapshot(net: &DualHeadNetwork) -> Vec<(String, Tensor)> {
    net.params()
        .into_iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

fn restore_snapshot(net: &mut DualHeadNetwork, snapshot: Vec<(String, Tensor)>) {
    let mut map: std::collections::HashMap<String, Tensor> = snapshot.into_iter().collect();
    net.visit_regions_mut(&mut |_, p| {
        if let Some(t) = map.remove(&p.name) {
            p.value = t;
        }
    });
}

/// Where and how the second head branches off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachConfig {
    #[serde(default)]
    pub point: AttachPoint,
    /// Architecture of the second head; the main architecture when absent.
    #[serde(default)]
    pub second_arch: Option<ArchSpec>,
    /// Copy for a symmetric head, fresh otherwise, unless set.
    #[serde(default)]
    pub init: Option<HeadInit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    pub arch: ArchSpec,
    pub attach: AttachConfig,
    pub stages: Vec<TrainPlan>,
    pub seed: u64,
}

/// Network state after one stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub report: StageReport,
    pub network: DualHeadNetwork,
}

/// Stage-level events reported by [`dhat_pipeline`].
pub enum PipelineEvent<'e> {
    Epoch {
        stage: Stage,
        net: &'e DualHeadNetwork,
        record: &'e CheckpointRecord,
    },
    StageDone(&'e StageOutcome),
}

pub type PipelineObserver<'o> = dyn FnMut(PipelineEvent<'_>) -> Result<()> + 'o;

fn second_init(spec: &PipelineSpec, plan: &TrainPlan) -> HeadInit {
    plan.init_second.or(spec.attach.init).unwrap_or_else(|| {
        match &spec.attach.second_arch {
            Some(s) if s != &spec.arch => HeadInit::Fresh,
            _ => HeadInit::Copy,
        }
    })
}

/// Runs the staged procedure: main head, second head (stem frozen), then
/// the merge CNN (both heads frozen).
///
/// `initial` replaces stage-1 training with a pre-trained network, or is
/// the starting point when the stage list begins later.
pub fn dhat_pipeline(
    spec: &PipelineSpec,
    train: &Dataset,
    val: &Dataset,
    initial: Option<DualHeadNetwork>,
    opts: &RunOptions,
    observer: &mut PipelineObserver<'_>,
) -> Result<Vec<StageOutcome>> {
    spec.arch.validate()?;
    let mut last: Option<Stage> = None;
    for plan in &spec.stages {
        plan.validate()?;
        if last.is_some_and(|l| plan.stage <= l) {
            return Err(arg_err!("stages must be distinct and in order 1, 2, 3"));
        }
        last = Some(plan.stage);
    }
    if let Some(net) = &initial {
        if net.spec() != &spec.arch {
            return Err(Error::Checkpoint(
                "pre-trained network does not match the configured architecture".into(),
            ));
        }
    }
    let pretrained = initial.is_some();
    let mut net = match initial {
        Some(n) => n,
        None => build_network(&spec.arch, &mut Init::seeded(spec.seed))?,
    };
    let mut outcomes = Vec::new();
    for plan in &spec.stages {
        let mut plan = plan.clone();
        match plan.stage {
            Stage::MainHead if pretrained => plan.epochs = 0,
            Stage::MainHead => {}
            Stage::SecondHead => {
                if !net.has_second() {
                    let second = spec.attach.second_arch.clone().unwrap_or_else(|| spec.arch.clone());
                    net = attach_second_head(
                        net,
                        spec.attach.point,
                        &second,
                        second_init(spec, &plan),
                        &mut Init::seeded(mix(spec.seed, 2)),
                    )?;
                }
            }
            Stage::Merge => {
                if !net.has_merge() {
                    net = attach_merge(net, &mut Init::seeded(mix(spec.seed, 3)))?;
                }
            }
        }
        let stage = plan.stage;
        let report = {
            let mut on_epoch = |n: &DualHeadNetwork, r: &CheckpointRecord| {
                observer(PipelineEvent::Epoch {
                    stage,
                    net: n,
                    record: r,
                })
            };
            train_stage(&mut net, &plan, train, val, opts, &mut on_epoch)?
        };
        let outcome = StageOutcome {
            stage,
            report,
            network: net.clone(),
        };
        observer(PipelineEvent::StageDone(&outcome))?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
