//! Acceptance criteria, one pass/fail line each.
//!
//! `cargo test -p dhat-core --test acceptance` runs all ten; pass criterion
//! numbers after `--` to run a subset.

mod common;

use std::time::{Duration, Instant};

use common::oracles::{brute_pairs, ce, linear_logits, mart_oracle, rel, trades_oracle, wrn_param_oracle};
use common::{gradient_suite, labels, linf_and_bounds, rng, tiny_dual_head, uniform, LinearModel};
use dhat_core::attack::{fgsm, pgd, AttackConfig, AttackContext, Reference};
use dhat_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointInfo};
use dhat_core::config::RunConfig;
use dhat_core::data::{
    encode_cifar_binary, encode_idx_images, encode_idx_labels, parse_cifar_binary, parse_idx,
    synth_dataset, Dataset, Split, SynthSpec,
};
use dhat_core::eval::{cross_evaluate, evaluate_clean, evaluate_robust, AttackKind};
use dhat_core::merge::MergeCnn;
use dhat_core::nn::{
    attach_second_head, build_network, ArchSpec, AttachPoint, DualHeadNetwork, HeadInit, HeadMode,
    Init, Pass, Region,
};
use dhat_core::objective::{clean_ce, loss_value, Objective, ObjectiveKind};
use dhat_core::optim::OptimizerConfig;
use dhat_core::train::{
    dhat_pipeline, select_best_checkpoint, train_stage, AttachConfig, CheckpointRecord,
    PipelineSpec, RunOptions, Stage, TrainPlan,
};
use dhat_core::{Real, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let suite = gradient_suite();
    let elapsed = t.elapsed();
    let (worst, err) = suite
        .iter()
        .cloned()
        .fold(("", 0.0 as Real), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<_> = suite.iter().filter(|(_, e)| !(*e <= 1e-4)).map(|(n, _)| *n).collect();
    check(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, max rel err {err:.2e} ({worst}), {:.1}s, failing {failing:?}",
            suite.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn attack_invariants() -> Outcome {
    const BOUNDS: [f64; 2] = [0.0, 1.0];
    let mut r = rng(2024);
    let net = tiny_dual_head(4, 8, 1);
    let (mut ball, mut zero, mut fgsm_eq) = (0, 0, 0);
    let cases = 1000;
    for case in 0..cases {
        let n = r.random_range(1..5);
        let eps: f64 = r.random_range(0.0..0.4);
        let steps = r.random_range(1..6);
        let cfg = AttackConfig::pgd(eps.max(1e-3), r.random_range(0.005..0.2), steps)
            .with_restarts(r.random_range(1..3))
            .with_random_start(r.random_bool(0.5));
        let cfg = AttackConfig { epsilon: eps, ..cfg };
        let ctx = AttackContext::new(case as u64);
        let one_step = AttackConfig::pgd(eps, eps, 1).with_random_start(false);
        let zero_cfg = AttackConfig { epsilon: 0.0, ..cfg.clone() };
        let run = |x: &Tensor, y: &[usize], m: &dyn dhat_core::nn::Model| -> (bool, bool, bool) {
            let a = pgd(m, x, Reference::Labels(y), &cfg, &ctx).unwrap().x_adv;
            let f = fgsm(m, x, y, eps, BOUNDS).unwrap();
            let (da, ia) = linf_and_bounds(&a, x);
            let (df, i_f) = linf_and_bounds(&f, x);
            let in_ball = ia && i_f && (da as f64) <= eps + 1e-9 && (df as f64) <= eps + 1e-9;
            let z = pgd(m, x, Reference::Labels(y), &zero_cfg, &ctx).unwrap().x_adv.bit_eq(x)
                && fgsm(m, x, y, 0.0, BOUNDS).unwrap().bit_eq(x);
            let p1 = pgd(m, x, Reference::Labels(y), &one_step, &ctx).unwrap().x_adv;
            (in_ball, z, p1.bit_eq(&f))
        };
        let res = if case % 10 == 0 {
            let x = uniform(&mut r, &[n, 1, 8, 8], 0.0, 1.0);
            let y = labels(&mut r, n, 4);
            run(&x, &y, &net.view(HeadMode::Merged).unwrap())
        } else {
            let d = r.random_range(2..20);
            let c = r.random_range(2..6);
            let m = LinearModel::random(&mut r, d, c, 2.0);
            let x = uniform(&mut r, &[n, d], 0.0, 1.0);
            let y = labels(&mut r, n, c);
            run(&x, &y, &m)
        };
        ball += res.0 as usize;
        zero += res.1 as usize;
        fgsm_eq += res.2 as usize;
    }
    check(
        ball == cases && zero == cases && fgsm_eq == cases,
        format!("ball+bounds {ball}/{cases}, eps=0 identity {zero}/{cases}, 1-step PGD == FGSM {fgsm_eq}/{cases}"),
    )
}

fn merge_dimensions() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for c in [2, 3, 4, 10, 100] {
        let mut init = if c == 100 { Init::shape_only() } else { Init::seeded(c as u64) };
        let m = MergeCnn::new(c, &mut init).map_err(|e| e.to_string())?;
        let p = brute_pairs(c).len();
        let a = Tensor::zeros(&[1, c]);
        let mut pass = Pass::inference();
        let (va, vb) = (pass.input(&a), pass.input(&a));
        let t = m.trace(&mut pass, va, vb).map_err(|e| e.to_string())?;
        let shape = |v| pass.graph.value(v).shape()[1..].to_vec();
        let chain = [shape(t.headwise), shape(t.pairwise), shape(t.pooled), shape(t.flat)];
        let want = [vec![8, c, 1], vec![16, 8, p], vec![8, 8, p], vec![64 * p]];
        ok &= chain == want && m.flat_len() == 64 * p;
        if c == 10 {
            ok &= m.flat_len() == 2880;
            notes.push(format!("C=10 flat {} headwise {:?} pairwise {:?} pooled {:?}", m.flat_len(), chain[0], chain[1], chain[2]));
        }
    }
    notes.push("C in {2,3,4,100} match 64*C(C-1)/2".into());
    check(ok, notes.join("; "))
}

fn parameter_ratios() -> Outcome {
    let wrn = ArchSpec::wideresnet(34, 10, 10);
    let base = build_network(&wrn, &mut Init::shape_only()).map_err(|e| e.to_string())?;
    let base_count = base.parameter_census().total;
    let sym = attach_second_head(base, AttachPoint(1), &wrn, HeadInit::Copy, &mut Init::shape_only())
        .map_err(|e| e.to_string())?
        .parameter_census();
    let main = ArchSpec::resnet(&[3, 4, 6, 3], 100);
    let second = ArchSpec::resnet(&[3, 2, 2, 2], 100);
    let asym = attach_second_head(
        build_network(&main, &mut Init::shape_only()).map_err(|e| e.to_string())?,
        AttachPoint(1),
        &second,
        HeadInit::Fresh,
        &mut Init::shape_only(),
    )
    .map_err(|e| e.to_string())?
    .parameter_census();
    check(
        (0.90..=1.00).contains(&sym.second_to_base)
            && (0.40..=0.60).contains(&asym.second_to_main)
            && base_count == wrn_param_oracle(34, 10, 10),
        format!(
            "WRN-34-10 base {base_count}, symmetric second head adds {:.3}x; RN-34/RN-18 second/main {:.3}",
            sym.second_to_base, asym.second_to_main
        ),
    )
}

fn small_data(classes: usize, per_class: usize, size: usize, test: usize, seed: u64) -> (Dataset, Dataset) {
    let ds = synth_dataset(&SynthSpec {
        num_classes: classes,
        samples_per_class: per_class,
        image_size: size,
        channels: 1,
        sigma: 0.2,
        blobs: 2,
        seed,
    })
    .unwrap();
    ds.split_tail(test, Split::Test).unwrap()
}

fn region_bytes(net: &DualHeadNetwork, regions: &[Region]) -> Vec<(String, Vec<u64>)> {
    net.params()
        .into_iter()
        .filter(|(r, _)| regions.contains(r))
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_f64_bits()).collect()))
        .collect()
}

trait Bits {
    fn to_f64_bits(&self) -> u64;
}

impl Bits for Real {
    fn to_f64_bits(&self) -> u64 {
        (*self as f64).to_bits()
    }
}

fn freeze_soundness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (train, test) = small_data(4, 40, 8, 64, 5);
    let val = test.subset(0, 16, Split::Val).unwrap();
    let spec = ArchSpec::smallconv(3, 1, 4).with_input(1, 8);
    let attack = AttackConfig::pgd_derived(0.1, 3);
    let plan = |stage, il| {
        let mut p = TrainPlan::new(stage, Objective::trades(il, attack.clone()), 2, OptimizerConfig::constant(0.05));
        p.batch_size = 32;
        p
    };
    let pipeline = PipelineSpec {
        arch: spec.clone(),
        attach: AttachConfig::default(),
        stages: vec![plan(Stage::MainHead, 6.0), plan(Stage::SecondHead, 3.0), plan(Stage::Merge, 2.0)],
        seed: 17,
    };
    let opts = RunOptions::default();
    let out = dhat_pipeline(&pipeline, &train, &val, None, &opts, &mut |_| Ok(())).map_err(|e| e.to_string())?;
    let stage1 = dir.path().join("stage1.dhat");
    let last = dir.path().join("stage3.dhat");
    save_checkpoint(&out[0].network, CheckpointInfo::default(), &stage1).map_err(|e| e.to_string())?;
    save_checkpoint(&out[2].network, CheckpointInfo::default(), &last).map_err(|e| e.to_string())?;
    let s1 = load_checkpoint(&stage1).and_then(|c| c.to_network()).map_err(|e| e.to_string())?;
    let s3 = load_checkpoint(&last).and_then(|c| c.to_network()).map_err(|e| e.to_string())?;

    let stem_ok = region_bytes(&s1, &[Region::Stem]) == region_bytes(&out[1].network, &[Region::Stem]);
    let main_ok = region_bytes(&s1, &[Region::HeadMain]) == region_bytes(&out[1].network, &[Region::HeadMain]);
    let frozen = [Region::Stem, Region::HeadMain, Region::HeadSecond];
    let heads_ok = region_bytes(&out[1].network, &frozen) == region_bytes(&s3, &frozen);
    let x = test.range(0, 64).0;
    let a = s1.predict(&x, HeadMode::Main).map_err(|e| e.to_string())?;
    let b = s3.predict(&x, HeadMode::Main).map_err(|e| e.to_string())?;
    let fwd_ok = a.bit_eq(&b);
    check(
        stem_ok && main_ok && heads_ok && fwd_ok,
        format!("stem after stage 2 unchanged {stem_ok}, stem+heads after stage 3 unchanged {heads_ok}, main forward bit-identical on 64 samples {fwd_ok}"),
    )
}

fn loss_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut bit_eq = true;
    for seed in 0..50 {
        let mut r = rng(seed);
        let (d, c, n) = (r.random_range(3..20), r.random_range(2..8), r.random_range(1..10));
        let m = LinearModel::random(&mut r, d, c, 3.0);
        let x = uniform(&mut r, &[n, d], 0.0, 1.0);
        let xa = uniform(&mut r, &[n, d], 0.0, 1.0);
        let y = labels(&mut r, n, c);
        let (zc, za) = (linear_logits(&m, &x), linear_logits(&m, &xa));
        for il in [0.0, 0.5, 1.0, 3.0, 6.0] {
            let t = loss_value(&m, ObjectiveKind::Trades, il, &x, &y, &xa).map_err(|e| e.to_string())? as f64;
            let mt = loss_value(&m, ObjectiveKind::Mart, il, &x, &y, &xa).map_err(|e| e.to_string())? as f64;
            worst = worst.max(rel(t, trades_oracle(&zc, &za, &y, il))).max(rel(mt, mart_oracle(&zc, &za, &y, il)));
        }
        let t0 = loss_value(&m, ObjectiveKind::Trades, 0.0, &x, &y, &xa).unwrap();
        bit_eq &= t0.to_bits() == clean_ce(&m, &x, &y).unwrap().to_bits();
        let direct = (0..n).map(|i| ce(&zc[i], y[i])).sum::<f64>() / n as f64;
        worst = worst.max(rel(t0 as f64, direct));
    }
    let step = AttackConfig::pgd_derived(8.0 / 255.0, 40).effective_step_size();
    check(
        worst <= 1e-10 && bit_eq && (step - 0.00196078).abs() <= 1e-8,
        format!("max rel err {worst:.2e}, TRADES(1/lambda=0) == clean CE bitwise {bit_eq}, PGD-40 step {step:.8}"),
    )
}

/// Desk-scale experiment shared by criteria 7 to 9.
mod desk {
    use super::*;

    pub const SEEDS: [u64; 3] = [1, 2, 3];
    pub const MONITOR_EPOCHS: usize = 6;
    pub const EXTRA_EPOCHS: usize = 10;
    pub const SECOND_EPOCHS: usize = 10;
    pub const MERGE_EPOCHS: usize = 8;
    /// Second heads continue from a trained stem, as after a decay step.
    pub const SECOND_LR: f64 = 0.01;
    pub const EPS: f64 = 0.2;

    pub struct Data {
        pub train: Dataset,
        pub val: Dataset,
        pub test: Dataset,
    }

    pub fn data() -> Data {
        let ds = synth_dataset(&SynthSpec {
            num_classes: 10,
            samples_per_class: 600,
            image_size: 14,
            channels: 1,
            sigma: 0.3,
            blobs: 2,
            seed: 77,
        })
        .unwrap();
        let (train, test) = ds.split_tail(1000, Split::Test).unwrap();
        let val = test.subset(0, 200, Split::Val).unwrap();
        Data { train, val, test }
    }

    pub fn arch() -> ArchSpec {
        ArchSpec::smallconv(3, 1, 10).with_input(1, 14)
    }

    pub fn train_attack() -> AttackConfig {
        AttackConfig::pgd(EPS, 0.05, 10)
    }

    pub fn eval_attack() -> AttackConfig {
        AttackConfig::pgd_derived(EPS, 20)
    }

    pub fn plan(stage: Stage, il: f64, epochs: usize, lr: f64, seed: u64) -> TrainPlan {
        let mut p = TrainPlan::new(stage, Objective::trades(il, train_attack()), epochs, OptimizerConfig::constant(lr));
        p.batch_size = 64;
        p.seed = seed;
        p
    }

    pub struct Accuracy {
        pub clean: f64,
        pub robust: f64,
    }

    pub fn measure(net: &DualHeadNetwork, mode: HeadMode, test: &Dataset, seed: u64) -> Accuracy {
        let view = net.view(mode).unwrap();
        let res = evaluate_robust(&view, test, AttackKind::Pgd, &eval_attack(), &AttackContext::new(seed), 200).unwrap();
        Accuracy {
            clean: res.clean_accuracy(),
            robust: res.robust_accuracy(),
        }
    }

    /// Second head trained from `main`, then the merge network.
    pub fn dual_head(main: &DualHeadNetwork, d: &Data, il: f64, second_epochs: usize, seed: u64) -> DualHeadNetwork {
        let mut merge = plan(Stage::Merge, 2.0, MERGE_EPOCHS, 0.02, seed);
        merge.restore_best = true;
        let spec = PipelineSpec {
            arch: arch(),
            attach: AttachConfig::default(),
            stages: vec![plan(Stage::SecondHead, il, second_epochs, SECOND_LR, seed), merge],
            seed,
        };
        let out = dhat_pipeline(&spec, &d.train, &d.val, Some(main.clone()), &RunOptions::default(), &mut |_| Ok(())).unwrap();
        out.into_iter().last().unwrap().network
    }

    pub struct SeedRun {
        pub best_epoch: usize,
        pub best: DualHeadNetwork,
        pub last: DualHeadNetwork,
        pub main: Accuracy,
        pub second: Accuracy,
        pub merged: Accuracy,
        pub last_acc: Accuracy,
        pub best_last_merged: Accuracy,
        pub self_attack: f64,
        pub transfer: f64,
    }

    pub fn run_seed(d: &Data, seed: u64) -> SeedRun {
        let mut net = build_network(&arch(), &mut Init::seeded(seed)).unwrap();
        let plan1 = plan(Stage::MainHead, 6.0, MONITOR_EPOCHS + EXTRA_EPOCHS, 0.05, seed);
        let mut snaps: Vec<DualHeadNetwork> = Vec::new();
        let report = train_stage(&mut net, &plan1, &d.train, &d.val, &RunOptions::default(), &mut |n: &DualHeadNetwork, _: &CheckpointRecord| {
            snaps.push(n.clone());
            Ok(())
        })
        .unwrap();
        let best_epoch = select_best_checkpoint(&report.history[..MONITOR_EPOCHS]).unwrap();
        let best = snaps[best_epoch - 1].clone();
        let last = snaps[best_epoch - 1 + EXTRA_EPOCHS].clone();

        let dual = dual_head(&best, d, 3.0, SECOND_EPOCHS, seed);
        let best_last = dual_head(&best, d, 6.0, EXTRA_EPOCHS, seed);

        let table = cross_evaluate(
            &best.view(HeadMode::Main).unwrap(),
            &last.view(HeadMode::Main).unwrap(),
            &d.test,
            AttackKind::Pgd,
            &eval_attack(),
            &AttackContext::new(seed),
            200,
        )
        .unwrap();
        let run = SeedRun {
            best_epoch,
            main: Accuracy {
                clean: table.clean[0],
                robust: table.robust[0][0],
            },
            second: measure(&dual, HeadMode::Second, &d.test, seed),
            merged: measure(&dual, HeadMode::Merged, &d.test, seed),
            last_acc: Accuracy {
                clean: table.clean[1],
                robust: table.robust[1][1],
            },
            best_last_merged: measure(&best_last, HeadMode::Merged, &d.test, seed),
            self_attack: table.self_attack(),
            transfer: table.transfer(),
            best,
            last,
        };
        eprintln!(
            "  seed {seed}: best epoch {}, main {}/{}, second {}/{}, merged {}/{}, last {}/{}, best-last merged {}/{}, self {} transfer {}",
            run.best_epoch,
            pct(run.main.clean),
            pct(run.main.robust),
            pct(run.second.clean),
            pct(run.second.robust),
            pct(run.merged.clean),
            pct(run.merged.robust),
            pct(run.last_acc.clean),
            pct(run.last_acc.robust),
            pct(run.best_last_merged.clean),
            pct(run.best_last_merged.robust),
            pct(run.self_attack),
            pct(run.transfer)
        );
        run
    }
}

struct Desk {
    runs: Vec<desk::SeedRun>,
    elapsed: Duration,
}

fn desk_runs(cache: &mut Option<Desk>) -> &Desk {
    cache.get_or_insert_with(|| {
        let t = Instant::now();
        let d = desk::data();
        let runs = desk::SEEDS.iter().map(|&s| desk::run_seed(&d, s)).collect();
        Desk { runs, elapsed: t.elapsed() }
    })
}

fn directional(desk: &Desk) -> Outcome {
    let r = &desk.runs;
    let merged_robust = median(r.iter().map(|s| s.merged.robust).collect());
    let main_robust = median(r.iter().map(|s| s.main.robust).collect());
    let merged_clean = median(r.iter().map(|s| s.merged.clean).collect());
    let heads_clean_median = median(r.iter().map(|s| s.main.clean.min(s.second.clean)).collect());
    check(
        merged_robust >= main_robust - 0.005
            && merged_clean >= heads_clean_median - 0.01
            && desk.elapsed <= Duration::from_secs(30 * 60),
        format!(
            "median robust merged {} vs main {}; median clean merged {} vs min(heads) {}; {:.0}s for criteria 7-9",
            pct(merged_robust),
            pct(main_robust),
            pct(merged_clean),
            pct(heads_clean_median),
            desk.elapsed.as_secs_f64()
        ),
    )
}

fn best_vs_last(desk: &Desk) -> Outcome {
    let merged = median(desk.runs.iter().map(|s| s.best_last_merged.robust).collect());
    let last = median(desk.runs.iter().map(|s| s.last_acc.robust).collect());
    check(
        merged >= last,
        format!("median robust: best-last merged {} vs last checkpoint {}", pct(merged), pct(last)),
    )
}

fn cross_evaluation(desk: &Desk) -> Outcome {
    let own = median(desk.runs.iter().map(|s| s.self_attack).collect());
    let transfer = median(desk.runs.iter().map(|s| s.transfer).collect());
    let epochs: Vec<_> = desk.runs.iter().map(|s| (s.best_epoch, s.best_epoch + desk::EXTRA_EPOCHS)).collect();
    let distinct = desk.runs.iter().all(|s| {
        Checkpoint::from_network(&s.best, CheckpointInfo::default()).tensors
            != Checkpoint::from_network(&s.last, CheckpointInfo::default()).tensors
    });
    check(
        own <= transfer && distinct,
        format!("median self-attack {} vs transfer {} (best/last epochs {epochs:?})", pct(own), pct(transfer)),
    )
}

const REPRO_CONFIG: &str = r#"{
  "data": {"source": "synth", "synth": {"num_classes": 3, "samples_per_class": 30, "image_size": 8,
           "sigma": 0.2, "seed": 4}, "test_size": 30, "val_size": 12},
  "arch": {"family": "smallconv", "depth": 3, "widen_factor": 1, "num_classes": 3,
           "input_channels": 1, "input_size": 8},
  "stages": [
    {"stage": "main_head", "epochs": 2, "batch_size": 16, "optimizer": {"lr": 0.05},
     "objective": {"kind": "trades", "inv_lambda": 6, "attack": {"epsilon": 0.1, "num_steps": 3}}},
    {"stage": "second_head", "epochs": 1, "batch_size": 16, "optimizer": {"lr": 0.05},
     "objective": {"kind": "mart", "inv_lambda": 6, "attack": {"epsilon": 0.1, "num_steps": 3}}},
    {"stage": "merge", "epochs": 1, "batch_size": 16, "optimizer": {"lr": 0.02},
     "objective": {"kind": "trades", "inv_lambda": 2, "attack": {"epsilon": 0.1, "num_steps": 3}}}
  ],
  "seed": 99,
  "output_dir": "unused"
}"#;

fn reproducibility() -> Outcome {
    let run = || -> Result<(Vec<Vec<u8>>, Vec<f64>), String> {
        let cfg = RunConfig::from_json(REPRO_CONFIG).map_err(|e| e.to_string())?;
        let splits = cfg.data.load().map_err(|e| e.to_string())?;
        let opts = RunOptions {
            attack: AttackContext::new(cfg.seed).with_workers(1).map_err(|e| e.to_string())?,
            eval_batch: 16,
        };
        let out = dhat_pipeline(&cfg.pipeline(), &splits.train, &splits.val, None, &opts, &mut |_| Ok(()))
            .map_err(|e| e.to_string())?;
        let bytes = out
            .iter()
            .map(|o| {
                let info = CheckpointInfo {
                    epoch: o.report.history.len(),
                    stage: o.stage.number(),
                    config_digest: cfg.digest(),
                    seed: cfg.seed,
                };
                Checkpoint::from_network(&o.network, info).encode()
            })
            .collect();
        let net = &out[2].network;
        let mut accs = Vec::new();
        for mode in [HeadMode::Main, HeadMode::Second, HeadMode::Merged] {
            let view = net.view(mode).map_err(|e| e.to_string())?;
            accs.push(evaluate_clean(&view, &splits.test, 16).map_err(|e| e.to_string())?);
            let res = evaluate_robust(&view, &splits.test, AttackKind::Pgd, &AttackConfig::pgd_derived(0.1, 5), &opts.attack, 16)
                .map_err(|e| e.to_string())?;
            accs.push(res.robust_accuracy());
        }
        Ok((bytes, accs))
    };
    let (b1, a1) = run()?;
    let (b2, a2) = run()?;
    let same_run = b1 == b2 && a1 == a2;

    let ck_ok = b1.iter().all(|b| Checkpoint::decode(b).map(|c| c.encode() == *b).unwrap_or(false));

    let train = synth_dataset(&SynthSpec {
        num_classes: 10,
        samples_per_class: 4,
        image_size: 28,
        channels: 1,
        sigma: 0.2,
        blobs: 2,
        seed: 3,
    })
    .unwrap();
    let quantized = Tensor::from_fn(train.images().shape(), |i| (train.images().data()[i] * 255.0).round() / 255.0);
    let q = Dataset::new(quantized, train.labels().to_vec(), 10, Split::Train).map_err(|e| e.to_string())?;
    let idx = parse_idx(&encode_idx_images(q.images()).unwrap(), &encode_idx_labels(q.labels()), 10)
        .map(|d| d.images().bit_eq(q.images()) && d.labels() == q.labels())
        .unwrap_or(false);
    let rgb = Tensor::from_fn(&[4, 3, 32, 32], |i| ((i * 37 % 256) as Real) / 255.0);
    let cq = Dataset::new(rgb, vec![1, 5, 9, 0], 10, Split::Train).unwrap();
    let cifar = parse_cifar_binary(&encode_cifar_binary(&cq).unwrap(), 10)
        .map(|d| d.images().bit_eq(cq.images()) && d.labels() == cq.labels())
        .unwrap_or(false);

    let mut r = rng(10);
    let mut recovered = 0;
    for _ in 0..100 {
        let len = r.random_range(1..120);
        let planted = r.random_range(1..=len);
        let history: Vec<_> = (1..=len)
            .map(|epoch| CheckpointRecord {
                epoch,
                train_loss: r.random_range(0.0..3.0),
                clean_val_acc: r.random_range(0.0..1.0),
                robust_val_acc: if epoch == planted { 0.95 } else { r.random_range(0.0..0.9) },
                lr: 0.1,
            })
            .collect();
        recovered += (select_best_checkpoint(&history).ok() == Some(planted)) as usize;
    }
    check(
        same_run && ck_ok && idx && cifar && recovered == 100,
        format!(
            "repeat run identical {same_run}, checkpoint round trip {ck_ok}, IDX {idx}, CIFAR {cifar}, planted best {recovered}/100"
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let runs = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut desk = None;
    let mut failed = 0;
    let names = [
        "gradient suite",
        "attack invariants",
        "merge dimensions",
        "parameter ratios",
        "freeze soundness",
        "loss oracles",
        "desk-scale directional",
        "best vs last",
        "cross evaluation",
        "reproducibility and I/O",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !runs(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = match n {
            1 => gradients(),
            2 => attack_invariants(),
            3 => merge_dimensions(),
            4 => parameter_ratios(),
            5 => freeze_soundness(),
            6 => loss_oracles(),
            7 => directional(desk_runs(&mut desk)),
            8 => best_vs_last(desk_runs(&mut desk)),
            9 => cross_evaluation(desk_runs(&mut desk)),
            _ => reproducibility(),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]")
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
