use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use dhat_core::attack::{AttackConfig, AttackContext};
use dhat_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use dhat_core::config::{digest_bytes, parse_json, DataConfig, DataSource, RunConfig};
use dhat_core::data::{
    encode_cifar_binary, encode_idx_images, encode_idx_labels, synth_dataset, Dataset, Split,
    SynthSpec,
};
use dhat_core::eval::{
    adversarial_dataset, cross_evaluate, evaluate_clean, evaluate_robust, export_noise as write_noise,
    AttackEntry, AttackKind, EvalReport,
};
use dhat_core::nn::{
    attach_merge, attach_second_head, build_network, ArchSpec, DualHeadNetwork, Head, HeadInit,
    HeadMode, Init, Region,
};
use dhat_core::train::{dhat_pipeline, AttachConfig, PipelineEvent, RunOptions, Stage};
use dhat_core::Error;
use serde::Deserialize;
use serde_json::json;

use crate::{AttackArg, AttackArgs, CrossEvalArgs, DataArgs, EvalArgs, ExportNoiseArgs, FormatArg, HeadsArg, InspectArgs, SynthArgs, TrainArgs};

/// Settings shared by every command.
pub struct Context {
    workers: usize,
    seed: Option<u64>,
}

impl Context {
    pub fn new(workers: Option<usize>, seed: Option<u64>) -> Result<Self> {
        let env = match std::env::var("DHAT_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Config {
                path: "DHAT_THREADS".into(),
                message: format!("expected a positive integer, got {v:?}"),
            })?),
            Err(_) => None,
        };
        let workers = env.or(workers).unwrap_or(1);
        if workers == 0 {
            return Err(Error::Argument("worker count must be at least 1".into()).into());
        }
        Ok(Context { workers, seed })
    }

    fn attack(&self, default_seed: u64) -> Result<AttackContext> {
        Ok(AttackContext::new(self.seed.unwrap_or(default_seed)).with_workers(self.workers)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn load_network(path: &Path) -> Result<DualHeadNetwork> {
    let net = load_checkpoint(path)
        .and_then(|c| c.to_network())
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(net)
}

fn model_digest(path: &Path) -> Result<String> {
    Ok(digest_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Test split named by `--config` or `--data`, optionally truncated.
fn test_set(args: &DataArgs, samples: Option<usize>) -> Result<(Dataset, String, Option<u64>)> {
    let (data, seed) = match (&args.config, &args.data) {
        (Some(p), _) => {
            let cfg = RunConfig::load(p)?;
            (cfg.data, Some(cfg.seed))
        }
        (None, Some(p)) => (DataConfig::from_json(&read_text(p)?)?, None),
        (None, None) => unreachable!("clap requires one data source"),
    };
    let id = match data.source {
        DataSource::Synth => "synth",
        DataSource::Idx => "idx",
        DataSource::Cifar => "cifar",
    };
    let mut test = data.load()?.test;
    if let Some(n) = samples {
        if n == 0 {
            return Err(Error::Argument("--samples must be positive".into()).into());
        }
        test = test.subset(0, n.min(test.len()), Split::Test)?;
    }
    Ok((test, format!("{id}/test"), seed))
}

fn attack_config(a: &AttackArgs) -> Result<Option<(AttackKind, AttackConfig)>> {
    let kind = match a.attack {
        AttackArg::None => return Ok(None),
        AttackArg::Fgsm => AttackKind::Fgsm,
        AttackArg::Pgd => AttackKind::Pgd,
    };
    let mut cfg = match a.step_size {
        Some(s) => AttackConfig::pgd(a.eps, s, a.steps),
        None => AttackConfig::pgd_derived(a.eps, a.steps),
    }
    .with_restarts(a.restarts)
    .with_random_start(!a.no_random_start);
    if kind == AttackKind::Fgsm {
        cfg = cfg.with_restarts(1);
    }
    cfg.validate()?;
    Ok(Some((kind, cfg)))
}

/// Head selection is a runtime choice: explicitly requested heads are
/// switched on regardless of the flags stored in the checkpoint.
fn select_mode(net: &mut DualHeadNetwork, heads: Option<HeadsArg>) -> HeadMode {
    match heads {
        None => net.default_mode(),
        Some(h) => {
            let mode = HeadMode::from(h);
            match mode {
                HeadMode::Main => net.set_enabled(Head::Main, true),
                HeadMode::Second => net.set_enabled(Head::Second, true),
                HeadMode::Merged => {
                    net.set_enabled(Head::Main, true);
                    net.set_enabled(Head::Second, true);
                }
            }
            mode
        }
    }
}

fn mode_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::Main => "main",
        HeadMode::Second => "second",
        HeadMode::Merged => "merged",
    }
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let out_dir = args.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut spec = cfg.pipeline();
    let mut initial = match &cfg.pretrained {
        Some(p) => Some(load_network(p)?),
        None => None,
    };
    if let Some(n) = args.stage {
        let stage = Stage::from_number(n).map_err(|_| Error::Config {
            path: "--stage".into(),
            message: format!("stage must be 1, 2 or 3, got {n}"),
        })?;
        spec.stages.retain(|p| p.stage == stage);
        if spec.stages.is_empty() {
            return Err(Error::Config {
                path: "stages".into(),
                message: format!("config has no plan for stage {n}"),
            }
            .into());
        }
        if n > 1 {
            let from = args.from.clone().unwrap_or_else(|| out_dir.join(format!("stage{}.dhat", n - 1)));
            let net = load_checkpoint(&from)
                .and_then(|c| c.to_network_for(&cfg.arch))
                .with_context(|| format!("loading {}", from.display()))?;
            initial = Some(net);
        }
    } else if let Some(from) = &args.from {
        initial = Some(load_network(from)?);
    }
    let splits = cfg.data.load()?;
    log::info!(
        "train {} / val {} / test {} samples",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let opts = RunOptions {
        attack: ctx.attack(cfg.seed)?,
        eval_batch: 0,
    };
    let log_path = out_dir.join(match args.stage {
        Some(n) => format!("stage{n}_log.csv"),
        None => "train_log.csv".into(),
    });
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "stage,epoch,train_loss,clean_val_acc,robust_val_acc,lr").map_err(|e| Error::io(&log_path, e))?;
    let digest = cfg.digest();
    let seed = cfg.seed;
    let outcomes = dhat_pipeline(&spec, &splits.train, &splits.val, initial, &opts, &mut |event| {
        match event {
            PipelineEvent::Epoch { stage, record, .. } => {
                writeln!(
                    log,
                    "{},{},{},{},{},{}",
                    stage.number(),
                    record.epoch,
                    record.train_loss,
                    record.clean_val_acc,
                    record.robust_val_acc,
                    record.lr
                )
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(&log_path, e))?;
            }
            PipelineEvent::StageDone(o) => {
                let path = out_dir.join(format!("stage{}.dhat", o.stage.number()));
                let info = CheckpointInfo {
                    epoch: o.report.history.len(),
                    stage: o.stage.number(),
                    config_digest: digest.clone(),
                    seed,
                };
                save_checkpoint(&o.network, info, &path)?;
                log::info!("wrote {}", path.display());
            }
        }
        Ok(())
    })?;
    drop(log);
    let Some(last) = outcomes.last() else { return Ok(()) };
    if !cfg.eval.is_empty() {
        let start = Instant::now();
        let net = &last.network;
        let mode = net.default_mode();
        let view = net.view(mode)?;
        let clean = evaluate_clean(&view, &splits.test, dhat_core::eval::DEFAULT_EVAL_BATCH)?;
        let mut attacks = Vec::new();
        for a in &cfg.eval {
            let res = evaluate_robust(&view, &splits.test, AttackKind::Pgd, a, &opts.attack, dhat_core::eval::DEFAULT_EVAL_BATCH)?;
            println!("PGD-{} eps {:.6}: robust {:.4}", a.num_steps, a.epsilon, res.robust_accuracy());
            attacks.push(AttackEntry::new(AttackKind::Pgd, a, res.robust_accuracy()));
        }
        let report = EvalReport {
            model_id: format!("stage{}", last.stage.number()),
            model_digest: digest_bytes(&dhat_core::checkpoint::Checkpoint::from_network(net, CheckpointInfo::default()).encode()),
            dataset_id: "test".into(),
            head_mode: mode,
            samples: splits.test.len(),
            clean_accuracy: clean,
            attacks,
            seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        report.write(&out_dir.join("report.json"))?;
        println!("clean {clean:.4}");
    }
    Ok(())
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let mut net = load_network(&args.model)?;
    let (test, dataset_id, cfg_seed) = test_set(&args.data, args.samples)?;
    let attack = attack_config(&args.attack)?;
    let mode = select_mode(&mut net, args.heads);
    let view = net.view(mode)?;
    let seed = ctx.seed.or(cfg_seed).unwrap_or(0);
    let actx = ctx.attack(seed)?;
    let (clean, attacks) = match &attack {
        None => (evaluate_clean(&view, &test, args.batch)?, Vec::new()),
        Some((kind, cfg)) => {
            let res = evaluate_robust(&view, &test, *kind, cfg, &actx, args.batch)?;
            (res.clean_accuracy(), vec![AttackEntry::new(*kind, cfg, res.robust_accuracy())])
        }
    };
    let report = EvalReport {
        model_id: args
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        model_digest: model_digest(&args.model)?,
        dataset_id,
        head_mode: mode,
        samples: test.len(),
        clean_accuracy: clean,
        attacks,
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    println!("heads {} samples {} clean {:.4}", mode_name(mode), test.len(), clean);
    for a in &report.attacks {
        println!(
            "{:?} eps {:.6} steps {} step {:.8} restarts {}: robust {:.4}",
            a.attack, a.epsilon, a.num_steps, a.step_size, a.restarts, a.robust_accuracy
        );
    }
    if let Some(p) = &args.report {
        report.write(p)?;
    }
    Ok(())
}

pub fn cross_eval(ctx: &Context, args: CrossEvalArgs) -> Result<()> {
    let mut a = load_network(&args.a)?;
    let mut b = load_network(&args.b)?;
    let (test, dataset_id, cfg_seed) = test_set(&args.data, args.samples)?;
    let Some((kind, cfg)) = attack_config(&args.attack)? else {
        return Err(Error::Argument("cross-eval needs an attack".into()).into());
    };
    let mode_a = select_mode(&mut a, args.heads);
    let mode_b = select_mode(&mut b, args.heads);
    let seed = ctx.seed.or(cfg_seed).unwrap_or(0);
    let table = cross_evaluate(&a.view(mode_a)?, &b.view(mode_b)?, &test, kind, &cfg, &ctx.attack(seed)?, args.batch)?;
    println!("{:>12} {:>10} {:>10}", "source\\target", "a", "b");
    for (name, row) in ["a", "b"].iter().zip(table.robust) {
        println!("{name:>12} {:>10.4} {:>10.4}", row[0], row[1]);
    }
    println!("clean a {:.4} b {:.4}", table.clean[0], table.clean[1]);
    println!("self-attack {:.4} transfer {:.4}", table.self_attack(), table.transfer());
    if let Some(p) = &args.report {
        let doc = json!({
            "a": args.a,
            "b": args.b,
            "dataset_id": dataset_id,
            "samples": test.len(),
            "attack": AttackEntry::new(kind, &cfg, table.self_attack()),
            "clean": table.clean,
            "robust": table.robust,
            "self_attack": table.self_attack(),
            "transfer": table.transfer(),
            "seed": seed,
        });
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDoc {
    arch: ArchSpec,
    #[serde(default)]
    attach: AttachConfig,
    #[serde(default)]
    second_head: bool,
    #[serde(default)]
    merge: bool,
}

fn build_from_doc(doc: &ArchDoc) -> Result<DualHeadNetwork> {
    let at = |r: dhat_core::Result<DualHeadNetwork>, path: &str| {
        r.map_err(|e| Error::Config {
            path: path.into(),
            message: e.to_string(),
        })
    };
    let mut init = Init::shape_only();
    let mut net = at(build_network(&doc.arch, &mut init), "arch")?;
    if doc.second_head || doc.attach.second_arch.is_some() || doc.merge {
        let second = doc.attach.second_arch.clone().unwrap_or_else(|| doc.arch.clone());
        let init_mode = doc.attach.init.unwrap_or(if second == doc.arch { HeadInit::Copy } else { HeadInit::Fresh });
        net = at(attach_second_head(net, doc.attach.point, &second, init_mode, &mut init), "attach")?;
    }
    if doc.merge {
        net = at(attach_merge(net, &mut init), "merge")?;
    }
    Ok(net)
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let (net, meta) = match (&args.target.model, &args.target.arch_config) {
        (Some(p), _) => {
            let ck = load_checkpoint(p)?;
            let net = ck.to_network()?;
            (net, Some(ck.metadata.info))
        }
        (None, Some(p)) => {
            let doc: ArchDoc = parse_json(&read_text(p)?)?;
            (build_from_doc(&doc)?, None)
        }
        (None, None) => unreachable!("clap requires a target"),
    };
    let c = net.parameter_census();
    let flags: Vec<_> = Region::ALL
        .iter()
        .filter(|r| net.region_exists(**r))
        .map(|r| (format!("{r:?}"), net.is_frozen(*r)))
        .collect();
    if args.json {
        let doc = json!({
            "arch": net.spec(),
            "second_arch": net.second_spec(),
            "attach_point": net.attach_point().0,
            "census": {
                "stem": c.stem,
                "head_main": c.head_main,
                "head_second": c.head_second,
                "merge": c.merge,
                "total": c.total,
                "second_to_base": c.second_to_base,
                "second_to_main": c.second_to_main,
            },
            "frozen": flags.iter().map(|(r, f)| (r.clone(), *f)).collect::<std::collections::BTreeMap<_, _>>(),
            "main_enabled": net.is_enabled(Head::Main),
            "second_enabled": net.is_enabled(Head::Second),
            "metadata": meta,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    let spec = net.spec();
    println!(
        "arch {:?} depth {} widen {} classes {} input {}x{}x{}",
        spec.family, spec.depth, spec.widen_factor, spec.num_classes, spec.input_channels, spec.input_size, spec.input_size
    );
    if let Some(s) = net.second_spec() {
        println!("second head {:?} depth {} attached after group {}", s.family, s.depth, net.attach_point().0);
    }
    println!("stem         {:>12}", c.stem);
    println!("head_main    {:>12}", c.head_main);
    println!("head_second  {:>12}", c.head_second);
    println!("merge        {:>12}", c.merge);
    println!("total        {:>12}", c.total);
    println!("second/base  {:>12.4}", c.second_to_base);
    println!("second/main  {:>12.4}", c.second_to_main);
    for (r, f) in &flags {
        println!("{r:<12} frozen {f}");
    }
    println!("main enabled {} second enabled {}", net.is_enabled(Head::Main), net.is_enabled(Head::Second));
    if let Some(m) = meta {
        println!("stage {} epoch {} seed {} config {}", m.stage, m.epoch, m.seed, m.config_digest);
    }
    Ok(())
}

pub fn export_noise(ctx: &Context, args: ExportNoiseArgs) -> Result<()> {
    let mut net = load_network(&args.model)?;
    let (test, _, cfg_seed) = test_set(&args.data, None)?;
    if args.index >= test.len() {
        return Err(Error::Argument(format!("--index {} out of range for {} test samples", args.index, test.len())).into());
    }
    let Some((kind, cfg)) = attack_config(&args.attack)? else {
        return Err(Error::Argument("export-noise needs an attack".into()).into());
    };
    let mode = select_mode(&mut net, args.heads);
    let one = test.subset(args.index, 1, Split::Test)?;
    let actx = ctx.attack(ctx.seed.or(cfg_seed).unwrap_or(0))?;
    let adv = adversarial_dataset(&net.view(mode)?, &one, kind, &cfg, &actx.at(args.index as u64), 1)?;
    let (noise, adv_path) = write_noise(one.images(), &adv, args.gain, &args.out)?;
    println!("{}", noise.display());
    println!("{}", adv_path.display());
    Ok(())
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn synth_data(ctx: &Context, args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        samples_per_class: args.per_class,
        image_size: args.size,
        channels: args.channels,
        sigma: args.sigma,
        blobs: args.blobs,
        seed: ctx.seed.unwrap_or(0),
    };
    let all = synth_dataset(&spec)?;
    let test_n = args.test_size.unwrap_or(all.len() / 5);
    let (train, test) = all.split_tail(test_n, Split::Test)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dir = &args.out_dir;
    let data = match args.format {
        FormatArg::Idx => {
            if args.channels != 1 {
                return Err(Error::Argument("IDX output needs --channels 1".into()).into());
            }
            let mut paths = Vec::new();
            for (name, ds) in [("train", &train), ("test", &test)] {
                paths.push(write_file(dir.join(format!("{name}-images.idx")), &encode_idx_images(ds.images())?)?);
                paths.push(write_file(dir.join(format!("{name}-labels.idx")), &encode_idx_labels(ds.labels()))?);
            }
            json!({
                "source": "idx",
                "train_images": paths[0], "train_labels": paths[1],
                "test_images": paths[2], "test_labels": paths[3],
                "num_classes": args.classes,
            })
        }
        FormatArg::Cifar => {
            let a = write_file(dir.join("train.bin"), &encode_cifar_binary(&train)?)?;
            let b = write_file(dir.join("test.bin"), &encode_cifar_binary(&test)?)?;
            json!({"source": "cifar", "cifar_train": [a], "cifar_test": [b], "num_classes": args.classes})
        }
    };
    let cfg_path = dir.join("data.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&data)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    println!("train {} test {} -> {}", train.len(), test.len(), cfg_path.display());
    Ok(())
}
