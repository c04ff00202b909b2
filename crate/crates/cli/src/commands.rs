//! Implementations behind the four subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crossfeat::datagen::{
    build_codebook, gen_bongard, gen_bongard_mixture, gen_rpm, read_dataset, write_dataset,
    ConceptFamily, Dataset, DatasetKind, DatasetWriteConfig, ProblemSet, Regime, Split,
    BONGARD_PANEL_SIDE, RPM_PANEL_SIDE,
};
use crossfeat::eval::{
    plot_accuracy_bars, plot_loss_curves, render_ablation_markdown, render_markdown,
    run_ablation_matrix, AblationArm, bongard_report, rpm_report,
};
use crossfeat::hash::canonical_json_hash;
use crossfeat::train::{fit, Checkpoint, EpochRecord, TaskModel, TrainPlan, Trainer};
use crossfeat::{EmMode, RunConfig};

use crate::{AblateArgs, CliError, EvalArgs, GenArgs, TrainArgs};

impl From<crossfeat::ConfigError> for CliError {
    fn from(e: crossfeat::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crossfeat::TrainError> for CliError {
    fn from(e: crossfeat::TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crossfeat::datagen::DatasetIoError> for CliError {
    fn from(e: crossfeat::datagen::DatasetIoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crossfeat::datagen::GenError> for CliError {
    fn from(e: crossfeat::datagen::GenError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crossfeat::eval::EvalError> for CliError {
    fn from(e: crossfeat::eval::EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn parse_regime(raw: &str) -> Result<Regime, CliError> {
    match raw {
        "iid" => Ok(Regime::Iid),
        "interpolation" => Ok(Regime::Interpolation),
        "heldout_pair" => Ok(Regime::HeldoutPair),
        other => Err(CliError::Usage(format!("unknown regime '{other}'"))),
    }
}

pub fn gen(args: GenArgs) -> Result<(), CliError> {
    let splits_spec = [
        (Split::Train, args.train),
        (Split::Val, args.val),
        (Split::Test, args.test),
    ];
    if args.train == 0 {
        return Err(CliError::Usage("--train must be at least 1".into()));
    }

    // Echo the generation arguments into the manifest's config hash.
    let args_json = serde_json::json!({
        "kind": args.kind,
        "seed": args.seed,
        "train": args.train,
        "val": args.val,
        "test": args.test,
        "regime": args.regime,
        "concept": args.concept,
        "panel_side": args.panel_side,
    });
    let config_hash = format!("{:016x}", canonical_json_hash(&args_json));

    match args.kind.as_str() {
        "mini-rpm" => {
            if args.panel_side.is_some_and(|s| s != RPM_PANEL_SIDE) {
                return Err(CliError::Usage(format!(
                    "mini-rpm panels are fixed at {RPM_PANEL_SIDE} pixels"
                )));
            }
            let regime = parse_regime(&args.regime)?;
            let mut sets = Vec::new();
            for (split, count) in splits_spec {
                if count == 0 {
                    continue;
                }
                sets.push((split, ProblemSet::Rpm(gen_rpm(args.seed, count, regime, split)?)));
            }
            let codebook = match &sets[0].1 {
                ProblemSet::Rpm(problems) => build_codebook(problems)?,
                _ => unreachable!(),
            };
            let cfg = DatasetWriteConfig {
                kind: DatasetKind::MiniRpm,
                h: RPM_PANEL_SIDE,
                w: RPM_PANEL_SIDE,
                seed: args.seed,
                regime: Some(regime),
                concept: None,
                codebook: Some(codebook.entries().to_vec()),
                config_hash,
            };
            let refs: Vec<(Split, &ProblemSet)> = sets.iter().map(|(s, p)| (*s, p)).collect();
            write_dataset(&args.out, &cfg, &refs)?;
        }
        "mini-bongard" => {
            let side = args.panel_side.unwrap_or(BONGARD_PANEL_SIDE);
            if !matches!(side, 32 | 64) {
                return Err(CliError::Usage(
                    "--panel-side must be 32 or 64 for mini-bongard".into(),
                ));
            }
            let family = match args.concept.as_str() {
                "mixture" => None,
                other => Some(ConceptFamily::from_name(other).ok_or_else(|| {
                    CliError::Usage(format!("unknown concept family '{other}'"))
                })?),
            };
            let mut sets = Vec::new();
            for (i, (split, count)) in splits_spec.into_iter().enumerate() {
                if count == 0 {
                    continue;
                }
                // Independent stream per split.
                let split_seed = args.seed.wrapping_add(i as u64 * 0x9E37_79B9_7F4A_7C15);
                let problems = match family {
                    None => gen_bongard_mixture(split_seed, count, side)?,
                    Some(f) => gen_bongard(split_seed, f, count, side)?,
                };
                sets.push((split, ProblemSet::Bongard(problems)));
            }
            let cfg = DatasetWriteConfig {
                kind: DatasetKind::MiniBongard,
                h: side,
                w: side,
                seed: args.seed,
                regime: None,
                concept: Some(args.concept.clone()),
                codebook: None,
                config_hash,
            };
            let refs: Vec<(Split, &ProblemSet)> = sets.iter().map(|(s, p)| (*s, p)).collect();
            write_dataset(&args.out, &cfg, &refs)?;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown kind '{other}' (expected mini-rpm or mini-bongard)"
            )))
        }
    }
    println!("wrote dataset to {}", args.out.display());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(em) = &args.em {
        cfg.train.em.mode = match em.as_str() {
            "off" => EmMode::Off,
            "alternate" => EmMode::Alternate,
            other => return Err(CliError::Usage(format!("unknown EM mode '{other}'"))),
        };
    }
    let data = read_dataset(&cfg.data.dir)?;
    let kind = data.manifest.kind;
    let plan = cfg.train_plan();
    plan.model
        .validate(kind, None)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let out_dir = cfg.out_dir();

    let mut trainer = if args.resume && out_dir.join("last/state.json").exists() {
        let loaded = Checkpoint::load(&out_dir.join("last"))?;
        Trainer::from_checkpoint(kind, plan, &loaded)?
    } else if let Some(warm) = &args.warm_start {
        let base = Checkpoint::load(warm)?;
        if args.drop_meta {
            let (trainer, warned) = Trainer::drop_meta_stage(kind, plan, &base)?;
            if warned {
                eprintln!(
                    "warning: --drop-meta on a non-meta checkpoint has no metadata loss to drop"
                );
            }
            trainer
        } else {
            Trainer::warm_start_respace(kind, plan, &base)?
        }
    } else {
        if args.drop_meta {
            return Err(CliError::Usage(
                "--drop-meta only applies together with --warm-start".into(),
            ));
        }
        Trainer::new(kind, plan)?
    };

    let result = fit(&mut trainer, &data, &out_dir)?;
    println!(
        "trained {} epochs; best val accuracy {:.4} at epoch {}; outputs in {}",
        result.history.len(),
        result.best_val_accuracy,
        result.best_epoch,
        out_dir.display()
    );
    Ok(())
}

fn split_from_name(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split '{other}'"))),
    }
}

fn read_history(run_dir: &Path) -> Option<Vec<EpochRecord>> {
    let raw = std::fs::read_to_string(run_dir.join("history.jsonl")).ok()?;
    let records: Vec<EpochRecord> = raw
        .lines()
        .filter_map(|line| serde_json::from_str(line).ok())
        .collect();
    (!records.is_empty()).then_some(records)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let loaded = Checkpoint::load(&args.checkpoint)?;
    if let Some(config_path) = &args.config {
        let cfg = RunConfig::from_path(config_path)?;
        if cfg.hash_hex() != loaded.state.config_hash && !args.force {
            return Err(CliError::Usage(format!(
                "config hash mismatch: checkpoint {}, supplied config {} (use --force to override)",
                loaded.state.config_hash,
                cfg.hash_hex()
            )));
        }
    }
    let data = read_dataset(&args.data)?;
    if data.manifest.kind != loaded.state.kind {
        return Err(CliError::Usage(format!(
            "kind mismatch: checkpoint is {}, dataset is {}",
            loaded.state.kind.name(),
            data.manifest.kind.name()
        )));
    }
    let split = split_from_name(&args.split)?;
    let set = data
        .split(split)
        .ok_or_else(|| CliError::Usage(format!("dataset has no '{}' split", args.split)))?;
    let trainer = Trainer::from_checkpoint_auto(&loaded)?;

    let mut report = match (&trainer.model, set) {
        (TaskModel::Rpm(model), ProblemSet::Rpm(problems)) => {
            let refs: Vec<_> = problems.iter().collect();
            rpm_report(
                model,
                &trainer.store,
                &refs,
                trainer.plan.chunk_size,
                &args.split,
                trainer.codebook.as_ref(),
            )?
        }
        (TaskModel::Bongard(model), ProblemSet::Bongard(problems)) => {
            let refs: Vec<_> = problems.iter().collect();
            bongard_report(model, &trainer.store, &refs, trainer.plan.chunk_size, &args.split)?
        }
        _ => unreachable!("kind checked above"),
    };
    report.config_hash = loaded.state.config_hash.clone();

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(args.out.join("report.md"), render_markdown(&report))?;
    if args.plots {
        let mut bars: Vec<(String, f64)> =
            vec![("overall".to_string(), report.overall.accuracy)];
        if let Some(map) = &report.per_concept_image {
            bars.extend(map.iter().map(|(k, c)| (k.clone(), c.accuracy)));
        }
        if let Some(map) = &report.pattern_per_attribute {
            bars.extend(map.iter().map(|(k, c)| (format!("pattern:{k}"), c.accuracy)));
        }
        plot_accuracy_bars(&bars, &args.out.join("accuracy.png"))?;
        if let Some(parent) = args.checkpoint.parent() {
            if let Some(history) = read_history(parent) {
                plot_loss_curves(&history, &args.out.join("loss.png"))?;
            }
        }
    }
    println!(
        "evaluated {} problems; overall accuracy {:.4}; report in {}",
        report.count,
        report.overall.accuracy,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixConfig {
    data: std::path::PathBuf,
    seeds: Vec<u64>,
    arms: Vec<MatrixArm>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixArm {
    name: String,
    plan: TrainPlan,
    #[serde(default)]
    warm_start_from: Option<String>,
    #[serde(default)]
    drop_meta_stage: bool,
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(&args.matrix)
        .map_err(|e| CliError::Usage(format!("cannot read matrix file: {e}")))?;
    let matrix: MatrixConfig = serde_json::from_str(&raw)?;
    if matrix.arms.is_empty() || matrix.seeds.is_empty() {
        return Err(CliError::Usage("matrix needs at least one arm and one seed".into()));
    }
    let data: Dataset = read_dataset(&matrix.data)?;
    let arms: Vec<AblationArm> = matrix
        .arms
        .into_iter()
        .map(|arm| AblationArm {
            name: arm.name,
            plan: arm.plan,
            warm_start_from: arm.warm_start_from,
            drop_meta_stage: arm.drop_meta_stage,
        })
        .collect();
    let report = run_ablation_matrix(&data, &arms, &matrix.seeds, &args.out, args.resume, args.jobs)?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(args.out.join("ablation.md"), render_ablation_markdown(&report))?;
    for arm in &report.arms {
        println!("{}: mean {:.4} sd {:.4}", arm.name, arm.mean, arm.sd);
    }
    println!("ablation report in {}", args.out.display());
    Ok(())
}
