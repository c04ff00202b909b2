//! Ablation matrices: train several variants over shared seeds and report
//! per-arm accuracy (mean and standard deviation) plus all pairwise deltas.
//! The report makes no pass/fail judgment; callers consume the orderings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, MiniBongardProblem, MiniRpmProblem, ProblemSet, Split};
use crate::train::{fit, Checkpoint, TaskModel, TrainPlan, Trainer};

use super::{bongard_report, rpm_report, EvalError, EvalReport};

/// One variant in the matrix. An arm can continue from another arm's best
/// checkpoint (the re-space warm-start stages); base arms run first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub plan: TrainPlan,
    /// Name of the arm whose per-seed best checkpoint warm-starts this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start_from: Option<String>,
    /// Apply the metadata-dropping stage on top of the warm start.
    #[serde(default)]
    pub drop_meta_stage: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Test-split headline accuracy per seed.
    pub test_accuracies: Vec<f64>,
    /// Final-epoch train-split headline accuracy per seed, labeled as such.
    pub final_train_accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub test_reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseDelta {
    pub a: String,
    pub b: String,
    /// mean(a) - mean(b).
    pub mean_delta: f64,
    pub pooled_sd: f64,
    pub sign: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub metric: String,
    pub arms: Vec<ArmResult>,
    pub pairwise: Vec<PairwiseDelta>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn headline_accuracy(
    trainer: &Trainer,
    set: &ProblemSet,
    split: &str,
) -> Result<EvalReport, EvalError> {
    match (&trainer.model, set) {
        (TaskModel::Rpm(model), ProblemSet::Rpm(problems)) => {
            let refs: Vec<&MiniRpmProblem> = problems.iter().collect();
            rpm_report(
                model,
                &trainer.store,
                &refs,
                trainer.plan.chunk_size,
                split,
                trainer.codebook.as_ref(),
            )
        }
        (TaskModel::Bongard(model), ProblemSet::Bongard(problems)) => {
            let refs: Vec<&MiniBongardProblem> = problems.iter().collect();
            bongard_report(model, &trainer.store, &refs, trainer.plan.chunk_size, split)
        }
        _ => Err(EvalError::EmptySplit),
    }
}

fn run_one(
    data: &Dataset,
    arm: &AblationArm,
    seed: u64,
    out_dir: &Path,
    resume: bool,
) -> Result<(f64, f64, EvalReport), EvalError> {
    let run_dir = out_dir.join(format!("{}-s{seed}", arm.name));
    let result_path = run_dir.join("result.json");
    if resume && result_path.exists() {
        let raw = std::fs::read_to_string(&result_path)?;
        let cached: (f64, f64, EvalReport) = serde_json::from_str(&raw)?;
        return Ok(cached);
    }
    let mut plan = arm.plan.clone();
    plan.seed = seed;
    let kind = data.manifest.kind;
    let mut trainer = match &arm.warm_start_from {
        None => Trainer::new(kind, plan).map_err(Box::new)?,
        Some(base_arm) => {
            let base_dir = out_dir.join(format!("{base_arm}-s{seed}")).join("best");
            let base = Checkpoint::load(&base_dir).map_err(Box::new)?;
            if arm.drop_meta_stage {
                let (t, _warned) =
                    Trainer::drop_meta_stage(kind, plan, &base).map_err(Box::new)?;
                t
            } else {
                Trainer::warm_start_respace(kind, plan, &base).map_err(Box::new)?
            }
        }
    };
    fit(&mut trainer, data, &run_dir).map_err(Box::new)?;

    // Evaluate the best checkpoint on the test split, and the final model on
    // the train split (the "train accuracy" column).
    let final_train = data
        .split(Split::Train)
        .ok_or(EvalError::EmptySplit)
        .and_then(|set| headline_accuracy(&trainer, set, "train"))?
        .overall
        .accuracy;
    let best = Checkpoint::load(&run_dir.join("best")).map_err(Box::new)?;
    let best_trainer =
        Trainer::from_checkpoint(kind, trainer.plan.clone(), &best).map_err(Box::new)?;
    let mut best_trainer = best_trainer;
    best_trainer.codebook = trainer.codebook.clone();
    let test_set = data.split(Split::Test).ok_or(EvalError::EmptySplit)?;
    let report = headline_accuracy(&best_trainer, test_set, "test")?;
    let out = (report.overall.accuracy, final_train, report);
    std::fs::write(&result_path, serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

/// Trains every arm over the shared seeds (bases before dependents) and
/// returns per-arm statistics plus all pairwise deltas. Independent runs may
/// execute on a worker pool; results are keyed by (arm, seed), so the report
/// does not depend on completion order.
pub fn run_ablation_matrix(
    data: &Dataset,
    arms: &[AblationArm],
    seeds: &[u64],
    out_dir: &Path,
    resume: bool,
    jobs: usize,
) -> Result<AblationReport, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    // Bases first so warm-start arms find their checkpoints.
    let bases: Vec<&AblationArm> = arms.iter().filter(|a| a.warm_start_from.is_none()).collect();
    let dependents: Vec<&AblationArm> =
        arms.iter().filter(|a| a.warm_start_from.is_some()).collect();

    let mut results = Vec::new();
    for layer in [bases, dependents] {
        let tasks: Vec<(&AblationArm, u64)> = layer
            .iter()
            .flat_map(|arm| seeds.iter().map(move |&s| (*arm, s)))
            .collect();
        let outcomes: Result<Vec<(f64, f64, EvalReport)>, EvalError> = if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
            pool.install(|| {
                use rayon::prelude::*;
                tasks
                    .par_iter()
                    .map(|(arm, seed)| run_one(data, arm, *seed, out_dir, resume))
                    .collect()
            })
        } else {
            tasks
                .iter()
                .map(|(arm, seed)| run_one(data, arm, *seed, out_dir, resume))
                .collect()
        };
        let outcomes = outcomes?;
        for (i, arm) in layer.iter().enumerate() {
            let mut test_accs = Vec::new();
            let mut train_accs = Vec::new();
            let mut reports = Vec::new();
            for j in 0..seeds.len() {
                let (test, train, report) = outcomes[i * seeds.len() + j].clone();
                test_accs.push(test);
                train_accs.push(train);
                reports.push(report);
            }
            let (mean, sd) = mean_sd(&test_accs);
            results.push(ArmResult {
                name: arm.name.clone(),
                seeds: seeds.to_vec(),
                test_accuracies: test_accs,
                final_train_accuracies: train_accs,
                mean,
                sd,
                test_reports: reports,
            });
        }
    }
    // Restore the caller's arm order in the report.
    results.sort_by_key(|r| arms.iter().position(|a| a.name == r.name).unwrap_or(usize::MAX));

    let mut pairwise = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let (a, b) = (&results[i], &results[j]);
            let delta = a.mean - b.mean;
            let pooled = ((a.sd * a.sd + b.sd * b.sd) / 2.0).sqrt();
            pairwise.push(PairwiseDelta {
                a: a.name.clone(),
                b: b.name.clone(),
                mean_delta: delta,
                pooled_sd: pooled,
                sign: if delta > 0.0 {
                    1
                } else if delta < 0.0 {
                    -1
                } else {
                    0
                },
            });
        }
    }
    let metric = match data.manifest.kind {
        crate::datagen::DatasetKind::MiniRpm => "answer_accuracy",
        crate::datagen::DatasetKind::MiniBongard => "per_image_accuracy",
    };
    Ok(AblationReport {
        metric: metric.to_string(),
        arms: results,
        pairwise,
    })
}

/// Markdown rendering of an ablation report.
pub fn render_ablation_markdown(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Ablation report ({})\n\n", report.metric));
    out.push_str("| arm | mean | sd | per-seed |\n|---|---|---|---|\n");
    for arm in &report.arms {
        let per_seed: Vec<String> = arm
            .test_accuracies
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect();
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {} |\n",
            arm.name,
            arm.mean,
            arm.sd,
            per_seed.join(", ")
        ));
    }
    out.push_str("\n| pair | mean delta | pooled sd | sign |\n|---|---|---|---|\n");
    for p in &report.pairwise {
        out.push_str(&format!(
            "| {} vs {} | {:+.4} | {:.4} | {} |\n",
            p.a, p.b, p.mean_delta, p.pooled_sd, p.sign
        ));
    }
    out
}
