//! Metrics and experiment protocols: Bongard accuracy (per image and per
//! problem), RPM answer accuracy with tie accounting, progressive-pattern
//! interpretability accuracy against the codebook, and ablation matrices.
//!
//! Evaluation is read-only over the parameters; problems are scored in
//! chunks and reduced in dataset order, so a report is a deterministic
//! function of (checkpoint, dataset).

mod ablate;
mod plots;

use std::collections::BTreeMap;

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablate::{
    render_ablation_markdown, run_ablation_matrix, AblationArm, AblationReport, ArmResult,
    PairwiseDelta,
};
pub use plots::{plot_accuracy_bars, plot_loss_curves, write_png};

use crate::datagen::{ConceptFamily, MetadataCodebook, MiniBongardProblem, MiniRpmProblem};
use crate::model::{BongardModel, ParamStore, RpmModel, Session};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error("pattern accuracy needs a meta-variant model and a codebook")]
    MissingCodebook,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] Box<crate::train::TrainError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// 95% Wilson score interval.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054f64;
    let p = successes as f64 / n as f64;
    let n = n as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// One accuracy figure with its sample size and 95% interval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyCell {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl AccuracyCell {
    pub fn new(correct: usize, total: usize) -> Self {
        let (ci_lo, ci_hi) = wilson_interval(correct, total);
        Self {
            correct,
            total,
            accuracy: correct as f64 / total.max(1) as f64,
            ci_lo,
            ci_hi,
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Evaluation results for one (model, split) pair. Bongard fields and RPM
/// fields are populated according to the dataset kind.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: String,
    pub split: String,
    pub count: usize,
    /// Headline metric: RPM answer accuracy, or Bongard per-image accuracy.
    pub overall: AccuracyCell,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_ties: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<AccuracyCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_problem: Option<AccuracyCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_concept_image: Option<BTreeMap<String, AccuracyCell>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_concept_problem: Option<BTreeMap<String, AccuracyCell>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern_overall: Option<AccuracyCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern_per_attribute: Option<BTreeMap<String, AccuracyCell>>,
    /// Rules whose descriptor was absent from the codebook (held-out
    /// regimes); always counted as incorrect.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern_unmapped: Option<usize>,
    pub config_hash: String,
    pub tool_version: String,
}

fn base_report(kind: &str, split: &str, count: usize, overall: AccuracyCell) -> EvalReport {
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: kind.to_string(),
        split: split.to_string(),
        count,
        overall,
        answer_ties: None,
        per_image: None,
        per_problem: None,
        per_concept_image: None,
        per_concept_problem: None,
        pattern_overall: None,
        pattern_per_attribute: None,
        pattern_unmapped: None,
        config_hash: String::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Scores every problem; returns per-problem option scores plus the
/// viewpoint-averaged concepts when requested.
fn rpm_forward_all(
    model: &RpmModel,
    store: &ParamStore,
    problems: &[&MiniRpmProblem],
    chunk: usize,
    want_qbar: bool,
) -> (Vec<Vec<f32>>, Vec<Array2<f32>>) {
    let mut scores = Vec::with_capacity(problems.len());
    let mut qbars = Vec::new();
    for ch in problems.chunks(chunk.max(1)) {
        let mut s = Session::inference(store);
        let fwd = model.forward(&mut s, ch);
        let sc = s
            .tape
            .value(fwd.scores)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("scores rank 2")
            .to_owned();
        for row in sc.rows() {
            scores.push(row.to_vec());
        }
        if want_qbar {
            let qb = s.tape.value(fwd.qbar);
            for b in 0..ch.len() {
                qbars.push(
                    qb.index_axis(Axis(0), b)
                        .into_dimensionality::<Ix2>()
                        .expect("(S, d)")
                        .to_owned(),
                );
            }
        }
    }
    (scores, qbars)
}

/// Argmax with ties broken toward the lowest index; reports whether the
/// maximum was tied.
pub fn argmax_lowest(scores: &[f32]) -> (usize, bool) {
    let mut best = 0usize;
    let mut tied = false;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
            tied = false;
        } else if s == scores[best] {
            tied = true;
        }
    }
    (best, tied)
}

/// (correct, ties) over a problem list.
pub fn rpm_answer_counts(
    model: &RpmModel,
    store: &ParamStore,
    problems: &[&MiniRpmProblem],
    chunk: usize,
) -> (usize, usize) {
    let (scores, _) = rpm_forward_all(model, store, problems, chunk, false);
    let mut correct = 0usize;
    let mut ties = 0usize;
    for (sc, p) in scores.iter().zip(problems) {
        let (pred, tied) = argmax_lowest(sc);
        if tied {
            ties += 1;
        }
        if pred == p.answer {
            correct += 1;
        }
    }
    (correct, ties)
}

/// Answer accuracy and, for meta models given a codebook, pattern accuracy —
/// both computed from the same forward pass per problem.
pub fn rpm_report(
    model: &RpmModel,
    store: &ParamStore,
    problems: &[&MiniRpmProblem],
    chunk: usize,
    split: &str,
    codebook: Option<&MetadataCodebook>,
) -> Result<EvalReport, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let want_qbar = codebook.is_some();
    let (scores, qbars) = rpm_forward_all(model, store, problems, chunk, want_qbar);
    let mut correct = 0usize;
    let mut ties = 0usize;
    for (sc, p) in scores.iter().zip(problems) {
        let (pred, tied) = argmax_lowest(sc);
        if tied {
            ties += 1;
        }
        if pred == p.answer {
            correct += 1;
        }
    }
    let mut report = base_report(
        "mini-rpm",
        split,
        problems.len(),
        AccuracyCell::new(correct, problems.len()),
    );
    report.answer_ties = Some(ties);

    if let Some(codebook) = codebook {
        let encoder = model
            .codebook_encoder
            .as_ref()
            .ok_or(EvalError::MissingCodebook)?;
        let mut s = Session::inference(store);
        let t = encoder.encode(&mut s, codebook)?;
        let t_values = s
            .tape
            .value(t)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("codebook rank 2")
            .to_owned();
        let t_hat = normalize_rows(&t_values);
        let mut per_attr: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut overall = (0usize, 0usize);
        let mut unmapped = 0usize;
        for (qbar, p) in qbars.iter().zip(problems) {
            let q_hat = normalize_rows(qbar);
            // Constrained slots align with the canonically sorted rules; the
            // final slot is the free vector and carries no metric.
            for (alpha, (attr, _rule)) in p.meta.rules.iter().enumerate() {
                let entry = per_attr.entry(attr.name().to_string()).or_insert((0, 0));
                entry.1 += 1;
                overall.1 += 1;
                let target = match codebook.targets_for(&p.meta)[alpha] {
                    Some(t) => t,
                    None => {
                        unmapped += 1;
                        continue;
                    }
                };
                let mut best = 0usize;
                let mut best_sim = f32::NEG_INFINITY;
                for k in 0..t_hat.nrows() {
                    let sim: f32 = q_hat
                        .row(alpha)
                        .iter()
                        .zip(t_hat.row(k).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    if sim > best_sim {
                        best_sim = sim;
                        best = k;
                    }
                }
                if best == target {
                    entry.0 += 1;
                    overall.0 += 1;
                }
            }
        }
        report.pattern_overall = Some(AccuracyCell::new(overall.0, overall.1));
        report.pattern_per_attribute = Some(
            per_attr
                .into_iter()
                .map(|(k, (c, t))| (k, AccuracyCell::new(c, t)))
                .collect(),
        );
        report.pattern_unmapped = Some(unmapped);
    }
    Ok(report)
}

fn normalize_rows(m: &Array2<f32>) -> Array2<f32> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Representations for each problem, (14, d) per problem.
pub fn bongard_reps(
    model: &BongardModel,
    store: &ParamStore,
    problems: &[&MiniBongardProblem],
    chunk: usize,
) -> Vec<Array2<f32>> {
    let mut out = Vec::with_capacity(problems.len());
    for ch in problems.chunks(chunk.max(1)) {
        let mut s = Session::inference(store);
        let fwd = model.forward(&mut s, ch);
        let z = s.tape.value(fwd.z);
        for b in 0..ch.len() {
            out.push(
                z.index_axis(Axis(0), b)
                    .into_dimensionality::<Ix2>()
                    .expect("(14, d)")
                    .to_owned(),
            );
        }
    }
    out
}

/// Classifies the two test panels by prototype cosine similarity: positive
/// iff the similarity to the primary prototype (mean of rows 0..6) strictly
/// exceeds the similarity to the auxiliary prototype (mean of rows 7..13);
/// ties classify negative. Returns the predicted "belongs to the primary
/// group" label for panel 7 (row 6) and panel 14 (row 13).
pub fn bongard_predict(z: &Array2<f32>) -> (bool, bool) {
    let d = z.ncols();
    let proto = |rows: std::ops::Range<usize>| -> Vec<f32> {
        let mut acc = vec![0f32; d];
        let n = rows.len() as f32;
        for r in rows {
            for i in 0..d {
                acc[i] += z[(r, i)] / n;
            }
        }
        acc
    };
    let primary = proto(0..6);
    let auxiliary = proto(7..13);
    let cosine = |row: usize, proto: &[f32]| -> f32 {
        let mut dot = 0f32;
        let mut nz = 0f32;
        let mut np = 0f32;
        for i in 0..d {
            dot += z[(row, i)] * proto[i];
            nz += z[(row, i)] * z[(row, i)];
            np += proto[i] * proto[i];
        }
        dot / (nz.sqrt() * np.sqrt()).max(1e-12)
    };
    let classify = |row: usize| cosine(row, &primary) > cosine(row, &auxiliary);
    (classify(6), classify(13))
}

/// (correct test images, problems with both test images correct).
pub fn bongard_image_counts(
    model: &BongardModel,
    store: &ParamStore,
    problems: &[&MiniBongardProblem],
    chunk: usize,
) -> (usize, usize) {
    let reps = bongard_reps(model, store, problems, chunk);
    let mut images = 0usize;
    let mut both = 0usize;
    for z in &reps {
        let (pos7, pos14) = bongard_predict(z);
        let c7 = pos7;
        let c14 = !pos14;
        images += c7 as usize + c14 as usize;
        both += (c7 && c14) as usize;
    }
    (images, both)
}

/// Per-image and per-problem accuracy, per concept family and pooled.
pub fn bongard_report(
    model: &BongardModel,
    store: &ParamStore,
    problems: &[&MiniBongardProblem],
    chunk: usize,
    split: &str,
) -> Result<EvalReport, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let reps = bongard_reps(model, store, problems, chunk);
    let mut image_counts: BTreeMap<ConceptFamily, (usize, usize)> = BTreeMap::new();
    let mut problem_counts: BTreeMap<ConceptFamily, (usize, usize)> = BTreeMap::new();
    let mut images = (0usize, 0usize);
    let mut wholes = (0usize, 0usize);
    for (z, p) in reps.iter().zip(problems) {
        let (pos7, pos14) = bongard_predict(z);
        let c7 = pos7;
        let c14 = !pos14;
        let img = image_counts.entry(p.concept).or_insert((0, 0));
        img.0 += c7 as usize + c14 as usize;
        img.1 += 2;
        images.0 += c7 as usize + c14 as usize;
        images.1 += 2;
        let pr = problem_counts.entry(p.concept).or_insert((0, 0));
        pr.0 += (c7 && c14) as usize;
        pr.1 += 1;
        wholes.0 += (c7 && c14) as usize;
        wholes.1 += 1;
    }
    let mut report = base_report(
        "mini-bongard",
        split,
        problems.len(),
        AccuracyCell::new(images.0, images.1),
    );
    report.per_image = Some(AccuracyCell::new(images.0, images.1));
    report.per_problem = Some(AccuracyCell::new(wholes.0, wholes.1));
    report.per_concept_image = Some(
        image_counts
            .into_iter()
            .map(|(k, (c, t))| (k.name().to_string(), AccuracyCell::new(c, t)))
            .collect(),
    );
    report.per_concept_problem = Some(
        problem_counts
            .into_iter()
            .map(|(k, (c, t))| (k.name().to_string(), AccuracyCell::new(c, t)))
            .collect(),
    );
    Ok(report)
}

/// Markdown table rendering of a report.
pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Evaluation report\n\nkind: {} | split: {} | problems: {} | config: {} | tool: {}\n\n",
        report.kind, report.split, report.count, report.config_hash, report.tool_version
    ));
    let cell = |c: &AccuracyCell| {
        format!(
            "{:.4} ({}/{}, 95% CI {:.4}-{:.4})",
            c.accuracy, c.correct, c.total, c.ci_lo, c.ci_hi
        )
    };
    out.push_str(&format!("overall: {}\n\n", cell(&report.overall)));
    if let Some(ties) = report.answer_ties {
        out.push_str(&format!("score ties: {ties}\n\n"));
    }
    if let (Some(img), Some(prob)) = (&report.per_image, &report.per_problem) {
        out.push_str("| metric | accuracy |\n|---|---|\n");
        out.push_str(&format!("| per-image | {} |\n", cell(img)));
        out.push_str(&format!("| per-problem | {} |\n\n", cell(prob)));
    }
    if let Some(map) = &report.per_concept_image {
        out.push_str("| concept | per-image | per-problem |\n|---|---|---|\n");
        for (name, c) in map {
            let p = report
                .per_concept_problem
                .as_ref()
                .and_then(|m| m.get(name))
                .map(&cell)
                .unwrap_or_default();
            out.push_str(&format!("| {name} | {} | {p} |\n", cell(c)));
        }
        out.push('\n');
    }
    if let Some(p) = &report.pattern_overall {
        out.push_str(&format!("pattern overall: {}\n\n", cell(p)));
        if let Some(map) = &report.pattern_per_attribute {
            out.push_str("| attribute | pattern accuracy |\n|---|---|\n");
            for (name, c) in map {
                out.push_str(&format!("| {name} | {} |\n", cell(c)));
            }
            out.push('\n');
        }
        if let Some(u) = report.pattern_unmapped {
            out.push_str(&format!("rules outside the codebook: {u}\n"));
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wilson_brackets_the_point_estimate() {
        let (lo, hi) = wilson_interval(80, 100);
        assert!(lo < 0.8 && 0.8 < hi);
        assert!(lo > 0.70 && hi < 0.88, "({lo}, {hi})");
        let (lo, hi) = wilson_interval(0, 50);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.1);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let (i, tied) = argmax_lowest(&[0.1, 0.9, 0.9, 0.3]);
        assert_eq!(i, 1);
        assert!(tied);
        let (i, tied) = argmax_lowest(&[0.5, 0.2]);
        assert_eq!(i, 0);
        assert!(!tied);
    }

    #[test]
    fn prototype_prediction_rules() {
        // d = 2; primaries along +x, auxiliaries along +y.
        let mut z = Array2::<f32>::zeros((14, 2));
        for r in 0..6 {
            z[(r, 0)] = 1.0;
        }
        for r in 7..13 {
            z[(r, 1)] = 1.0;
        }
        // Positive test panel leans +x, negative test panel leans +y.
        z[(6, 0)] = 0.9;
        z[(6, 1)] = 0.1;
        z[(13, 0)] = 0.1;
        z[(13, 1)] = 0.9;
        let (p7, p14) = bongard_predict(&z);
        assert!(p7);
        assert!(!p14);

        // Exact ties classify negative.
        let tie = array![
            [1.0f32, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.5, 0.5],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.5, 0.5],
        ];
        // Make prototypes symmetric so both cosines tie exactly.
        let mut sym = tie.clone();
        for r in 0..6 {
            sym[(r, 0)] = 1.0;
            sym[(r, 1)] = 1.0;
        }
        for r in 7..13 {
            sym[(r, 0)] = 1.0;
            sym[(r, 1)] = 1.0;
        }
        let (p7, p14) = bongard_predict(&sym);
        assert!(!p7, "tie must classify negative");
        assert!(!p14);
    }
}
