//! Optimization engine: the alternating-freeze EM schedule, per-variant loss
//! assembly, the re-space warm-start and metadata-dropping stages, and the
//! fit loop with checkpoints and a history log.
//!
//! A training step builds forward tapes chunk by chunk, computes every loss
//! in closed form from the tape outputs (which is what lets the covariance
//! term see the whole batch at once), seeds the tapes with the loss
//! gradients, accumulates parameter gradients in chunk order, and applies
//! one Adam update under the phase's freeze mask.

mod adam;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::datagen::{
    build_codebook, Dataset, DatasetKind, MetadataCodebook, MiniBongardProblem, MiniRpmProblem,
    ProblemSet, Split,
};
use crate::losses::{
    bongard_infonce, decorrelation_loss, metadata_loss, respace_diversity_loss,
    rpm_reasoning_loss, LossError, LossReport, LossWeights,
};
use crate::model::{
    read_params, write_params, BongardModel, CheckpointError, ModelConfig, ModelError, ParamStore,
    RpmModel, Session, Variant,
};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("state JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("dataset has no '{0}' split")]
    MissingSplit(&'static str),
    #[error("trainer for {trainer:?} given a {data:?} dataset")]
    KindMismatch {
        trainer: DatasetKind,
        data: DatasetKind,
    },
    #[error(transparent)]
    Gen(#[from] crate::datagen::GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmPhase {
    Joint,
    FreezeFeatures,
    FreezeConcepts,
}

impl EmPhase {
    pub fn name(self) -> &'static str {
        match self {
            EmPhase::Joint => "joint",
            EmPhase::FreezeFeatures => "freeze_features",
            EmPhase::FreezeConcepts => "freeze_concepts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmMode {
    Off,
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmOrder {
    FeaturesFirst,
    ConceptsFirst,
}

/// Alternating-freeze schedule. With `mode = off` every epoch trains
/// jointly; otherwise, after `warmup_epochs` joint epochs, the two freeze
/// phases alternate with the given period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSchedule {
    pub mode: EmMode,
    pub period: usize,
    pub order: EmOrder,
    pub warmup_epochs: usize,
}

impl Default for EmSchedule {
    fn default() -> Self {
        Self {
            mode: EmMode::Off,
            period: 1,
            order: EmOrder::FeaturesFirst,
            warmup_epochs: 0,
        }
    }
}

impl EmSchedule {
    pub fn alternate() -> Self {
        Self {
            mode: EmMode::Alternate,
            ..Self::default()
        }
    }
}

/// Deterministic phase for an epoch index.
pub fn em_phase(epoch: usize, schedule: &EmSchedule) -> EmPhase {
    if schedule.mode == EmMode::Off || epoch < schedule.warmup_epochs {
        return EmPhase::Joint;
    }
    let period = schedule.period.max(1);
    let k = (epoch - schedule.warmup_epochs) / period;
    let first = k % 2 == 0;
    match (schedule.order, first) {
        (EmOrder::FeaturesFirst, true) | (EmOrder::ConceptsFirst, false) => {
            EmPhase::FreezeFeatures
        }
        _ => EmPhase::FreezeConcepts,
    }
}

/// Everything one training run needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Problems per forward tape; memory/speed knob with no effect on
    /// results except the covariance term seeing the whole batch anyway.
    pub chunk_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub em: EmSchedule,
    /// Zero out the metadata term (the dropping process).
    pub drop_meta: bool,
    /// Keep the feature path frozen in every phase (warm-start ablation).
    pub freeze_g_theta: bool,
    pub config_hash: String,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            model: ModelConfig::rpm_default(),
            epochs: 10,
            batch_size: 64,
            chunk_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            em: EmSchedule::default(),
            drop_meta: false,
            freeze_g_theta: false,
            config_hash: "0".repeat(16),
        }
    }
}

impl TrainPlan {
    pub fn rpm_default() -> Self {
        Self::default()
    }

    pub fn bongard_default() -> Self {
        Self {
            model: ModelConfig::bongard_default(),
            batch_size: 120,
            chunk_size: 4,
            ..Self::default()
        }
    }

    fn effective_weights(&self) -> LossWeights {
        let mut w = self.model.loss_weights;
        if self.drop_meta {
            w.metadata = 0.0;
        }
        w
    }
}

pub enum TaskModel {
    Bongard(BongardModel),
    Rpm(RpmModel),
}

pub enum Batch<'a> {
    Bongard(Vec<&'a MiniBongardProblem>),
    Rpm(Vec<&'a MiniRpmProblem>),
}

fn trainable_fn(phase: EmPhase, freeze_g_theta: bool) -> impl Fn(&str) -> bool {
    move |name: &str| {
        if freeze_g_theta && name.starts_with("g_theta.") {
            return false;
        }
        match phase {
            EmPhase::Joint => true,
            EmPhase::FreezeFeatures => !name.starts_with("g_theta."),
            EmPhase::FreezeConcepts => !name.starts_with("g_omega."),
        }
    }
}

pub struct Trainer {
    pub plan: TrainPlan,
    pub kind: DatasetKind,
    pub model: TaskModel,
    pub store: ParamStore,
    pub adam_cfg: AdamConfig,
    pub adam: AdamState,
    pub codebook: Option<MetadataCodebook>,
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(kind: DatasetKind, plan: TrainPlan) -> Result<Self, TrainError> {
        plan.model.validate(kind, None)?;
        let mut store = ParamStore::new();
        let mut rng = Stream::substream(plan.seed, "init", 0);
        let model = match kind {
            DatasetKind::MiniBongard => {
                TaskModel::Bongard(BongardModel::new(&plan.model, &mut store, &mut rng))
            }
            DatasetKind::MiniRpm => {
                TaskModel::Rpm(RpmModel::new(&plan.model, &mut store, &mut rng))
            }
        };
        let adam = AdamState::zeros_like(&store);
        let adam_cfg = AdamConfig::new(plan.lr, plan.weight_decay);
        Ok(Self {
            plan,
            kind,
            model,
            store,
            adam_cfg,
            adam,
            codebook: None,
            next_epoch: 0,
        })
    }

    /// New stage with a re-space layer inserted after the feature path. All
    /// base parameters are copied bit-exactly (so the new model with the
    /// layer bypassed behaves exactly like the base model); the basis is
    /// freshly initialized and the optimizer restarts.
    pub fn warm_start_respace(
        kind: DatasetKind,
        mut plan: TrainPlan,
        base: &LoadedCheckpoint,
    ) -> Result<Self, TrainError> {
        plan.model.respace = true;
        let mut trainer = Self::new(kind, plan)?;
        for (name, value) in &base.params {
            if name.starts_with("adam.") {
                continue;
            }
            let id = trainer.store.id(name).ok_or_else(|| {
                TrainError::Architecture(format!("base parameter {name} has no slot in the new model"))
            })?;
            if trainer.store.value(id).shape() != value.shape() {
                return Err(TrainError::Architecture(format!(
                    "parameter {name}: base shape {:?}, new shape {:?}",
                    value.shape(),
                    trainer.store.value(id).shape()
                )));
            }
            *trainer.store.value_mut(id) = value.clone();
        }
        Ok(trainer)
    }

    /// Warm start plus dropping the metadata constraints. Returns the
    /// trainer and whether the base was not a meta variant (in which case
    /// dropping is a no-op on the losses).
    pub fn drop_meta_stage(
        kind: DatasetKind,
        mut plan: TrainPlan,
        base: &LoadedCheckpoint,
    ) -> Result<(Self, bool), TrainError> {
        plan.drop_meta = true;
        let warned = base.state.variant != Variant::MetaTripleCfn.name();
        let trainer = Self::warm_start_respace(kind, plan, base)?;
        Ok((trainer, warned))
    }

    pub fn rpm(&self) -> Option<&RpmModel> {
        match &self.model {
            TaskModel::Rpm(m) => Some(m),
            _ => None,
        }
    }

    pub fn bongard(&self) -> Option<&BongardModel> {
        match &self.model {
            TaskModel::Bongard(m) => Some(m),
            _ => None,
        }
    }

    pub fn set_codebook(&mut self, codebook: MetadataCodebook) {
        self.codebook = Some(codebook);
    }

    /// One optimizer step over a batch.
    pub fn train_step(&mut self, batch: &Batch<'_>, phase: EmPhase) -> Result<LossReport, TrainError> {
        match batch {
            Batch::Rpm(problems) => self.step_rpm(problems, phase),
            Batch::Bongard(problems) => self.step_bongard(problems, phase),
        }
    }

    fn respace_basis_id(&self) -> Option<usize> {
        match &self.model {
            TaskModel::Rpm(m) => m.respace_basis(),
            TaskModel::Bongard(m) => m.respace_basis(),
        }
    }

    /// Closed-form diversity term on the basis parameter; returns the term
    /// value and stages the weighted gradient into `grads`.
    fn apply_respace_diversity(
        &self,
        grads: &mut [Option<ArrayD<f32>>],
        weights: &LossWeights,
    ) -> Option<f64> {
        let basis_id = self.respace_basis_id()?;
        let basis = self
            .store
            .value(basis_id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("basis is rank 2");
        let (value, grad) = respace_diversity_loss(basis, self.plan.model.t_respace);
        let weighted = grad.mapv(|g| g * weights.respace as f32).into_dyn();
        match &mut grads[basis_id] {
            Some(acc) => *acc += &weighted,
            slot @ None => *slot = Some(weighted),
        }
        Some(value as f64)
    }

    fn step_rpm(
        &mut self,
        problems: &[&MiniRpmProblem],
        phase: EmPhase,
    ) -> Result<LossReport, TrainError> {
        let weights = self.plan.effective_weights();
        let trainable = trainable_fn(phase, self.plan.freeze_g_theta);
        let b_total = problems.len();
        let chunk = self.plan.chunk_size.max(1);
        let model = match &self.model {
            TaskModel::Rpm(m) => m,
            _ => unreachable!("kind checked upstream"),
        };
        let use_cov = self.plan.model.variant.uses_covariance();
        let use_meta = self.plan.model.variant.uses_metadata() && !self.plan.drop_meta;
        let d = self.plan.model.embed_dim;
        let s_tokens = self.plan.model.concept_tokens;

        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.store.len()];
        let mut reasoning_sum = 0.0f64;
        let mut cov_value: Option<f64> = None;
        let mut meta_sum = 0.0f64;

        let timing = std::env::var("CROSSFEAT_TIMING").is_ok();
        let t0 = std::time::Instant::now();
        {
            // Forward all chunks, keeping tapes alive for the backward pass.
            let mut sessions = Vec::new();
            for problems_chunk in problems.chunks(chunk) {
                let mut s = Session::new(&self.store, &trainable);
                let fwd = model.forward(&mut s, problems_chunk);
                sessions.push((s, fwd, problems_chunk));
            }
            if timing { eprintln!("forward: {:?}", t0.elapsed()); }
            let t1 = std::time::Instant::now();

            // Reasoning: mean cross-entropy over the batch.
            let mut score_seeds: Vec<Array2<f32>> = Vec::with_capacity(sessions.len());
            for (s, fwd, problems_chunk) in &sessions {
                let scores = s
                    .tape
                    .value(fwd.scores)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("scores rank 2");
                let mut seed = Array2::<f32>::zeros(scores.raw_dim());
                for (row, p) in problems_chunk.iter().enumerate() {
                    let (loss, grad) = rpm_reasoning_loss(scores.row(row), p.answer)?;
                    reasoning_sum += loss as f64;
                    let inv_b = 1.0 / b_total as f32;
                    for (o, g) in grad.iter().enumerate() {
                        seed[(row, o)] = g * inv_b;
                    }
                }
                score_seeds.push(seed);
            }

            // Covariance: one decorrelation over every feature vector of the batch.
            let mut feature_seeds: Vec<Option<ArrayD<f32>>> = vec![None; sessions.len()];
            if use_cov {
                let mut rows = 0usize;
                for (s, fwd, _) in &sessions {
                    rows += s.tape.shape(fwd.features)[0];
                }
                let mut all = Array2::<f32>::zeros((rows, d));
                let mut offset = 0usize;
                for (s, fwd, _) in &sessions {
                    let f = s
                        .tape
                        .value(fwd.features)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("features rank 2");
                    all.slice_mut(ndarray::s![offset..offset + f.nrows(), ..])
                        .assign(&f);
                    offset += f.nrows();
                }
                let (value, dx) = decorrelation_loss(all.view())?;
                cov_value = Some(value as f64);
                let mut offset = 0usize;
                for (i, (s, fwd, _)) in sessions.iter().enumerate() {
                    let n = s.tape.shape(fwd.features)[0];
                    let seed = dx
                        .slice(ndarray::s![offset..offset + n, ..])
                        .mapv(|g| g * weights.covariance as f32)
                        .into_dyn();
                    feature_seeds[i] = Some(seed);
                    offset += n;
                }
            }

            // Metadata alignment against the encoded codebook.
            let mut meta_session: Option<(Session, crate::tape::Tx, Array2<f32>)> = None;
            let mut qbar_seeds: Vec<Option<ArrayD<f32>>> = vec![None; sessions.len()];
            if use_meta {
                let codebook = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| TrainError::Architecture("meta variant needs a codebook".into()))?;
                let encoder = model
                    .codebook_encoder
                    .as_ref()
                    .expect("meta variant has a codebook encoder");
                let mut cbs = Session::new(&self.store, &trainable);
                let t_vectors = encoder.encode(&mut cbs, codebook)?;
                let t_values = cbs
                    .tape
                    .value(t_vectors)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("codebook rank 2")
                    .to_owned();
                let mut d_codebook = Array2::<f32>::zeros(t_values.raw_dim());
                let inv_b = 1.0 / b_total as f32;
                for (i, (s, fwd, problems_chunk)) in sessions.iter().enumerate() {
                    let qbar = s.tape.value(fwd.qbar);
                    let mut seed = ArrayD::<f32>::zeros(IxDyn(qbar.shape()));
                    for (row, p) in problems_chunk.iter().enumerate() {
                        let targets: Vec<usize> = codebook
                            .targets_for(&p.meta)
                            .into_iter()
                            .flatten()
                            .collect();
                        let constrained = targets.len().min(s_tokens.saturating_sub(1));
                        if constrained == 0 {
                            continue;
                        }
                        let mut q_sub = Array2::<f32>::zeros((constrained, d));
                        for a in 0..constrained {
                            for i_dim in 0..d {
                                q_sub[(a, i_dim)] = qbar[[row, a, i_dim]];
                            }
                        }
                        let (loss, mg) = metadata_loss(
                            q_sub.view(),
                            t_values.view(),
                            &targets[..constrained],
                            self.plan.model.tau_meta,
                        )?;
                        meta_sum += loss as f64;
                        for a in 0..constrained {
                            for i_dim in 0..d {
                                seed[[row, a, i_dim]] =
                                    mg.d_qbar[(a, i_dim)] * weights.metadata as f32 * inv_b;
                            }
                        }
                        d_codebook
                            .zip_mut_with(&mg.d_codebook, |acc, &g| {
                                *acc += g * weights.metadata as f32 * inv_b
                            });
                    }
                    qbar_seeds[i] = Some(seed);
                }
                meta_session = Some((cbs, t_vectors, d_codebook));
            }

            if timing { eprintln!("losses: {:?}", t1.elapsed()); }
            let t2 = std::time::Instant::now();
            // Backward in chunk order, then the codebook tape.
            for (i, (s, fwd, _)) in sessions.iter().enumerate() {
                let mut seeds = vec![(fwd.scores, score_seeds[i].clone().into_dyn())];
                if let Some(fs) = feature_seeds[i].take() {
                    seeds.push((fwd.features, fs));
                }
                if let Some(qs) = qbar_seeds[i].take() {
                    seeds.push((fwd.qbar, qs));
                }
                accumulate_grads(&mut grads, s.param_grads(seeds));
            }
            if let Some((cbs, t_vectors, d_codebook)) = meta_session {
                accumulate_grads(
                    &mut grads,
                    cbs.param_grads(vec![(t_vectors, d_codebook.into_dyn())]),
                );
            }
            if timing { eprintln!("backward: {:?}", t2.elapsed()); }
        }

        let respace_value = self.apply_respace_diversity(&mut grads, &weights);
        let report = LossReport::assemble(
            reasoning_sum / b_total as f64,
            cov_value,
            use_meta.then(|| meta_sum / b_total as f64),
            respace_value,
            weights,
        );
        if let Some(term) = report.non_finite_term() {
            return Err(TrainError::NonFinite { term });
        }
        adam_step(&self.adam_cfg, &mut self.store, &mut self.adam, &grads, &trainable);
        Ok(report)
    }

    fn step_bongard(
        &mut self,
        problems: &[&MiniBongardProblem],
        phase: EmPhase,
    ) -> Result<LossReport, TrainError> {
        let weights = self.plan.effective_weights();
        let trainable = trainable_fn(phase, self.plan.freeze_g_theta);
        let b_total = problems.len();
        let chunk = self.plan.chunk_size.max(1);
        let model = match &self.model {
            TaskModel::Bongard(m) => m,
            _ => unreachable!("kind checked upstream"),
        };
        let use_cov = self.plan.model.variant.uses_covariance();
        let d = self.plan.model.embed_dim;

        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.store.len()];
        let mut reasoning_sum = 0.0f64;
        let mut cov_value: Option<f64> = None;

        {
            let mut sessions = Vec::new();
            for problems_chunk in problems.chunks(chunk) {
                let mut s = Session::new(&self.store, &trainable);
                let fwd = model.forward(&mut s, problems_chunk);
                sessions.push((s, fwd, problems_chunk.len()));
            }

            let mut z_seeds: Vec<ArrayD<f32>> = Vec::with_capacity(sessions.len());
            for (s, fwd, n) in &sessions {
                let z = s.tape.value(fwd.z);
                let mut seed = ArrayD::<f32>::zeros(IxDyn(z.shape()));
                for b in 0..*n {
                    let zb = z
                        .index_axis(Axis(0), b)
                        .into_dimensionality::<Ix2>()
                        .expect("(14, d)");
                    let (loss, dz) = bongard_infonce(zb, self.plan.model.t_infonce)?;
                    reasoning_sum += loss as f64;
                    let inv_b = 1.0 / b_total as f32;
                    let mut target = seed.index_axis_mut(Axis(0), b);
                    for j in 0..14 {
                        for i_dim in 0..d {
                            target[[j, i_dim]] = dz[(j, i_dim)] * inv_b;
                        }
                    }
                }
                z_seeds.push(seed);
            }

            let mut token_seeds: Vec<Option<ArrayD<f32>>> = vec![None; sessions.len()];
            if use_cov {
                let mut rows = 0usize;
                for (s, fwd, _) in &sessions {
                    let k = fwd.feature_tokens.expect("cfn variants have tokens");
                    rows += s.tape.shape(k)[0];
                }
                let mut all = Array2::<f32>::zeros((rows, d));
                let mut offset = 0usize;
                for (s, fwd, _) in &sessions {
                    let k = fwd.feature_tokens.expect("checked");
                    let v = s
                        .tape
                        .value(k)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("tokens rank 2");
                    all.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                        .assign(&v);
                    offset += v.nrows();
                }
                let (value, dx) = decorrelation_loss(all.view())?;
                cov_value = Some(value as f64);
                let mut offset = 0usize;
                for (i, (s, fwd, _)) in sessions.iter().enumerate() {
                    let k = fwd.feature_tokens.expect("checked");
                    let n = s.tape.shape(k)[0];
                    token_seeds[i] = Some(
                        dx.slice(ndarray::s![offset..offset + n, ..])
                            .mapv(|g| g * weights.covariance as f32)
                            .into_dyn(),
                    );
                    offset += n;
                }
            }

            for (i, (s, fwd, _)) in sessions.iter().enumerate() {
                let mut seeds = vec![(fwd.z, z_seeds[i].clone())];
                if let Some(ts) = token_seeds[i].take() {
                    seeds.push((fwd.feature_tokens.expect("checked"), ts));
                }
                accumulate_grads(&mut grads, s.param_grads(seeds));
            }
        }

        let respace_value = self.apply_respace_diversity(&mut grads, &weights);
        let report = LossReport::assemble(
            reasoning_sum / b_total as f64,
            cov_value,
            None,
            respace_value,
            weights,
        );
        if let Some(term) = report.non_finite_term() {
            return Err(TrainError::NonFinite { term });
        }
        adam_step(&self.adam_cfg, &mut self.store, &mut self.adam, &grads, &trainable);
        Ok(report)
    }
}

fn accumulate_grads(total: &mut [Option<ArrayD<f32>>], part: Vec<Option<ArrayD<f32>>>) {
    for (slot, g) in total.iter_mut().zip(part) {
        if let Some(g) = g {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
    }
}

/// state.json beside params.bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    pub adam_step: u64,
    pub em_phase: String,
    pub config_hash: String,
    pub rng_state: RngState,
    pub variant: String,
    pub kind: DatasetKind,
    pub val_accuracy: Option<f64>,
    /// Full plan, so a checkpoint alone can rebuild its trainer.
    pub plan: TrainPlan,
    /// Codebook entries the model was trained against (meta variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

pub struct LoadedCheckpoint {
    pub params: Vec<(String, ArrayD<f32>)>,
    pub state: CheckpointState,
}

/// Checkpoint IO: `params.bin` holds the model parameters and optimizer
/// moments as named arrays; `state.json` the bookkeeping.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save(
        dir: &Path,
        trainer: &Trainer,
        phase: EmPhase,
        val_accuracy: Option<f64>,
    ) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        let store = &trainer.store;
        let mut names: Vec<(String, ArrayD<f32>)> = Vec::new();
        for id in store.ids() {
            names.push((store.name(id).to_string(), store.value(id).clone()));
            names.push((format!("adam.m.{}", store.name(id)), trainer.adam.m[id].clone()));
            names.push((format!("adam.v.{}", store.name(id)), trainer.adam.v[id].clone()));
        }
        let entries: Vec<(String, &ArrayD<f32>)> =
            names.iter().map(|(n, v)| (n.clone(), v)).collect();
        write_params(&dir.join("params.bin"), &entries)?;
        let state = CheckpointState {
            epoch: trainer.next_epoch,
            adam_step: trainer.adam.step,
            em_phase: phase.name().to_string(),
            config_hash: trainer.plan.config_hash.clone(),
            rng_state: RngState {
                seed: trainer.plan.seed,
                next_epoch: trainer.next_epoch,
            },
            variant: trainer.plan.model.variant.name().to_string(),
            kind: trainer.kind,
            val_accuracy,
            plan: trainer.plan.clone(),
            codebook: trainer
                .codebook
                .as_ref()
                .map(|cb| cb.entries().to_vec()),
        };
        let json = serde_json::to_string_pretty(&state)?;
        std::fs::write(dir.join("state.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<LoadedCheckpoint, TrainError> {
        let params = read_params(&dir.join("params.bin"))?;
        let raw = std::fs::read_to_string(dir.join("state.json"))?;
        let state: CheckpointState = serde_json::from_str(&raw)?;
        Ok(LoadedCheckpoint { params, state })
    }
}

impl Trainer {
    /// Restores a trainer (parameters, moments, epoch counter) from a
    /// checkpoint produced with the same plan.
    pub fn from_checkpoint(
        kind: DatasetKind,
        plan: TrainPlan,
        loaded: &LoadedCheckpoint,
    ) -> Result<Self, TrainError> {
        let mut trainer = Self::new(kind, plan)?;
        let mut by_name: std::collections::BTreeMap<&str, &ArrayD<f32>> = Default::default();
        for (name, value) in &loaded.params {
            by_name.insert(name.as_str(), value);
        }
        for id in trainer.store.ids().collect::<Vec<_>>() {
            let name = trainer.store.name(id).to_string();
            let value = by_name
                .get(name.as_str())
                .ok_or_else(|| TrainError::Architecture(format!("checkpoint lacks {name}")))?;
            if value.shape() != trainer.store.value(id).shape() {
                return Err(TrainError::Architecture(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    trainer.store.value(id).shape()
                )));
            }
            *trainer.store.value_mut(id) = (*value).clone();
            let m = by_name
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| TrainError::Architecture(format!("checkpoint lacks adam.m.{name}")))?;
            let v = by_name
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| TrainError::Architecture(format!("checkpoint lacks adam.v.{name}")))?;
            trainer.adam.m[id] = (*m).clone();
            trainer.adam.v[id] = (*v).clone();
        }
        trainer.adam.step = loaded.state.adam_step;
        trainer.next_epoch = loaded.state.rng_state.next_epoch;
        if let Some(entries) = &loaded.state.codebook {
            trainer.codebook = Some(MetadataCodebook::from_entries(entries.clone()));
        }
        Ok(trainer)
    }

    /// Restores a trainer using the plan stored inside the checkpoint.
    pub fn from_checkpoint_auto(loaded: &LoadedCheckpoint) -> Result<Self, TrainError> {
        Self::from_checkpoint(loaded.state.kind, loaded.state.plan.clone(), loaded)
    }
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub losses: LossReport,
    pub val_accuracy: f64,
    pub val_ties: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mean_opt = |f: &dyn Fn(&LossReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    LossReport::assemble(
        reports.iter().map(|r| r.reasoning).sum::<f64>() / n,
        mean_opt(&|r| r.covariance),
        mean_opt(&|r| r.metadata),
        mean_opt(&|r| r.respace_div),
        reports
            .first()
            .map(|r| r.weights)
            .unwrap_or_default(),
    )
}

/// Runs the plan to completion: shuffled batches, per-epoch validation, a
/// `history.jsonl` log, a `best/` checkpoint at the highest validation
/// accuracy and a `last/` checkpoint for resuming.
pub fn fit(trainer: &mut Trainer, data: &Dataset, out_dir: &Path) -> Result<FitResult, TrainError> {
    if data.manifest.kind != trainer.kind {
        return Err(TrainError::KindMismatch {
            trainer: trainer.kind,
            data: data.manifest.kind,
        });
    }
    let train = data.split(Split::Train).ok_or(TrainError::MissingSplit("train"))?;
    let val = data.split(Split::Val).ok_or(TrainError::MissingSplit("val"))?;

    // Meta variants need the metadata enumeration of the training corpus and
    // exactly rule-count + 1 concept slots.
    if trainer.plan.model.variant.uses_metadata() {
        if let ProblemSet::Rpm(problems) = train {
            if trainer.codebook.is_none() {
                let codebook = match &data.manifest.codebook {
                    Some(entries) => MetadataCodebook::from_entries(entries.clone()),
                    None => build_codebook(problems)?,
                };
                trainer.set_codebook(codebook);
            }
            let s_tilde = problems.first().map(|p| p.meta.rules.len());
            trainer.plan.model.validate(trainer.kind, s_tilde)?;
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let mut history_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("history.jsonl"))?;

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let start_epoch = trainer.next_epoch;
    for epoch in start_epoch..trainer.plan.epochs {
        let phase = em_phase(epoch, &trainer.plan.em);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = Stream::substream(trainer.plan.seed, "shuffle", epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut reports = Vec::new();
        for batch_idx in order.chunks(trainer.plan.batch_size.max(1)) {
            let batch = match train {
                ProblemSet::Rpm(problems) => {
                    Batch::Rpm(batch_idx.iter().map(|&i| &problems[i]).collect())
                }
                ProblemSet::Bongard(problems) => {
                    Batch::Bongard(batch_idx.iter().map(|&i| &problems[i]).collect())
                }
            };
            reports.push(trainer.train_step(&batch, phase)?);
        }
        trainer.next_epoch = epoch + 1;

        let (val_accuracy, val_ties) = validate(trainer, val)?;
        let record = EpochRecord {
            epoch,
            phase: phase.name().to_string(),
            losses: mean_reports(&reports),
            val_accuracy,
            val_ties,
        };
        let line = serde_json::to_string(&record)?;
        writeln!(history_file, "{line}")?;
        history.push(record);

        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = epoch;
            Checkpoint::save(&out_dir.join("best"), trainer, phase, Some(val_accuracy))?;
        }
        Checkpoint::save(&out_dir.join("last"), trainer, phase, Some(val_accuracy))?;
    }
    Ok(FitResult {
        history,
        best_val_accuracy: best_val,
        best_epoch,
    })
}

/// Validation metric: RPM answer accuracy (ties counted and broken toward
/// the lowest index) or Bongard per-image accuracy.
pub fn validate(trainer: &Trainer, val: &ProblemSet) -> Result<(f64, usize), TrainError> {
    match (&trainer.model, val) {
        (TaskModel::Rpm(model), ProblemSet::Rpm(problems)) => {
            let refs: Vec<&MiniRpmProblem> = problems.iter().collect();
            let (correct, ties) =
                crate::eval::rpm_answer_counts(model, &trainer.store, &refs, trainer.plan.chunk_size);
            Ok((correct as f64 / refs.len().max(1) as f64, ties))
        }
        (TaskModel::Bongard(model), ProblemSet::Bongard(problems)) => {
            let refs: Vec<&MiniBongardProblem> = problems.iter().collect();
            let counts =
                crate::eval::bongard_image_counts(model, &trainer.store, &refs, trainer.plan.chunk_size);
            Ok((counts.0 as f64 / (2 * refs.len().max(1)) as f64, 0))
        }
        _ => Err(TrainError::KindMismatch {
            trainer: trainer.kind,
            data: val.kind(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn em_phase_schedule_matches_definition() {
        let s = EmSchedule {
            mode: EmMode::Alternate,
            period: 1,
            order: EmOrder::FeaturesFirst,
            warmup_epochs: 0,
        };
        assert_eq!(em_phase(0, &s), EmPhase::FreezeFeatures);
        assert_eq!(em_phase(1, &s), EmPhase::FreezeConcepts);
        assert_eq!(em_phase(2, &s), EmPhase::FreezeFeatures);

        let off = EmSchedule::default();
        for epoch in 0..5 {
            assert_eq!(em_phase(epoch, &off), EmPhase::Joint);
        }

        let warm = EmSchedule {
            mode: EmMode::Alternate,
            period: 2,
            order: EmOrder::ConceptsFirst,
            warmup_epochs: 2,
        };
        assert_eq!(em_phase(0, &warm), EmPhase::Joint);
        assert_eq!(em_phase(1, &warm), EmPhase::Joint);
        assert_eq!(em_phase(2, &warm), EmPhase::FreezeConcepts);
        assert_eq!(em_phase(3, &warm), EmPhase::FreezeConcepts);
        assert_eq!(em_phase(4, &warm), EmPhase::FreezeFeatures);
    }

    #[test]
    fn phase_coverage_over_two_periods() {
        for period in [1usize, 2, 3] {
            let s = EmSchedule {
                mode: EmMode::Alternate,
                period,
                order: EmOrder::FeaturesFirst,
                warmup_epochs: 1,
            };
            for start in 1..6 {
                let window: Vec<EmPhase> =
                    (start..start + 2 * period).map(|e| em_phase(e, &s)).collect();
                assert!(window.contains(&EmPhase::FreezeFeatures), "{window:?}");
                assert!(window.contains(&EmPhase::FreezeConcepts), "{window:?}");
            }
        }
    }
}
