//! Incremental-training pipelines behind a common strategy trait.
//!
//! Each pipeline (direct transfer, expand/compress, adapt/fuse) is a
//! [`Pipeline`] implementation registered by name and selected through the
//! run config. Task 1 is shared: every pipeline degenerates to the same
//! supervised training problem there, driven by the same seed stream, so a
//! single-task experiment is pipeline-independent by construction.

mod maf;
mod mdt;
mod mec;

pub use maf::MafPipeline;
pub use mdt::MdtPipeline;
pub use mec::MecPipeline;

use crate::config::{
    ConfigError, DatasetKind, MemoryPolicyChoice, PipelineKind, ProtocolChoice, RunConfig,
};
use crate::data::{
    apply_longtail, csv_dataset, make_synthetic_dataset, DataError, LongTailMode, Sample,
    TaskSpec, TaskStream,
};
use crate::eval::{evaluate, EvalError};
use crate::losses::{soften, ClassPrior};
use crate::memory::{imbalance_ratio, BudgetPolicy, RehearsalMemory};
use crate::model::{batch_input, Extractor, LogitBundle, Mlp, Model};
use crate::optim::SgdState;
use crate::results::{ExperimentResult, StepRecord};
use crate::seeds::{self, stream};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Stage tags folded into the seed stream.
pub(crate) mod stage_tag {
    pub const INITIAL: u64 = 10;
    pub const ADAPT: u64 = 11;
    pub const FUSION: u64 = 12;
    pub const MDT: u64 = 13;
    pub const MEC_EXPAND: u64 = 14;
    pub const MEC_COMPRESS: u64 = 15;
}

/// A failure inside one training stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub msg: String,
}

impl StageError {
    pub fn new(stage: &'static str, msg: impl ToString) -> Self {
        StageError { stage, msg: msg.to_string() }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("task {task}, stage {stage}: {msg}")]
    Stage { task: usize, stage: &'static str, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Read-only view of the run config handed to pipelines.
pub struct TrainContext<'a> {
    pub cfg: &'a RunConfig,
}

impl TrainContext<'_> {
    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }
}

/// One interchangeable training strategy. Implementations own their stage
/// structure and teachers; memory bookkeeping stays in the experiment loop.
pub trait Pipeline {
    fn name(&self) -> &'static str;

    /// Trains the model for `task`, given the previous task's model and the
    /// rehearsal memory as of the start of the task.
    fn train_task(
        &self,
        ctx: &TrainContext,
        prev: Option<&Model>,
        task: &TaskSpec,
        memory: &RehearsalMemory,
    ) -> Result<Model, StageError>;

    /// Resolved implementation choices worth recording in the result.
    fn manifest(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

/// Name-indexed strategy registry.
pub fn registry() -> Vec<(&'static str, fn() -> Box<dyn Pipeline>)> {
    vec![
        ("mdt", || Box::new(MdtPipeline) as Box<dyn Pipeline>),
        ("mec", || Box::new(MecPipeline) as Box<dyn Pipeline>),
        ("maf", || Box::new(MafPipeline) as Box<dyn Pipeline>),
    ]
}

pub fn by_name(name: &str) -> Option<Box<dyn Pipeline>> {
    registry().into_iter().find(|(n, _)| *n == name).map(|(_, ctor)| ctor())
}

pub fn create(kind: PipelineKind) -> Box<dyn Pipeline> {
    by_name(kind.name()).expect("every pipeline kind is registered")
}

// ── Stage data ──────────────────────────────────────────────────────

/// Materialized training pool for one stage: inputs, logit-column labels,
/// memory provenance flags, and optional pre-softened teacher rows.
pub struct StagePool {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub is_memory: Vec<bool>,
    pub teacher_old: Option<TeacherMatrix>,
    pub teacher_new: Option<TeacherMatrix>,
}

pub struct TeacherMatrix {
    pub rows: Vec<Vec<f64>>,
    pub width: usize,
}

/// Per-batch tape handles the loss builder works with.
pub struct BatchView {
    pub labels: Vec<usize>,
    /// Row indices (within the batch) of rehearsal samples.
    pub memory_rows: Vec<usize>,
    pub teacher_old: Option<TensorId>,
    pub teacher_new: Option<TensorId>,
}

pub(crate) fn column_map(model: &Model) -> BTreeMap<usize, usize> {
    model.class_columns().into_iter().enumerate().map(|(col, class)| (class, col)).collect()
}

/// Current-task data plus rehearsal memory, labels mapped to logit columns.
pub(crate) fn joint_pool(
    task: &TaskSpec,
    memory: &RehearsalMemory,
    columns: &BTreeMap<usize, usize>,
) -> StagePool {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    let mut is_memory = Vec::new();
    for s in &task.train {
        xs.push(s.features.clone());
        labels.push(columns[&s.label]);
        is_memory.push(false);
    }
    for s in memory.samples() {
        xs.push(s.features.clone());
        labels.push(columns[&s.label]);
        is_memory.push(true);
    }
    StagePool { xs, labels, is_memory, teacher_old: None, teacher_new: None }
}

/// Current-task data only, labels local to the task's class list.
pub(crate) fn current_task_pool(task: &TaskSpec) -> StagePool {
    let local: BTreeMap<usize, usize> =
        task.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let xs: Vec<Vec<f64>> = task.train.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<usize> = task.train.iter().map(|s| local[&s.label]).collect();
    let is_memory = vec![false; xs.len()];
    StagePool { xs, labels, is_memory, teacher_old: None, teacher_new: None }
}

/// Frozen teacher probabilities for every pool sample, softened at the
/// distillation temperature.
pub(crate) fn teacher_probs(
    teacher: &Model,
    xs: &[Vec<f64>],
    temperature: f64,
) -> Result<TeacherMatrix, StageError> {
    let width = teacher.seen_class_count();
    let mut rows = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(256) {
        let views: Vec<&[f64]> = chunk.iter().map(|v| v.as_slice()).collect();
        let logits = teacher
            .fused_logits_values(&views)
            .map_err(|e| StageError::new("teacher-forward", e))?;
        for row in logits {
            rows.push(soften(&row, temperature).map_err(|e| StageError::new("teacher-soften", e))?);
        }
    }
    Ok(TeacherMatrix { rows, width })
}

/// Per-task sample counts of the pool, used by logit adjustment. Returns
/// `None` (with a warning) when some seen task has no samples at all.
pub(crate) fn class_prior_for_pool(
    model: &Model,
    pool: &StagePool,
    tro: f64,
    enabled: bool,
) -> Option<ClassPrior> {
    if !enabled {
        return None;
    }
    let heads = model.heads();
    let mut task_counts = vec![0usize; heads.len()];
    let mut task_widths = Vec::with_capacity(heads.len());
    let mut col_to_task = Vec::new();
    for (t, h) in heads.iter().enumerate() {
        task_widths.push(h.width());
        col_to_task.extend(std::iter::repeat(t).take(h.width()));
    }
    for &label_col in &pool.labels {
        task_counts[col_to_task[label_col]] += 1;
    }
    if task_counts.iter().any(|&m| m == 0) {
        log::warn!("logit adjustment skipped: a seen task has no samples in the pool");
        return None;
    }
    Some(ClassPrior::from_task_counts(&task_counts, &task_widths, tro))
}

// ── Stage training loop ─────────────────────────────────────────────

/// Runs SGD with the cosine schedule over the pool. The tape is rebuilt per
/// batch; `loss_builder` assembles the stage objective from the forward
/// bundle and the batch view.
pub(crate) fn train_stage<F>(
    model: &mut Model,
    pool: &StagePool,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    momentum: f64,
    stage_seed: u64,
    mut loss_builder: F,
) -> Result<(), StageError>
where
    F: FnMut(&mut Tape, &LogitBundle, &BatchView) -> Result<TensorId, TensorError>,
{
    let n = pool.xs.len();
    if n == 0 {
        return Err(StageError::new("train", "empty training pool"));
    }
    let input_dim = model.extractor.input_dim();
    let mut opt = SgdState::new(base_lr, momentum, epochs, model.params().len());
    for epoch in 0..epochs {
        opt.set_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds::rng(stage_seed, &[stream::BATCH_SHUFFLE, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let taped = model.bind(&mut tape, true);
            let views: Vec<&[f64]> = chunk.iter().map(|&i| pool.xs[i].as_slice()).collect();
            let x = batch_input(&mut tape, &views, input_dim);
            let bundle =
                taped.forward(&mut tape, x).map_err(|e| StageError::new("forward", e))?;

            let labels: Vec<usize> = chunk.iter().map(|&i| pool.labels[i]).collect();
            let memory_rows: Vec<usize> = chunk
                .iter()
                .enumerate()
                .filter(|&(_, &i)| pool.is_memory[i])
                .map(|(row, _)| row)
                .collect();
            let bind_teacher = |tape: &mut Tape, t: &Option<TeacherMatrix>| {
                t.as_ref().map(|m| {
                    let data: Vec<f64> =
                        chunk.iter().flat_map(|&i| m.rows[i].iter().copied()).collect();
                    tape.constant(vec![chunk.len(), m.width], data)
                })
            };
            let view = BatchView {
                labels,
                memory_rows,
                teacher_old: bind_teacher(&mut tape, &pool.teacher_old),
                teacher_new: bind_teacher(&mut tape, &pool.teacher_new),
            };

            let loss =
                loss_builder(&mut tape, &bundle, &view).map_err(|e| StageError::new("loss", e))?;
            let grads = tape.backward(loss).map_err(|e| StageError::new("backward", e))?;
            let ids = taped.param_ids().to_vec();
            let mut params = model.params_mut();
            grads.store(&ids, &mut params);
            opt.step(&mut params);
        }
    }
    Ok(())
}

/// Shared task-1 path: plain supervised training of a fresh model on the
/// task's own data, identical across pipelines (same architecture, same
/// seed streams, same epoch budget).
pub(crate) fn initial_task(ctx: &TrainContext, task: &TaskSpec) -> Result<Model, StageError> {
    let cfg = ctx.cfg;
    let mut widths = vec![0usize];
    widths.extend(&cfg.model.hidden);
    widths.push(cfg.model.feature_dim);
    widths[0] = task
        .train
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| StageError::new("initial", "task 1 has no training data"))?;

    let init_seed = seeds::mix(cfg.seed, &[stage_tag::INITIAL]);
    let mut rng = seeds::rng(init_seed, &[stream::MODEL_INIT, 0]);
    let extractor = Extractor::Mlp(Mlp::new(&widths, &mut rng));
    let mut model = Model::initial(extractor, task.classes.clone(), cfg.pipeline.drc, init_seed);

    let pool = current_task_pool(task);
    train_stage(
        &mut model,
        &pool,
        cfg.train.fusion_epochs,
        cfg.train.batch_size,
        cfg.train.base_lr,
        cfg.train.momentum,
        seeds::mix(cfg.seed, &[stage_tag::INITIAL, task.index as u64]),
        |tape, bundle, view| tape.mean_cross_entropy(bundle.fused_all, &view.labels),
    )?;
    Ok(model)
}

// ── Experiment loop ─────────────────────────────────────────────────

pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream, ExperimentError> {
    let dataset = match cfg.dataset.kind {
        DatasetKind::Synthetic => make_synthetic_dataset(
            cfg.synthetic.classes,
            cfg.synthetic.train_per_class,
            cfg.synthetic.test_per_class,
            cfg.synthetic.dim,
            cfg.synthetic.spread,
            cfg.seed,
        ),
        DatasetKind::Csv => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            csv_dataset(
                Path::new(path),
                cfg.dataset.test_path.as_deref().map(Path::new),
                cfg.dataset.feature_count,
                cfg.dataset.scale,
                cfg.dataset.test_fraction,
                cfg.seed,
            )?
        }
    };
    let stream = match cfg.protocol.kind {
        ProtocolChoice::B0 => crate::data::split_b0(&dataset, cfg.protocol.steps, cfg.seed)?,
        ProtocolChoice::B50 => crate::data::split_b50(
            &dataset,
            cfg.protocol.base_classes,
            cfg.protocol.step_size,
            cfg.seed,
        )?,
    };
    Ok(if cfg.longtail.enabled {
        let mode = if cfg.longtail.shuffled { LongTailMode::Shuffled } else { LongTailMode::Ordered };
        apply_longtail(stream, cfg.longtail.factor, mode, cfg.seed)
    } else {
        stream
    })
}

pub fn build_memory(cfg: &RunConfig) -> RehearsalMemory {
    let policy = match cfg.memory.policy {
        MemoryPolicyChoice::FixedTotal => BudgetPolicy::FixedTotal(cfg.memory.budget),
        MemoryPolicyChoice::PerClass => BudgetPolicy::PerClass(cfg.memory.per_class),
        MemoryPolicyChoice::Disabled => BudgetPolicy::Disabled,
    };
    RehearsalMemory::new(policy)
}

/// Runs every task of the stream through the configured pipeline,
/// evaluating on the cumulative test pool after each task and updating the
/// rehearsal memory exactly once per task, after all stages.
pub fn run_experiment(
    stream_spec: &TaskStream,
    cfg: &RunConfig,
) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let pipeline = create(cfg.pipeline.kind);
    let ctx = TrainContext { cfg };
    let mut memory = build_memory(cfg);
    let mut prev: Option<Model> = None;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(stream_spec.tasks.len());
    let run_start = Instant::now();

    for task in &stream_spec.tasks {
        let imbalance = imbalance_ratio(task, &memory);
        let task_start = Instant::now();
        let model = pipeline
            .train_task(&ctx, prev.as_ref(), task, &memory)
            .map_err(|e| ExperimentError::Stage { task: task.index, stage: e.stage, msg: e.msg })?;
        // Herding features come from the freshly trained extractor.
        memory.update(task, |s: &Sample| model.features_vec(&s.features));

        let eval = evaluate(&model, stream_spec, task.index)?;
        steps.push(StepRecord {
            step: task.index,
            seen_classes: stream_spec.seen_classes(task.index),
            accuracy: eval.accuracy,
            per_task: eval.per_task,
            imbalance_ratio: imbalance,
            wall_secs: task_start.elapsed().as_secs_f64(),
        });
        prev = Some(model);
    }

    let avg = steps.iter().map(|s| s.accuracy).sum::<f64>() / steps.len() as f64;
    let last = steps.last().map(|s| s.accuracy).unwrap_or(0.0);
    Ok(ExperimentResult {
        pipeline: pipeline.name().to_string(),
        seed: cfg.seed,
        config: cfg.to_text(),
        manifest: pipeline.manifest(),
        steps,
        avg_accuracy: avg,
        last_accuracy: last,
        wall_secs: run_start.elapsed().as_secs_f64(),
    })
}
