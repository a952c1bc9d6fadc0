//! Adapt-then-fuse pipeline. Stage 1 trains an adaptation model on the new
//! task's data only: inherited extractor, merged frozen branch, a fresh
//! trainable branch starting near the identity, and a single head over the
//! new classes. Stage 2 builds the full model (extractor, branch, and new
//! head taken from the adapted model; old heads inherited from the previous
//! model), then trains on new data plus memory with the weighted sum of the
//! fusion loss, the branch loss, and two-teacher distillation from the
//! previous and the adapted model.

use super::{
    class_prior_for_pool, column_map, current_task_pool, initial_task, joint_pool, stage_tag,
    teacher_probs, Pipeline, StageError, TrainContext,
};
use crate::data::TaskSpec;
use crate::losses::{adaptation_loss, branch_loss, distill_loss, fusion_loss, overall_loss};
use crate::memory::RehearsalMemory;
use crate::model::{
    merge_branches, BranchInit, Classifier, Model, TaskHead, IDENTITY_NOISE_SIGMA,
};
use crate::seeds::{self, stream};

pub struct MafPipeline;

/// Adaptation model for the new task: the classifier covers the new
/// classes only, with both branch paths fused in residual mode.
pub fn build_adaptation_model(
    prev: &Model,
    task: &TaskSpec,
    residual: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Model {
    let d = prev.feature_dim();
    let head = TaskHead::new(d, task.classes.clone(), rng);
    let classifier = if residual {
        let Classifier::Residual { old_branch, new_branch, .. } = &prev.classifier else {
            panic!("residual adaptation from a plain model");
        };
        Classifier::Residual {
            old_branch: Some(merge_branches(old_branch.as_ref(), new_branch)),
            new_branch: crate::model::BranchLayer::identity_noise(d, IDENTITY_NOISE_SIGMA, rng),
            heads: vec![head],
        }
    } else {
        Classifier::Plain { heads: vec![head] }
    };
    Model { extractor: prev.extractor.clone(), classifier }
}

/// Fusion-stage model: extractor, trainable branch and new head come from
/// the adapted model; the frozen branch is the merge of the previous
/// model's branches; old heads are inherited from the previous model.
pub fn build_fusion_model(prev: &Model, adapted: &Model, rng: &mut rand_chacha::ChaCha8Rng) -> Model {
    let adapted_head = adapted.heads().last().expect("adaptation model has a head").clone();
    let branch_init = match &adapted.classifier {
        Classifier::Residual { new_branch, .. } => {
            BranchInit::FromWeights(new_branch.weight.clone())
        }
        // Unused in plain mode; expand_for_task ignores it there.
        Classifier::Plain { .. } => BranchInit::IdentityNoise { sigma: IDENTITY_NOISE_SIGMA },
    };
    let mut model = Model::expand_for_task(
        prev,
        adapted_head.classes.clone(),
        branch_init,
        Some(adapted_head),
        rng,
    );
    model.extractor = adapted.extractor.clone();
    model
}

impl Pipeline for MafPipeline {
    fn name(&self) -> &'static str {
        "maf"
    }

    fn manifest(&self) -> Vec<(String, String)> {
        vec![
            ("maf.fusion_extractor_init".into(), "adapted".into()),
            ("maf.fusion_branch_init".into(), "adapted".into()),
            ("maf.fusion_new_head_init".into(), "adapted".into()),
        ]
    }

    fn train_task(
        &self,
        ctx: &TrainContext,
        prev: Option<&Model>,
        task: &TaskSpec,
        memory: &RehearsalMemory,
    ) -> Result<Model, StageError> {
        let Some(prev_model) = prev else {
            return initial_task(ctx, task);
        };
        let cfg = ctx.cfg;
        let t = task.index as u64;

        // Stage 1: adaptation, strictly on the current task's data.
        let mut adapt_rng = seeds::rng(cfg.seed, &[stream::MODEL_INIT, t, stage_tag::ADAPT]);
        let mut adapted =
            build_adaptation_model(prev_model, task, cfg.pipeline.drc, &mut adapt_rng);
        let adapt_pool = current_task_pool(task);
        debug_assert!(adapt_pool.is_memory.iter().all(|&m| !m), "adaptation saw memory data");
        super::train_stage(
            &mut adapted,
            &adapt_pool,
            cfg.train.adaptation_epochs,
            cfg.train.batch_size,
            cfg.train.base_lr,
            cfg.train.momentum,
            seeds::mix(cfg.seed, &[stage_tag::ADAPT, t]),
            |tape, bundle, view| adaptation_loss(tape, bundle.fused_all, &view.labels),
        )
        .map_err(|e| StageError::new("adaptation", e.msg))?;

        // Stage 2: fusion on new data plus memory, two frozen teachers.
        if memory.is_empty() {
            log::warn!("fusion at task {} with empty rehearsal memory", task.index);
        }
        let mut fusion_rng = seeds::rng(cfg.seed, &[stream::MODEL_INIT, t, stage_tag::FUSION]);
        let mut model = build_fusion_model(prev_model, &adapted, &mut fusion_rng);
        let columns = column_map(&model);
        let mut pool = joint_pool(task, memory, &columns);
        pool.teacher_old = Some(teacher_probs(prev_model, &pool.xs, cfg.loss.temperature)?);
        pool.teacher_new = Some(teacher_probs(&adapted, &pool.xs, cfg.loss.temperature)?);
        let prior = class_prior_for_pool(&model, &pool, cfg.loss.tro, cfg.loss.la_enabled);
        let weights = cfg.loss;

        super::train_stage(
            &mut model,
            &pool,
            cfg.train.fusion_epochs,
            cfg.train.batch_size,
            cfg.train.base_lr,
            cfg.train.momentum,
            seeds::mix(cfg.seed, &[stage_tag::FUSION, t]),
            |tape, bundle, view| {
                let l_fusion = fusion_loss(tape, bundle.fused_all, &view.labels, prior.as_ref())?;
                let l_branch = branch_loss(
                    tape,
                    bundle.branch_all,
                    bundle.primed_old,
                    &view.labels,
                    &view.memory_rows,
                    prior.as_ref(),
                )?;
                let l_distill = distill_loss(
                    tape,
                    bundle.fused_old,
                    view.teacher_old,
                    bundle.fused_new,
                    view.teacher_new.expect("fusion stage binds the adapted teacher"),
                    weights.temperature,
                )?;
                overall_loss(tape, &weights, l_fusion, l_branch, l_distill)
            },
        )
        .map_err(|e| StageError::new("fusion", e.msg))?;
        Ok(model)
    }
}
