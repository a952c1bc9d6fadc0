//! Direct-transfer pipeline: a single stage per task that finetunes the
//! previous model on new data plus rehearsal memory, with score-level
//! distillation from the frozen previous model on the old-class logit
//! block. In residual mode the merged frozen branch is installed and the
//! new branch starts from a random Gaussian.

use super::{
    class_prior_for_pool, column_map, initial_task, joint_pool, stage_tag, teacher_probs,
    Pipeline, StageError, TrainContext,
};
use crate::data::TaskSpec;
use crate::losses::fusion_loss;
use crate::memory::RehearsalMemory;
use crate::model::{BranchInit, Model};
use crate::seeds::{self, stream};

pub struct MdtPipeline;

impl Pipeline for MdtPipeline {
    fn name(&self) -> &'static str {
        "mdt"
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
        let d = prev_model.feature_dim();
        let mut rng =
            seeds::rng(cfg.seed, &[stream::MODEL_INIT, task.index as u64, stage_tag::MDT]);
        let branch_init = BranchInit::Gaussian { sigma: (1.0 / d as f64).sqrt() };
        let mut model =
            Model::expand_for_task(prev_model, task.classes.clone(), branch_init, None, &mut rng);

        let columns = column_map(&model);
        let mut pool = joint_pool(task, memory, &columns);
        let beta = cfg.loss.beta;
        if beta > 0.0 {
            pool.teacher_old = Some(teacher_probs(prev_model, &pool.xs, cfg.loss.temperature)?);
        }
        let prior = class_prior_for_pool(&model, &pool, cfg.loss.tro, cfg.loss.la_enabled);
        let temperature = cfg.loss.temperature;

        super::train_stage(
            &mut model,
            &pool,
            cfg.train.fusion_epochs,
            cfg.train.batch_size,
            cfg.train.base_lr,
            cfg.train.momentum,
            seeds::mix(cfg.seed, &[stage_tag::MDT, task.index as u64]),
            |tape, bundle, view| {
                let ce = fusion_loss(tape, bundle.fused_all, &view.labels, prior.as_ref())?;
                match (view.teacher_old, bundle.fused_old) {
                    (Some(teacher), Some(student_old)) => {
                        let kl = tape.mean_kl_div(teacher, student_old, temperature)?;
                        let weighted = tape.scale(kl, beta);
                        tape.add(ce, weighted)
                    }
                    _ => Ok(ce),
                }
            },
        )?;
        Ok(model)
    }
}
