//! Expand-then-compress pipeline. Stage 1 freezes the previous extractor,
//! adds a trainable copy, and trains a classifier over the concatenated 2d
//! features. The old knowledge is embedded exactly: the frozen 2d branch is
//! block-diagonal (merged previous branch over the frozen features,
//! identity over the new ones) and inherited head weights are zero-padded,
//! so the old-path logits at stage start reproduce the previous model's
//! merged-branch logits. Stage 2 distills the expanded model's fused
//! logits into a width-d model warm-started from the previous task's model.

use super::{
    class_prior_for_pool, column_map, initial_task, joint_pool, stage_tag, teacher_probs,
    Pipeline, StageError, TrainContext,
};
use crate::data::TaskSpec;
use crate::losses::fusion_loss;
use crate::memory::RehearsalMemory;
use crate::model::{
    merge_branches, BranchInit, BranchLayer, Classifier, Extractor, Model, TaskHead,
    IDENTITY_NOISE_SIGMA,
};
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

pub struct MecPipeline;

/// `[[w, 0], [0, I]]` over the concatenated feature space.
fn block_diag_with_identity(w: &Tensor, d: usize) -> Tensor {
    assert_eq!(w.shape, vec![d, d]);
    let size = 2 * d;
    let mut data = vec![0.0; size * size];
    for r in 0..d {
        for c in 0..d {
            data[r * size + c] = w.data[r * d + c];
        }
    }
    for i in d..size {
        data[i * size + i] = 1.0;
    }
    Tensor::matrix(size, size, data)
}

/// Zero-pads a head weight from d to 2d input rows; the padded rows meet
/// the new features, the original rows keep acting on the frozen ones.
fn embed_head(head: &TaskHead, d: usize) -> TaskHead {
    let width = head.width();
    let mut data = vec![0.0; 2 * d * width];
    data[..d * width].copy_from_slice(&head.weight.data);
    TaskHead::from_parts(
        Tensor::matrix(2 * d, width, data),
        head.bias.clone(),
        head.classes.clone(),
    )
}

/// Expanded model for stage 1: frozen previous extractor alongside a
/// trainable copy, classifier lifted into the 2d feature space.
pub fn build_expanded_model(
    prev: &Model,
    task: &TaskSpec,
    residual: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Model, StageError> {
    let Extractor::Mlp(prev_mlp) = &prev.extractor else {
        return Err(StageError::new("expansion", "previous extractor already expanded"));
    };
    let d = prev_mlp.output_dim();
    let mut frozen = prev_mlp.clone();
    frozen.set_trainable(false);
    let mut trainable = prev_mlp.clone();
    trainable.set_trainable(true);
    let extractor = Extractor::Concat { frozen, trainable };

    let old_heads: Vec<TaskHead> = prev.heads().iter().map(|h| embed_head(h, d)).collect();
    let classifier = if residual {
        let Classifier::Residual { old_branch, new_branch, .. } = &prev.classifier else {
            return Err(StageError::new("expansion", "residual expansion from a plain model"));
        };
        let merged = merge_branches(old_branch.as_ref(), new_branch);
        let lifted_old =
            BranchLayer::from_weight(block_diag_with_identity(&merged.weight, d), true);
        let mut heads = old_heads;
        heads.push(TaskHead::new(2 * d, task.classes.clone(), rng));
        Classifier::Residual {
            old_branch: Some(lifted_old),
            new_branch: BranchLayer::identity_noise(2 * d, IDENTITY_NOISE_SIGMA, rng),
            heads,
        }
    } else {
        let mut heads = old_heads;
        heads.push(TaskHead::new(2 * d, task.classes.clone(), rng));
        Classifier::Plain { heads }
    };
    Ok(Model { extractor, classifier })
}

impl Pipeline for MecPipeline {
    fn name(&self) -> &'static str {
        "mec"
    }

    fn manifest(&self) -> Vec<(String, String)> {
        vec![
            ("mec.expansion_new_extractor_init".into(), "previous".into()),
            ("mec.compression_student_init".into(), "previous".into()),
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

        // Stage 1: train the expanded model on new data plus memory.
        let mut expand_rng =
            seeds::rng(cfg.seed, &[stream::MODEL_INIT, t, stage_tag::MEC_EXPAND]);
        let mut expanded =
            build_expanded_model(prev_model, task, cfg.pipeline.drc, &mut expand_rng)?;
        let columns = column_map(&expanded);
        let pool = joint_pool(task, memory, &columns);
        let prior = class_prior_for_pool(&expanded, &pool, cfg.loss.tro, cfg.loss.la_enabled);
        super::train_stage(
            &mut expanded,
            &pool,
            cfg.train.fusion_epochs,
            cfg.train.batch_size,
            cfg.train.base_lr,
            cfg.train.momentum,
            seeds::mix(cfg.seed, &[stage_tag::MEC_EXPAND, t]),
            |tape, bundle, view| fusion_loss(tape, bundle.fused_all, &view.labels, prior.as_ref()),
        )
        .map_err(|e| StageError::new("expansion", e.msg))?;

        // Stage 2: distill the expanded model into a width-d student.
        let mut compress_rng =
            seeds::rng(cfg.seed, &[stream::MODEL_INIT, t, stage_tag::MEC_COMPRESS]);
        let mut student = Model::expand_for_task(
            prev_model,
            task.classes.clone(),
            BranchInit::IdentityNoise { sigma: IDENTITY_NOISE_SIGMA },
            None,
            &mut compress_rng,
        );
        let student_columns = column_map(&student);
        let mut pool = joint_pool(task, memory, &student_columns);
        pool.teacher_old = Some(teacher_probs(&expanded, &pool.xs, cfg.loss.temperature)?);
        let prior = class_prior_for_pool(&student, &pool, cfg.loss.tro, cfg.loss.la_enabled);
        let beta = cfg.loss.beta;
        let temperature = cfg.loss.temperature;
        super::train_stage(
            &mut student,
            &pool,
            cfg.train.fusion_epochs,
            cfg.train.batch_size,
            cfg.train.base_lr,
            cfg.train.momentum,
            seeds::mix(cfg.seed, &[stage_tag::MEC_COMPRESS, t]),
            |tape, bundle, view| {
                let ce = fusion_loss(tape, bundle.fused_all, &view.labels, prior.as_ref())?;
                let teacher = view.teacher_old.expect("compression binds the expanded teacher");
                let kl = tape.mean_kl_div(teacher, bundle.fused_all, temperature)?;
                let weighted = tape.scale(kl, beta);
                tape.add(ce, weighted)
            },
        )
        .map_err(|e| StageError::new("compression", e.msg))?;
        Ok(student)
    }
}
