//! Training objectives: adaptation CE, the branch and fusion classification
//! losses, two-teacher distillation, the weighted total, and logit
//! adjustment for long-tailed training data.

use crate::tensor::{softmax, Tape, TensorError, TensorId};
use serde::{Deserialize, Serialize};

/// Balancing hyper-parameters of the combined objective plus the logit
/// adjustment knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub tro: f64,
    pub la_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 4.0, temperature: 2.0, tro: 1.2, la_enabled: true }
    }
}

/// Per-logit-column adjustment vector. Classes of task i all share
/// `tro * ln(m_i / sum_j m_j)`, where `m_i` counts task-i samples in the
/// current training pool; every entry is non-positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub gamma: Vec<f64>,
}

impl ClassPrior {
    /// `task_counts[i]` is the number of task-i samples in the pool;
    /// `task_widths[i]` the number of classes of task i. All counts must be
    /// positive (a zero count would send the adjustment to -inf).
    pub fn from_task_counts(task_counts: &[usize], task_widths: &[usize], tro: f64) -> ClassPrior {
        assert_eq!(task_counts.len(), task_widths.len());
        assert!(task_counts.iter().all(|&m| m > 0), "zero task count in logit adjustment");
        let total: usize = task_counts.iter().sum();
        let mut gamma = Vec::with_capacity(task_widths.iter().sum());
        for (&m, &width) in task_counts.iter().zip(task_widths) {
            let g = tro * ((m as f64 / total as f64).ln());
            gamma.extend(std::iter::repeat(g).take(width));
        }
        ClassPrior { gamma }
    }
}

/// Adds the adjustment vector to every logit row. Training-time only;
/// prediction always runs on unadjusted logits.
pub fn logit_adjust(
    tape: &mut Tape,
    logits: TensorId,
    prior: &ClassPrior,
) -> Result<TensorId, TensorError> {
    let gamma = tape.constant(vec![prior.gamma.len()], prior.gamma.clone());
    tape.add_row_bias(logits, gamma)
}

fn maybe_adjust(
    tape: &mut Tape,
    logits: TensorId,
    prior: Option<&ClassPrior>,
) -> Result<TensorId, TensorError> {
    match prior {
        Some(p) => logit_adjust(tape, logits, p),
        None => Ok(logits),
    }
}

/// Mean CE on the adaptation model's fused logits; labels are local to the
/// current task's class list.
pub fn adaptation_loss(
    tape: &mut Tape,
    fused_logits: TensorId,
    local_labels: &[usize],
) -> Result<TensorId, TensorError> {
    tape.mean_cross_entropy(fused_logits, local_labels)
}

/// Mean CE on the fused logits over the whole pool, optionally adjusted.
pub fn fusion_loss(
    tape: &mut Tape,
    fused_all: TensorId,
    labels: &[usize],
    prior: Option<&ClassPrior>,
) -> Result<TensorId, TensorError> {
    let logits = maybe_adjust(tape, fused_all, prior)?;
    tape.mean_cross_entropy(logits, labels)
}

/// Two-term branch objective: mean CE of the new-branch logits over the
/// whole pool, plus mean CE of the frozen-branch old-class logits over the
/// memory rows only. The second term vanishes when the model has no old
/// block or the batch carries no memory samples; adjustment (when enabled)
/// touches the first term only.
pub fn branch_loss(
    tape: &mut Tape,
    branch_all: TensorId,
    primed_old: Option<TensorId>,
    labels: &[usize],
    memory_rows: &[usize],
    prior: Option<&ClassPrior>,
) -> Result<TensorId, TensorError> {
    let adjusted = maybe_adjust(tape, branch_all, prior)?;
    let first = tape.mean_cross_entropy(adjusted, labels)?;
    match primed_old {
        Some(old_block) if !memory_rows.is_empty() => {
            let mem_logits = tape.select_rows(old_block, memory_rows)?;
            let mem_labels: Vec<usize> = memory_rows.iter().map(|&r| labels[r]).collect();
            let second = tape.mean_cross_entropy(mem_logits, &mem_labels)?;
            tape.add(first, second)
        }
        _ => Ok(first),
    }
}

/// Two-teacher distillation: KL of the previous model's probabilities
/// against the fused old block, plus KL of the adapted model's
/// probabilities against the fused new block. Teacher probabilities are
/// pre-softened constants; both student blocks are softened at the same
/// temperature inside the KL.
pub fn distill_loss(
    tape: &mut Tape,
    student_old: Option<TensorId>,
    teacher_old: Option<TensorId>,
    student_new: TensorId,
    teacher_new: TensorId,
    temperature: f64,
) -> Result<TensorId, TensorError> {
    let new_term = tape.mean_kl_div(teacher_new, student_new, temperature)?;
    match (student_old, teacher_old) {
        (Some(s), Some(t)) => {
            let old_term = tape.mean_kl_div(t, s, temperature)?;
            tape.add(old_term, new_term)
        }
        (None, None) => Ok(new_term),
        _ => Err(TensorError::ShapeMismatch(
            "teacher/student old-block pairing mismatch".into(),
        )),
    }
}

/// `(1 - alpha) * fusion + alpha * branch + beta * distill`.
pub fn overall_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    fusion: TensorId,
    branch: TensorId,
    distill: TensorId,
) -> Result<TensorId, TensorError> {
    let f = tape.scale(fusion, 1.0 - weights.alpha);
    let b = tape.scale(branch, weights.alpha);
    let d = tape.scale(distill, weights.beta);
    let fb = tape.add(f, b)?;
    tape.add(fb, d)
}

/// Teacher probabilities softened at the given temperature.
pub fn soften(logits: &[f64], temperature: f64) -> Result<Vec<f64>, TensorError> {
    if temperature <= 0.0 {
        return Err(TensorError::BadTemperature(temperature));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch_input, Extractor, Mlp, Model};
    use crate::optim::SgdState;
    use crate::seeds;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn prior_formula_and_sign() {
        let prior = ClassPrior::from_task_counts(&[900, 100], &[2, 1], 1.0);
        assert_eq!(prior.gamma.len(), 3);
        assert!((prior.gamma[0] - 0.9f64.ln()).abs() < 1e-15);
        assert!((prior.gamma[1] - 0.9f64.ln()).abs() < 1e-15);
        assert!((prior.gamma[2] - 0.1f64.ln()).abs() < 1e-15);
        assert!(prior.gamma.iter().all(|&g| g <= 0.0));
    }

    #[test]
    fn prior_zero_tro_is_zero_vector() {
        let prior = ClassPrior::from_task_counts(&[10, 30], &[1, 2], 0.0);
        assert!(prior.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn equal_counts_shift_softmax_uniformly() {
        // Constant gamma leaves the softmax (hence the CE differences)
        // untouched.
        let prior = ClassPrior::from_task_counts(&[50, 50], &[1, 1], 1.3);
        assert!((prior.gamma[0] - prior.gamma[1]).abs() < 1e-15);
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 2], vec![0.7, -0.2]);
        let adjusted = logit_adjust(&mut tape, logits, &prior).unwrap();
        let p_raw = softmax(tape.value(logits)).unwrap();
        let p_adj = softmax(tape.value(adjusted)).unwrap();
        for (a, b) in p_raw.iter().zip(&p_adj) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_loss_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 6], vec![0.0; 12]);
        let l = fusion_loss(&mut tape, logits, &[3, 1], None).unwrap();
        assert!((tape.scalar(l) - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fusion_loss_tro_zero_matches_unadjusted() {
        let mut rng = seeds::rng(3, &[9]);
        let data: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let prior = ClassPrior::from_task_counts(&[30, 10], &[2, 2], 0.0);
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 4], data);
        let plain = fusion_loss(&mut tape, logits, &[0, 3], None).unwrap();
        let adjusted = fusion_loss(&mut tape, logits, &[0, 3], Some(&prior)).unwrap();
        assert!((tape.scalar(plain) - tape.scalar(adjusted)).abs() <= 1e-12);
    }

    #[test]
    fn branch_loss_decomposes_into_two_ce_means() {
        let mut rng = seeds::rng(5, &[2]);
        let rows = 6;
        let cols = 4;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let old_data: Vec<f64> = (0..rows * 2).map(|_| rng.random::<f64>()).collect();
        let labels = vec![0usize, 1, 2, 3, 0, 1];
        let memory_rows = vec![1usize, 4];

        let mut tape = Tape::new();
        let branch_all = tape.constant(vec![rows, cols], data.clone());
        let primed_old = tape.constant(vec![rows, 2], old_data.clone());
        let loss =
            branch_loss(&mut tape, branch_all, Some(primed_old), &labels, &memory_rows, None)
                .unwrap();

        // Oracle: the two CE means computed independently.
        let mut t2 = Tape::new();
        let b = t2.constant(vec![rows, cols], data);
        let first = t2.mean_cross_entropy(b, &labels).unwrap();
        let mem_data: Vec<f64> = memory_rows
            .iter()
            .flat_map(|&r| old_data[r * 2..(r + 1) * 2].to_vec())
            .collect();
        let m = t2.constant(vec![2, 2], mem_data);
        let second = t2.mean_cross_entropy(m, &[labels[1], labels[4]]).unwrap();
        let expected = t2.scalar(first) + t2.scalar(second);
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn branch_loss_without_memory_reduces_to_first_term() {
        let mut tape = Tape::new();
        let branch_all = tape.constant(vec![2, 3], vec![0.2, 0.1, -0.4, 0.9, 0.0, 0.3]);
        let labels = [1usize, 2];
        let with_old = {
            let primed = tape.constant(vec![2, 2], vec![0.0; 4]);
            branch_loss(&mut tape, branch_all, Some(primed), &labels, &[], None).unwrap()
        };
        let first_only = tape.mean_cross_entropy(branch_all, &labels).unwrap();
        assert!((tape.scalar(with_old) - tape.scalar(first_only)).abs() < 1e-15);
    }

    #[test]
    fn branch_loss_perfect_old_logits_second_term_near_zero() {
        let mut tape = Tape::new();
        let branch_all = tape.constant(vec![2, 3], vec![0.0; 6]);
        // Old block strongly predicts the right label for both memory rows.
        let primed = tape.constant(vec![2, 2], vec![60.0, 0.0, 0.0, 60.0]);
        let labels = [0usize, 1];
        let loss = branch_loss(&mut tape, branch_all, Some(primed), &labels, &[0, 1], None).unwrap();
        let first = tape.mean_cross_entropy(branch_all, &labels).unwrap();
        assert!((tape.scalar(loss) - tape.scalar(first)).abs() < 1e-12);
    }

    #[test]
    fn distill_loss_zero_when_student_matches_teachers() {
        let old_logits = vec![0.4, -0.2, 0.9, 0.3, 0.1, -0.5];
        let new_logits = vec![1.0, -1.0, 0.2, 0.4];
        let temp = 2.0;
        let mut tape = Tape::new();
        let s_old = tape.constant(vec![2, 3], old_logits.clone());
        let s_new = tape.constant(vec![2, 2], new_logits.clone());
        let t_old_probs: Vec<f64> = old_logits
            .chunks(3)
            .flat_map(|r| soften(r, temp).unwrap())
            .collect();
        let t_new_probs: Vec<f64> = new_logits
            .chunks(2)
            .flat_map(|r| soften(r, temp).unwrap())
            .collect();
        let t_old = tape.constant(vec![2, 3], t_old_probs);
        let t_new = tape.constant(vec![2, 2], t_new_probs);
        let loss = distill_loss(&mut tape, Some(s_old), Some(t_old), s_new, t_new, temp).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn distill_loss_matches_double_summation_oracle() {
        let mut rng = seeds::rng(7, &[4]);
        for _ in 0..10 {
            let temp = 1.5;
            let s_old_logits: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0).collect();
            let s_new_logits: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0).collect();
            let t_old_raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0).collect();
            let t_new_raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0).collect();
            let p_old = soften(&t_old_raw, temp).unwrap();
            let p_new = soften(&t_new_raw, temp).unwrap();

            // Direct double summation over both KL terms.
            let q_old = soften(&s_old_logits, temp).unwrap();
            let q_new = soften(&s_new_logits, temp).unwrap();
            let expected: f64 = p_old
                .iter()
                .zip(&q_old)
                .map(|(p, q)| p * (p.ln() - q.ln()))
                .sum::<f64>()
                + p_new.iter().zip(&q_new).map(|(p, q)| p * (p.ln() - q.ln())).sum::<f64>();

            let mut tape = Tape::new();
            let s_old = tape.constant(vec![1, 3], s_old_logits);
            let s_new = tape.constant(vec![1, 3], s_new_logits);
            let t_old = tape.constant(vec![1, 3], p_old);
            let t_new = tape.constant(vec![1, 3], p_new);
            let loss =
                distill_loss(&mut tape, Some(s_old), Some(t_old), s_new, t_new, temp).unwrap();
            assert!((tape.scalar(loss) - expected).abs() < 1e-10);
            assert!(tape.scalar(loss) >= -1e-12);
        }
    }

    #[test]
    fn distill_gradients_reach_student_only() {
        let mut tape = Tape::new();
        let student_param = Tensor::matrix(1, 3, vec![0.2, -0.1, 0.4]).param();
        let s_new = tape.leaf(&student_param);
        let teacher_probs = soften(&[1.0, 0.0, -1.0], 2.0).unwrap();
        let t_new = tape.constant(vec![1, 3], teacher_probs);
        let loss = distill_loss(&mut tape, None, None, s_new, t_new, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(s_new).is_some());
        assert!(grads.get(t_new).is_none());
    }

    #[test]
    fn overall_loss_endpoints_and_arithmetic() {
        let eval = |alpha: f64, beta: f64| -> f64 {
            let w = LossWeights { alpha, beta, ..LossWeights::default() };
            let mut tape = Tape::new();
            let f = tape.constant(vec![1], vec![1.0]);
            let b = tape.constant(vec![1], vec![2.0]);
            let d = tape.constant(vec![1], vec![0.5]);
            let l = overall_loss(&mut tape, &w, f, b, d).unwrap();
            tape.scalar(l)
        };
        assert!((eval(0.0, 4.0) - (1.0 + 2.0)).abs() < 1e-12);
        assert!((eval(1.0, 4.0) - (2.0 + 2.0)).abs() < 1e-12);
        assert!((eval(0.2, 4.0) - 3.2).abs() < 1e-12);
        assert!((eval(0.2, 0.0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn adaptation_loss_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 4], vec![0.0; 4]);
        let l = adaptation_loss(&mut tape, logits, &[2]).unwrap();
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adaptation_loss_drives_to_zero_on_separable_task() {
        // Two well-separated blobs, a task-1 model, a few dozen epochs.
        let samples = crate::data::make_synthetic_gaussians(2, 20, 4, 0.05, 31);
        let mut rng = seeds::rng(31, &[8]);
        let extractor = Extractor::Mlp(Mlp::new(&[4, 8, 4], &mut rng));
        let mut model = Model::initial(extractor, vec![0, 1], true, 31);
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let xs: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();

        let mut opt = SgdState::new(0.1, 0.9, 60, model.params().len());
        let mut last = f64::INFINITY;
        for epoch in 0..60 {
            opt.set_epoch(epoch);
            let mut tape = Tape::new();
            let taped = model.bind(&mut tape, true);
            let x = batch_input(&mut tape, &xs, 4);
            let bundle = taped.forward(&mut tape, x).unwrap();
            let loss = adaptation_loss(&mut tape, bundle.fused_all, &labels).unwrap();
            last = tape.scalar(loss);
            let grads = tape.backward(loss).unwrap();
            let ids = taped.param_ids().to_vec();
            let mut params = model.params_mut();
            grads.store(&ids, &mut params);
            opt.step(&mut params);
        }
        assert!(last < 0.05, "adaptation loss stayed at {last}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Overall loss through a small residual model, one weight probed.
        let mut rng = seeds::rng(41, &[6]);
        let extractor = Extractor::Mlp(Mlp::new(&[3, 4], &mut rng));
        let first = Model::initial(extractor, vec![0, 1], true, 41);
        let model = Model::expand_for_task(
            &first,
            vec![2],
            crate::model::BranchInit::IdentityNoise { sigma: 0.2 },
            None,
            &mut rng,
        );
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let labels = vec![0usize, 1, 2, 2, 0];
        let memory_rows = vec![0usize, 1];
        let weights = LossWeights::default();
        let prior = ClassPrior::from_task_counts(&[40, 60], &[2, 1], weights.tro);
        let teacher_old: Vec<f64> = (0..5).flat_map(|_| soften(&[0.3, -0.3], 2.0).unwrap()).collect();
        let teacher_new: Vec<f64> = (0..5).flat_map(|_| soften(&[0.5], 2.0).unwrap()).collect();

        let eval = |m: &Model, train: bool| -> (f64, Option<(Vec<crate::tensor::TensorId>, crate::tensor::Grads)>) {
            let mut tape = Tape::new();
            let taped = m.bind(&mut tape, train);
            let views: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let x = batch_input(&mut tape, &views, 3);
            let bundle = taped.forward(&mut tape, x).unwrap();
            let l_fusion = fusion_loss(&mut tape, bundle.fused_all, &labels, Some(&prior)).unwrap();
            let l_branch = branch_loss(
                &mut tape,
                bundle.branch_all,
                bundle.primed_old,
                &labels,
                &memory_rows,
                Some(&prior),
            )
            .unwrap();
            let t_old = tape.constant(vec![5, 2], teacher_old.clone());
            let t_new = tape.constant(vec![5, 1], teacher_new.clone());
            let l_distill = distill_loss(
                &mut tape,
                bundle.fused_old,
                Some(t_old),
                bundle.fused_new,
                t_new,
                weights.temperature,
            )
            .unwrap();
            let total = overall_loss(&mut tape, &weights, l_fusion, l_branch, l_distill).unwrap();
            let v = tape.scalar(total);
            if train {
                let ids = taped.param_ids().to_vec();
                let grads = tape.backward(total).unwrap();
                (v, Some((ids, grads)))
            } else {
                (v, None)
            }
        };

        let (_, Some((ids, grads))) = eval(&model, true) else { unreachable!() };
        let eps = 1e-5;
        let mut probe = model.clone();
        // Probe a handful of parameters across extractor, branch and heads.
        let param_count = probe.params().len();
        for p_idx in 0..param_count {
            if !probe.params()[p_idx].requires_grad {
                assert!(grads.get(ids[p_idx]).is_none());
                continue;
            }
            let n = probe.params()[p_idx].data.len();
            for i in [0, n / 2] {
                let orig = probe.params()[p_idx].data[i];
                probe.params_mut()[p_idx].data[i] = orig + eps;
                let hi = eval(&probe, false).0;
                probe.params_mut()[p_idx].data[i] = orig - eps;
                let lo = eval(&probe, false).0;
                probe.params_mut()[p_idx].data[i] = orig;
                let numeric = (hi - lo) / (2.0 * eps);
                let analytic = grads.get(ids[p_idx]).unwrap()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-4, "param {p_idx}[{i}]: {analytic} vs {numeric}");
            }
        }
    }
}
