//! Built-in invariant suite behind `cil selftest`: branch-merge
//! consistency, gradient checks against finite differences, memory budget
//! bookkeeping, the cosine schedule, and softmax basics.

use crate::data::{Sample, TaskSpec};
use crate::losses::{distill_loss, soften};
use crate::memory::{BudgetPolicy, RehearsalMemory};
use crate::model::{batch_input, BranchInit, Extractor, Mlp, Model};
use crate::optim::cosine_lr;
use crate::seeds::{self, stream};
use crate::tensor::{softmax, Tape, Tensor};
use rand::Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Random residual model with `tasks` heads; trainable parts are jittered
/// so inherited weights are not degenerate.
fn random_chain(d: usize, tasks: usize, classes_per_task: usize, seed: u64) -> Model {
    let mut rng = seeds::rng(seed, &[stream::MODEL_INIT, 99]);
    let extractor = Extractor::Mlp(Mlp::new(&[d, d], &mut rng));
    let mut model = Model::initial(extractor, (0..classes_per_task).collect(), true, seed);
    for t in 1..tasks {
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        model = Model::expand_for_task(
            &model,
            classes,
            BranchInit::Gaussian { sigma: 0.5 },
            None,
            &mut rng,
        );
        for p in model.params_mut() {
            if p.requires_grad {
                for v in p.data.iter_mut() {
                    *v += 0.05 * (rng.random::<f64>() - 0.5);
                }
            }
        }
    }
    model
}

/// Max absolute gap between the previous model's fused logits and the
/// merged branch's old-head logits after expansion.
pub fn merge_consistency_gap(d: usize, tasks: usize, seed: u64) -> f64 {
    let prev = random_chain(d, tasks, 2, seed);
    let mut rng = seeds::rng(seed, &[stream::MODEL_INIT, 100]);
    let next = Model::expand_for_task(
        &prev,
        vec![tasks * 2],
        BranchInit::Gaussian { sigma: 0.7 },
        None,
        &mut rng,
    );
    let xs: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let views: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let prev_fused = prev.fused_logits_values(&views).expect("forward");

    let mut tape = Tape::new();
    let taped = next.bind(&mut tape, false);
    let x = batch_input(&mut tape, &views, d);
    let bundle = taped.forward(&mut tape, x).expect("forward");
    let primed = tape.value(bundle.primed_old.expect("expanded model has an old block"));
    let width = prev.seen_class_count();
    let mut gap = 0.0f64;
    for (r, row) in prev_fused.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            gap = gap.max((v - primed[r * width + c]).abs());
        }
    }
    gap
}

fn merge_consistency_check() -> CheckResult {
    let mut worst = 0.0f64;
    for (i, &d) in [4usize, 8, 16].iter().enumerate() {
        for tasks in 1..=4 {
            worst = worst.max(merge_consistency_gap(d, tasks, 1000 + (i * 10 + tasks) as u64));
        }
    }
    check(
        "merge-consistency",
        worst <= 1e-10,
        format!("max |fused_prev - merged_branch| = {worst:.3e}"),
    )
}

fn gradient_check() -> CheckResult {
    let mut rng = seeds::rng(7, &[stream::MODEL_INIT, 3]);
    let extractor = Extractor::Mlp(Mlp::new(&[4, 5], &mut rng));
    let first = Model::initial(extractor, vec![0, 1], true, 7);
    let model = Model::expand_for_task(
        &first,
        vec![2, 3],
        BranchInit::IdentityNoise { sigma: 0.2 },
        None,
        &mut rng,
    );
    let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let labels = vec![0usize, 1, 2, 3, 0, 2];
    let teacher_old: Vec<f64> = (0..6).flat_map(|_| soften(&[0.2, -0.2], 2.0).unwrap()).collect();
    let teacher_new: Vec<f64> = (0..6).flat_map(|_| soften(&[0.1, 0.4], 2.0).unwrap()).collect();

    let eval = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let taped = m.bind(&mut tape, false);
        let views: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let x = batch_input(&mut tape, &views, 4);
        let bundle = taped.forward(&mut tape, x).unwrap();
        let ce = tape.mean_cross_entropy(bundle.fused_all, &labels).unwrap();
        let t_old = tape.constant(vec![6, 2], teacher_old.clone());
        let t_new = tape.constant(vec![6, 2], teacher_new.clone());
        let kd = distill_loss(&mut tape, bundle.fused_old, Some(t_old), bundle.fused_new, t_new, 2.0)
            .unwrap();
        let kd4 = tape.scale(kd, 4.0);
        let total = tape.add(ce, kd4).unwrap();
        tape.scalar(total)
    };

    let (ids, grads) = {
        let mut tape = Tape::new();
        let taped = model.bind(&mut tape, true);
        let views: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let x = batch_input(&mut tape, &views, 4);
        let bundle = taped.forward(&mut tape, x).unwrap();
        let ce = tape.mean_cross_entropy(bundle.fused_all, &labels).unwrap();
        let t_old = tape.constant(vec![6, 2], teacher_old.clone());
        let t_new = tape.constant(vec![6, 2], teacher_new.clone());
        let kd = distill_loss(&mut tape, bundle.fused_old, Some(t_old), bundle.fused_new, t_new, 2.0)
            .unwrap();
        let kd4 = tape.scale(kd, 4.0);
        let total = tape.add(ce, kd4).unwrap();
        let grads = tape.backward(total).unwrap();
        (taped.param_ids().to_vec(), grads)
    };

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let eps = 1e-5;
    let n_params = probe.params().len();
    for p in 0..n_params {
        if !probe.params()[p].requires_grad {
            continue;
        }
        let len = probe.params()[p].data.len();
        for i in [0, len - 1] {
            let orig = probe.params()[p].data[i];
            probe.params_mut()[p].data[i] = orig + eps;
            let hi = eval(&probe);
            probe.params_mut()[p].data[i] = orig - eps;
            let lo = eval(&probe);
            probe.params_mut()[p].data[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let analytic = grads.get(ids[p]).map(|g| g[i]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    check("gradient-finite-difference", worst < 1e-4, format!("max relative error = {worst:.3e}"))
}

fn memory_budget_check() -> CheckResult {
    let budget = 103;
    let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(budget));
    let mut rng = seeds::rng(11, &[stream::MODEL_INIT, 5]);
    let mut ok = true;
    let mut detail = String::new();
    for t in 1..=10 {
        let classes: Vec<usize> = ((t - 1) * 2..t * 2).collect();
        let mut train = Vec::new();
        for &c in &classes {
            for _ in 0..20 {
                train.push(Sample {
                    features: (0..3).map(|_| rng.random::<f64>()).collect(),
                    label: c,
                });
            }
        }
        let task = TaskSpec { index: t, classes, train, test: vec![] };
        mem.update(&task, |s| s.features.clone());
        let counts = mem.counts_per_class();
        let spread = counts.values().max().unwrap() - counts.values().min().unwrap();
        if mem.len() > budget || spread > 1 {
            ok = false;
            detail = format!("task {t}: total {} spread {spread}", mem.len());
            break;
        }
    }
    if ok {
        detail = format!("10 tasks, total stayed <= {budget}, per-class spread <= 1");
    }
    check("memory-budget", ok, detail)
}

fn cosine_schedule_check() -> CheckResult {
    let total = 70;
    let start_ok = (cosine_lr(0.1, 0, total) - 0.1).abs() < 1e-15;
    let end_ok = cosine_lr(0.1, total, total) <= 1e-8;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for e in 0..=total {
        let lr = cosine_lr(0.1, e, total);
        if lr > prev + 1e-15 {
            monotone = false;
        }
        prev = lr;
    }
    check(
        "cosine-schedule",
        start_ok && end_ok && monotone,
        format!("lr(0)={}, lr(T)={:.2e}", cosine_lr(0.1, 0, total), cosine_lr(0.1, total, total)),
    )
}

fn softmax_check() -> CheckResult {
    let mut rng = seeds::rng(13, &[stream::MODEL_INIT, 6]);
    let mut ok = true;
    for _ in 0..50 {
        let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let p = softmax(&x).unwrap();
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 || p.iter().any(|&v| v <= 0.0) {
            ok = false;
        }
    }
    let stable = softmax(&[1000.0, 0.0]).map(|p| p[0].is_finite()).unwrap_or(false);
    check("softmax", ok && stable, "sum=1 within 1e-12, overflow-safe".into())
}

fn frozen_invariance_check() -> CheckResult {
    let mut model = random_chain(4, 2, 2, 77);
    let before: Vec<Vec<u64>> = model
        .params()
        .iter()
        .filter(|p| !p.requires_grad)
        .map(|p| p.data.iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut rng = seeds::rng(77, &[stream::MODEL_INIT, 7]);
    let mut opt = crate::optim::SgdState::new(0.1, 0.9, 5, model.params().len());
    for _ in 0..5 {
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        let taped = model.bind(&mut tape, true);
        let xin = batch_input(&mut tape, &[&x], 4);
        let bundle = taped.forward(&mut tape, xin).unwrap();
        let loss = tape.mean_cross_entropy(bundle.fused_all, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ids = taped.param_ids().to_vec();
        let mut params = model.params_mut();
        grads.store(&ids, &mut params);
        opt.step(&mut params);
    }
    let after: Vec<Vec<u64>> = model
        .params()
        .iter()
        .filter(|p| !p.requires_grad)
        .map(|p| p.data.iter().map(|v| v.to_bits()).collect())
        .collect();
    check(
        "frozen-invariance",
        before == after,
        "frozen weights bit-identical after optimizer steps".into(),
    )
}

/// Runs every invariant suite; all must pass on a healthy build.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        merge_consistency_check(),
        gradient_check(),
        memory_budget_check(),
        cosine_schedule_check(),
        softmax_check(),
        frozen_invariance_check(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selftests_pass_on_a_fresh_build() {
        for result in run_all() {
            assert!(result.passed, "{} failed: {}", result.name, result.detail);
        }
    }
}
