//! Fixed-budget rehearsal buffer with herding exemplar selection.
//!
//! Exemplars per class are stored in herding order, so shrinking a class to
//! a smaller quota is a prefix truncation. Under the fixed-total policy the
//! per-class quota drops as new classes arrive, which is exactly the
//! dynamic-imbalance behaviour the training pipelines have to cope with.

use crate::data::{save_csv_samples, Sample, TaskSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BudgetPolicy {
    /// Total budget shared equally by all stored classes.
    FixedTotal(usize),
    /// Constant number of exemplars per class.
    PerClass(usize),
    /// Rehearsal disabled; the buffer stays empty.
    Disabled,
}

/// Exemplar store `M_t`. Updated once per task, after training finishes.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalMemory {
    policy: BudgetPolicy,
    store: BTreeMap<usize, Vec<Sample>>,
    insertion_step: BTreeMap<usize, usize>,
}

impl RehearsalMemory {
    pub fn new(policy: BudgetPolicy) -> Self {
        RehearsalMemory { policy, store: BTreeMap::new(), insertion_step: BTreeMap::new() }
    }

    pub fn policy(&self) -> BudgetPolicy {
        self.policy
    }

    pub fn is_empty(&self) -> bool {
        self.store.values().all(|v| v.is_empty())
    }

    pub fn len(&self) -> usize {
        self.store.values().map(|v| v.len()).sum()
    }

    pub fn class_count(&self) -> usize {
        self.store.len()
    }

    pub fn count_for_class(&self, class: usize) -> usize {
        self.store.get(&class).map_or(0, |v| v.len())
    }

    pub fn counts_per_class(&self) -> BTreeMap<usize, usize> {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Task index that inserted a class.
    pub fn insertion_step(&self, class: usize) -> Option<usize> {
        self.insertion_step.get(&class).copied()
    }

    /// All stored exemplars, classes in ascending order.
    pub fn samples(&self) -> Vec<&Sample> {
        self.store.values().flat_map(|v| v.iter()).collect()
    }

    /// Inserts the finished task's classes and rebalances old ones.
    pub fn update<F>(&mut self, task: &TaskSpec, feature_fn: F)
    where
        F: Fn(&Sample) -> Vec<f64>,
    {
        for &c in &task.classes {
            assert!(
                !self.store.contains_key(&c),
                "class {c} already present in rehearsal memory"
            );
        }
        match self.policy {
            BudgetPolicy::Disabled => {}
            BudgetPolicy::PerClass(m) => {
                for &c in &task.classes {
                    let of_class: Vec<Sample> =
                        task.train.iter().filter(|s| s.label == c).cloned().collect();
                    let picked = select_exemplars(&of_class, m, &feature_fn);
                    self.store.insert(c, picked);
                    self.insertion_step.insert(c, task.index);
                }
            }
            BudgetPolicy::FixedTotal(budget) => {
                let total_classes = self.store.len() + task.classes.len();
                let quotas = self.quotas_for(budget, total_classes, task);
                // Old classes shrink by truncating their herding order.
                for (class, list) in self.store.iter_mut() {
                    list.truncate(quotas[class]);
                }
                for &c in &task.classes {
                    let of_class: Vec<Sample> =
                        task.train.iter().filter(|s| s.label == c).cloned().collect();
                    let picked = select_exemplars(&of_class, quotas[&c], &feature_fn);
                    self.store.insert(c, picked);
                    self.insertion_step.insert(c, task.index);
                }
            }
        }
    }

    /// Equal share of the budget; the remainder goes to the earliest
    /// inserted classes (ties broken by class index).
    fn quotas_for(
        &self,
        budget: usize,
        total_classes: usize,
        new_task: &TaskSpec,
    ) -> BTreeMap<usize, usize> {
        let base = budget / total_classes;
        let remainder = budget % total_classes;
        let mut order: Vec<(usize, usize)> = self
            .insertion_step
            .iter()
            .map(|(&c, &step)| (step, c))
            .collect();
        order.extend(new_task.classes.iter().map(|&c| (new_task.index, c)));
        order.sort_unstable();
        order
            .into_iter()
            .enumerate()
            .map(|(i, (_, c))| (c, if i < remainder { base + 1 } else { base }))
            .collect()
    }

    /// Writes the stored exemplars in the dataset CSV schema.
    pub fn save_csv(&self, path: &Path) -> Result<(), crate::data::DataError> {
        let samples: Vec<Sample> = self.samples().into_iter().cloned().collect();
        save_csv_samples(path, &samples)
    }
}

/// Greedy herding order: each pick minimizes the distance between the
/// running exemplar mean and the true class mean in feature space. The
/// returned list is ordered, so any prefix is itself a valid selection.
pub fn select_exemplars<F>(samples: &[Sample], k: usize, feature_fn: F) -> Vec<Sample>
where
    F: Fn(&Sample) -> Vec<f64>,
{
    if k == 0 || samples.is_empty() {
        if k > 0 {
            log::warn!("herding asked for {k} exemplars from an empty class");
        }
        return Vec::new();
    }
    if k > samples.len() {
        log::warn!(
            "herding asked for {k} exemplars but only {} available; taking all",
            samples.len()
        );
    }
    let features: Vec<Vec<f64>> = samples.iter().map(&feature_fn).collect();
    let order = herding_order(&features);
    order.into_iter().take(k).map(|i| samples[i].clone()).collect()
}

/// Full greedy order over all samples. Ties resolve to the lowest index.
pub fn herding_order(features: &[Vec<f64>]) -> Vec<usize> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut selected_sum = vec![0.0; dim];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    for step in 1..=n {
        let mut best_pos = 0;
        let mut best_dist = f64::INFINITY;
        for (pos, &idx) in remaining.iter().enumerate() {
            let mut dist = 0.0;
            for d in 0..dim {
                let candidate = (selected_sum[d] + features[idx][d]) / step as f64;
                let diff = mean[d] - candidate;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best_pos = pos;
            }
        }
        let idx = remaining.remove(best_pos);
        for d in 0..dim {
            selected_sum[d] += features[idx][d];
        }
        order.push(idx);
    }
    order
}

/// Mean per-class train count of the incoming task over the mean per-class
/// count already in memory. `None` when memory is empty.
pub fn imbalance_ratio(task: &TaskSpec, memory: &RehearsalMemory) -> Option<f64> {
    if memory.is_empty() {
        return None;
    }
    let new_counts = task.train_count_per_class();
    let new_mean = new_counts.values().sum::<usize>() as f64 / new_counts.len() as f64;
    let mem_counts = memory.counts_per_class();
    let mem_mean = mem_counts.values().sum::<usize>() as f64 / mem_counts.len() as f64;
    Some(new_mean / mem_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use crate::data::split_b0;
    use rand::Rng;

    fn identity_features(s: &Sample) -> Vec<f64> {
        s.features.clone()
    }

    fn task(index: usize, classes: Vec<usize>, per_class: usize, dim: usize) -> TaskSpec {
        let mut rng = crate::seeds::rng(index as u64, &[42]);
        let mut train = Vec::new();
        for &c in &classes {
            for _ in 0..per_class {
                train.push(Sample {
                    features: (0..dim).map(|_| rng.random::<f64>()).collect(),
                    label: c,
                });
            }
        }
        TaskSpec { index, classes, train, test: Vec::new() }
    }

    #[test]
    fn select_zero_is_empty() {
        let t = task(1, vec![0], 5, 3);
        assert!(select_exemplars(&t.train, 0, identity_features).is_empty());
    }

    #[test]
    fn select_identical_samples_keeps_zero_distance() {
        let samples: Vec<Sample> =
            (0..4).map(|_| Sample { features: vec![1.0, 2.0], label: 0 }).collect();
        let picked = select_exemplars(&samples, 3, identity_features);
        assert_eq!(picked.len(), 3);
        for p in &picked {
            assert_eq!(p.features, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn select_more_than_available_takes_all() {
        let t = task(1, vec![0], 3, 2);
        let picked = select_exemplars(&t.train, 10, identity_features);
        assert_eq!(picked.len(), 3);
    }

    // Brute-force greedy oracle: recompute the argmin from the definition at
    // every step, without the running-sum shortcut.
    fn brute_force_herding(features: &[Vec<f64>]) -> Vec<usize> {
        let n = features.len();
        let dim = features[0].len();
        let mean: Vec<f64> = (0..dim)
            .map(|d| features.iter().map(|f| f[d]).sum::<f64>() / n as f64)
            .collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < n {
            let mut best: Option<(usize, f64)> = None;
            for cand in 0..n {
                if chosen.contains(&cand) {
                    continue;
                }
                let k = chosen.len() + 1;
                let running: Vec<f64> = (0..dim)
                    .map(|d| {
                        let s: f64 =
                            chosen.iter().map(|&i| features[i][d]).sum::<f64>() + features[cand][d];
                        s / k as f64
                    })
                    .collect();
                let dist: f64 =
                    mean.iter().zip(&running).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none() || dist < best.unwrap().1 {
                    best = Some((cand, dist));
                }
            }
            chosen.push(best.unwrap().0);
        }
        chosen
    }

    #[test]
    fn herding_matches_brute_force_oracle() {
        let mut rng = crate::seeds::rng(7, &[1]);
        for _ in 0..10 {
            let features: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..2).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                .collect();
            assert_eq!(herding_order(&features), brute_force_herding(&features));
        }
    }

    #[test]
    fn first_pick_is_nearest_to_mean() {
        let mut rng = crate::seeds::rng(9, &[2]);
        let features: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mean: Vec<f64> = (0..2)
            .map(|d| features.iter().map(|f| f[d]).sum::<f64>() / 6.0)
            .collect();
        let nearest = (0..6)
            .min_by(|&a, &b| {
                let da: f64 = mean.iter().zip(&features[a]).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = mean.iter().zip(&features[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(herding_order(&features)[0], nearest);
    }

    #[test]
    fn herding_prefix_property() {
        let t = task(1, vec![0], 8, 3);
        let five = select_exemplars(&t.train, 5, identity_features);
        let three = select_exemplars(&t.train, 3, identity_features);
        assert_eq!(&five[..3], &three[..]);
    }

    #[test]
    fn fixed_total_quota_shrinks() {
        // Budget 2000: 10 classes -> 200 each; 100 classes -> 20 each.
        let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(2000));
        mem.update(&task(1, (0..10).collect(), 300, 2), identity_features);
        assert_eq!(mem.len(), 2000);
        assert!(mem.counts_per_class().values().all(|&c| c == 200));

        let mut mem100 = RehearsalMemory::new(BudgetPolicy::FixedTotal(2000));
        for t_idx in 0..10 {
            let classes: Vec<usize> = (t_idx * 10..(t_idx + 1) * 10).collect();
            mem100.update(&task(t_idx + 1, classes, 30, 2), identity_features);
        }
        assert_eq!(mem100.class_count(), 100);
        assert!(mem100.counts_per_class().values().all(|&c| c == 20));
    }

    #[test]
    fn per_class_arithmetic() {
        let mut mem = RehearsalMemory::new(BudgetPolicy::PerClass(20));
        for t_idx in 1..=3 {
            let classes: Vec<usize> = ((t_idx - 1) * 10..t_idx * 10).collect();
            mem.update(&task(t_idx, classes, 25, 2), identity_features);
        }
        assert_eq!(mem.len(), 600);
    }

    #[test]
    fn budget_never_exceeded_over_random_stream() {
        // Replay-and-count oracle across a 10-task stream.
        let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(97));
        for t_idx in 1..=10 {
            let classes: Vec<usize> = ((t_idx - 1) * 3..t_idx * 3).collect();
            mem.update(&task(t_idx, classes, 12, 2), identity_features);
            let direct: usize = mem.samples().len();
            assert_eq!(direct, mem.len());
            assert!(mem.len() <= 97, "budget exceeded after task {t_idx}");
            let counts = mem.counts_per_class();
            let min = counts.values().min().unwrap();
            let max = counts.values().max().unwrap();
            assert!(max - min <= 1, "counts differ by more than 1");
        }
    }

    #[test]
    fn remainder_goes_to_earliest_classes() {
        let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(10));
        mem.update(&task(1, vec![0, 1], 10, 2), identity_features);
        mem.update(&task(2, vec![2], 10, 2), identity_features);
        let counts = mem.counts_per_class();
        // 10 / 3 = 3 rem 1; the earliest class takes the extra slot.
        assert_eq!(counts[&0], 4);
        assert_eq!(counts[&1], 3);
        assert_eq!(counts[&2], 3);
    }

    #[test]
    fn imbalance_ratio_arithmetic() {
        let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(400));
        mem.update(&task(1, vec![0, 1], 500, 2), identity_features);
        // 200 per class in memory, 500 per class incoming -> 2.5.
        let t2 = task(2, vec![2, 3], 500, 2);
        assert_eq!(imbalance_ratio(&t2, &mem), Some(2.5));
    }

    #[test]
    fn imbalance_ratio_identity_and_empty() {
        let mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(100));
        let t = task(1, vec![0], 10, 2);
        assert_eq!(imbalance_ratio(&t, &mem), None);

        let mut mem2 = RehearsalMemory::new(BudgetPolicy::PerClass(10));
        mem2.update(&task(1, vec![0], 10, 2), identity_features);
        let t2 = task(2, vec![1], 10, 2);
        assert_eq!(imbalance_ratio(&t2, &mem2), Some(1.0));
    }

    #[test]
    fn imbalance_nondecreasing_under_fixed_total() {
        let mut mem = RehearsalMemory::new(BudgetPolicy::FixedTotal(120));
        let mut last = 0.0;
        for t_idx in 1..=10 {
            let classes: Vec<usize> = ((t_idx - 1) * 2..t_idx * 2).collect();
            let t = task(t_idx, classes, 60, 2);
            if let Some(r) = imbalance_ratio(&t, &mem) {
                assert!(r >= last - 1e-12, "ratio decreased at task {t_idx}");
                last = r;
            }
            mem.update(&t, identity_features);
        }
        assert!(last > 1.0);
    }

    #[test]
    fn disabled_policy_stays_empty() {
        let mut mem = RehearsalMemory::new(BudgetPolicy::Disabled);
        mem.update(&task(1, vec![0, 1], 10, 2), identity_features);
        assert!(mem.is_empty());
    }

    #[test]
    fn memory_csv_persistence_roundtrip() {
        let ds = make_synthetic_dataset(4, 10, 2, 3, 0.2, 13);
        let stream = split_b0(&ds, 2, 13).unwrap();
        let mut mem = RehearsalMemory::new(BudgetPolicy::PerClass(4));
        mem.update(&stream.tasks[0], identity_features);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.csv");
        mem.save_csv(&path).unwrap();
        let loaded = crate::data::load_csv_dataset(&path, 3, 1.0).unwrap();
        let stored: Vec<Sample> = mem.samples().into_iter().cloned().collect();
        assert_eq!(loaded, stored);
    }
}
