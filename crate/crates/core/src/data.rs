//! Dataset ingestion and class-disjoint task streams.
//!
//! Two sources are supported: label-first CSV files and seeded synthetic
//! Gaussian blobs. A loaded [`Dataset`] is carved into a [`TaskStream`]
//! under the B0 or B50 protocol, optionally reshaped by a long-tailed
//! per-class count profile.

use crate::seeds::{self, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: expected {expected} fields, got {got}")]
    Schema { path: String, line: usize, expected: usize, got: usize },
    #[error("invalid protocol arithmetic: {0}")]
    Config(String),
}

/// One labelled input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One increment step: a disjoint class set with its train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based task index.
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskSpec {
    pub fn train_count_per_class(&self) -> BTreeMap<usize, usize> {
        let mut counts: BTreeMap<usize, usize> = self.classes.iter().map(|&c| (c, 0)).collect();
        for s in &self.train {
            *counts.get_mut(&s.label).expect("sample label outside task classes") += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    B0,
    B50,
    LtOrdered,
    LtShuffled,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolKind::B0 => "b0",
            ProtocolKind::B50 => "b50",
            ProtocolKind::LtOrdered => "lt-ordered",
            ProtocolKind::LtShuffled => "lt-shuffled",
        };
        write!(f, "{s}")
    }
}

/// Ordered tasks over a class universe. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub n_classes: usize,
    pub dim: usize,
}

impl TaskStream {
    /// Test samples of every class seen up to and including `step` (1-based).
    pub fn test_pool(&self, step: usize) -> Vec<&Sample> {
        self.tasks
            .iter()
            .filter(|t| t.index <= step)
            .flat_map(|t| t.test.iter())
            .collect()
    }

    pub fn seen_classes(&self, step: usize) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.index <= step)
            .map(|t| t.classes.len())
            .sum()
    }
}

/// A full train/test corpus before task slicing.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub n_classes: usize,
    pub dim: usize,
}

// ── CSV ingestion ───────────────────────────────────────────────────

/// Parses a label-first CSV file: `label,f1,...,fn` per row. Features are
/// divided by `scale`.
pub fn load_csv_dataset(
    path: &Path,
    feature_count: usize,
    scale: f64,
) -> Result<Vec<Sample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();
    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != feature_count + 1 {
            return Err(DataError::Schema {
                path: display,
                line,
                expected: feature_count + 1,
                got: fields.len(),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| DataError::Parse {
            path: display.clone(),
            line,
            msg: format!("invalid label {:?}", fields[0]),
        })?;
        let mut features = Vec::with_capacity(feature_count);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| DataError::Parse {
                path: display.clone(),
                line,
                msg: format!("invalid feature {f:?}"),
            })?;
            features.push(v / scale);
        }
        samples.push(Sample { features, label });
    }
    Ok(samples)
}

/// Saves samples in the same label-first CSV schema.
pub fn save_csv_samples(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.label.to_string());
        for f in &s.features {
            out.push(',');
            out.push_str(&format!("{f}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Builds a dataset from CSV files. Without a separate test file, a seeded
/// per-class fraction of the training rows is held out.
pub fn csv_dataset(
    train_path: &Path,
    test_path: Option<&Path>,
    feature_count: usize,
    scale: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    let train_all = load_csv_dataset(train_path, feature_count, scale)?;
    let (train, test) = match test_path {
        Some(p) => (train_all, load_csv_dataset(p, feature_count, scale)?),
        None => holdout_split(train_all, test_fraction, seed),
    };
    let n_classes = train
        .iter()
        .chain(test.iter())
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0);
    Ok(Dataset { train, test, n_classes, dim: feature_count })
}

fn holdout_split(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&class, group) in by_class.iter_mut() {
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut seeds::rng(seed, &[stream::TEST_SPLIT, class as u64]));
        let n_test = ((group.len() as f64) * fraction).round() as usize;
        for (i, &idx) in order.iter().enumerate() {
            if i < n_test {
                test.push(group[idx].clone());
            } else {
                train.push(group[idx].clone());
            }
        }
    }
    (train, test)
}

// ── Synthetic Gaussians ─────────────────────────────────────────────

/// Class means drawn once per (n_classes, dim, seed); the noise stream is
/// separate so train and test sets share the same geometry.
pub fn synthetic_class_means(n_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seed, &[stream::SYNTH_MEANS]);
    (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect()
}

fn sample_gaussians(
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    noise_seed: u64,
) -> Vec<Sample> {
    let mut rng = seeds::rng(noise_seed, &[stream::SYNTH_NOISE]);
    let mut samples = Vec::with_capacity(means.len() * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features: Vec<f64> = mean
                .iter()
                .map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { features, label: class });
        }
    }
    samples
}

/// Seeded Gaussian blobs: class `c` is drawn around a random mean.
pub fn make_synthetic_gaussians(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Vec<Sample> {
    assert!(n_classes >= 2, "need at least two classes");
    assert!(dim >= 2, "need at least two dimensions");
    let means = synthetic_class_means(n_classes, dim, seed);
    sample_gaussians(&means, per_class, spread, seed)
}

/// Train and test splits drawn around shared class means.
pub fn make_synthetic_dataset(
    n_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(n_classes >= 2 && dim >= 2);
    let means = synthetic_class_means(n_classes, dim, seed);
    let train = sample_gaussians(&means, train_per_class, spread, seed);
    let test = sample_gaussians(&means, test_per_class, spread, seeds::mix(seed, &[0x7e57]));
    Dataset { train, test, n_classes, dim }
}

// ── Protocol splits ─────────────────────────────────────────────────

fn group_tasks(
    dataset: &Dataset,
    class_order: &[usize],
    sizes: &[usize],
    protocol: ProtocolKind,
    seed: u64,
) -> TaskStream {
    let mut train_by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    let mut test_by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in &dataset.train {
        train_by_class.entry(s.label).or_default().push(s.clone());
    }
    for s in &dataset.test {
        test_by_class.entry(s.label).or_default().push(s.clone());
    }
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut cursor = 0;
    for (i, &size) in sizes.iter().enumerate() {
        let classes: Vec<usize> = class_order[cursor..cursor + size].to_vec();
        cursor += size;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            train.extend(train_by_class.get(&c).cloned().unwrap_or_default());
            test.extend(test_by_class.get(&c).cloned().unwrap_or_default());
        }
        tasks.push(TaskSpec { index: i + 1, classes, train, test });
    }
    TaskStream {
        tasks,
        protocol,
        seed,
        n_classes: dataset.n_classes,
        dim: dataset.dim,
    }
}

fn shuffled_class_order(n_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut seeds::rng(seed, &[stream::CLASS_ORDER]));
    order
}

/// Equal-size class groups: `steps` tasks of `n_classes / steps` classes.
pub fn split_b0(dataset: &Dataset, steps: usize, seed: u64) -> Result<TaskStream, DataError> {
    if steps == 0 || dataset.n_classes % steps != 0 {
        return Err(DataError::Config(format!(
            "steps {steps} must divide class count {}",
            dataset.n_classes
        )));
    }
    let order = shuffled_class_order(dataset.n_classes, seed);
    let sizes = vec![dataset.n_classes / steps; steps];
    Ok(group_tasks(dataset, &order, &sizes, ProtocolKind::B0, seed))
}

/// A large base task followed by equal increments.
pub fn split_b50(
    dataset: &Dataset,
    base_classes: usize,
    step_size: usize,
    seed: u64,
) -> Result<TaskStream, DataError> {
    let rest = dataset
        .n_classes
        .checked_sub(base_classes)
        .ok_or_else(|| DataError::Config(format!(
            "base {base_classes} exceeds class count {}",
            dataset.n_classes
        )))?;
    if rest > 0 && (step_size == 0 || rest % step_size != 0) {
        return Err(DataError::Config(format!(
            "step size {step_size} must divide remaining {rest} classes"
        )));
    }
    let order = shuffled_class_order(dataset.n_classes, seed);
    let mut sizes = vec![base_classes];
    if rest > 0 {
        sizes.extend(std::iter::repeat(step_size).take(rest / step_size));
    }
    Ok(group_tasks(dataset, &order, &sizes, ProtocolKind::B50, seed))
}

// ── Long-tailed profile ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongTailMode {
    Ordered,
    Shuffled,
}

/// Reshapes per-class training counts to `n_max * rho^(-i/(K-1))`. Ordered
/// mode assigns the decay by ascending class index; shuffled mode permutes
/// the count profile across classes. Test sets are untouched.
pub fn apply_longtail(
    mut stream: TaskStream,
    imbalance_factor: f64,
    mode: LongTailMode,
    seed: u64,
) -> TaskStream {
    assert!(imbalance_factor >= 1.0, "imbalance factor must be >= 1");
    let k = stream.n_classes;
    let n_max = stream
        .tasks
        .iter()
        .flat_map(|t| t.train_count_per_class().into_values())
        .max()
        .unwrap_or(0);
    if k < 2 || n_max == 0 {
        return stream;
    }

    let mut rank_of_class: Vec<usize> = (0..k).collect();
    if mode == LongTailMode::Shuffled {
        rank_of_class.shuffle(&mut seeds::rng(seed, &[stream::LONGTAIL]));
    }

    let target = |class: usize| -> usize {
        let i = rank_of_class[class] as f64;
        let raw = n_max as f64 * imbalance_factor.powf(-i / (k as f64 - 1.0));
        let count = raw.round() as usize;
        if count == 0 {
            log::warn!("long-tail count for class {class} rounded to 0; clamped to 1");
            1
        } else {
            count
        }
    };

    stream.protocol = match mode {
        LongTailMode::Ordered => ProtocolKind::LtOrdered,
        LongTailMode::Shuffled => ProtocolKind::LtShuffled,
    };
    for task in &mut stream.tasks {
        let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
        task.train.retain(|s| {
            let seen = kept.entry(s.label).or_insert(0);
            *seen += 1;
            *seen <= target(s.label)
        });
    }
    stream
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_row_parses() {
        let f = write_csv("3,0.0,1.0\n");
        let samples = load_csv_dataset(f.path(), 2, 1.0).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 3);
        assert_eq!(samples[0].features, vec![0.0, 1.0]);
    }

    #[test]
    fn csv_empty_file_is_empty_list() {
        let f = write_csv("");
        assert!(load_csv_dataset(f.path(), 4, 1.0).unwrap().is_empty());
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let f = write_csv("0,1.0,2.0\n1,x,2.0\n");
        let err = load_csv_dataset(f.path(), 2, 1.0).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn csv_wrong_arity_reports_schema() {
        let f = write_csv("0,1.0\n");
        let err = load_csv_dataset(f.path(), 2, 1.0).unwrap_err();
        match err {
            DataError::Schema { line, expected, got, .. } => {
                assert_eq!((line, expected, got), (1, 3, 2));
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn csv_histogram_matches_direct_scan() {
        // Independent oracle: count rows and per-class occurrences by a raw
        // line scan, then compare with the parsed result.
        let mut content = String::new();
        let mut rng = seeds::rng(99, &[1]);
        for _ in 0..200 {
            let label = (rng.random::<u32>() % 7) as usize;
            content.push_str(&format!("{label},{:.4},{:.4}\n", rng.random::<f64>(), rng.random::<f64>()));
        }
        let f = write_csv(&content);

        let mut oracle: BTreeMap<usize, usize> = BTreeMap::new();
        for line in content.lines() {
            let label: usize = line.split(',').next().unwrap().parse().unwrap();
            *oracle.entry(label).or_insert(0) += 1;
        }

        let samples = load_csv_dataset(f.path(), 2, 1.0).unwrap();
        assert_eq!(samples.len(), 200);
        let mut got: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &samples {
            *got.entry(s.label).or_insert(0) += 1;
        }
        assert_eq!(got, oracle);
    }

    #[test]
    fn csv_scale_divides_features() {
        let f = write_csv("0,255,510\n");
        let samples = load_csv_dataset(f.path(), 2, 255.0).unwrap();
        assert_eq!(samples[0].features, vec![1.0, 2.0]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic_gaussians(3, 5, 4, 0.3, 11);
        let b = make_synthetic_gaussians(3, 5, 4, 0.3, 11);
        assert_eq!(a, b);
        let c = make_synthetic_gaussians(3, 5, 4, 0.3, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_zero_spread_collapses_to_means() {
        let means = synthetic_class_means(3, 4, 21);
        let samples = make_synthetic_gaussians(3, 4, 4, 0.0, 21);
        for s in &samples {
            assert_eq!(s.features, means[s.label]);
        }
    }

    #[test]
    fn synthetic_small_spread_nearest_mean_classifier() {
        let means = synthetic_class_means(5, 8, 33);
        let samples = make_synthetic_gaussians(5, 40, 8, 0.02, 33);
        let mut correct = 0;
        for s in &samples {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, m) in means.iter().enumerate() {
                let d: f64 = m.iter().zip(&s.features).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == s.label {
                correct += 1;
            }
        }
        assert!(correct as f64 / samples.len() as f64 > 0.99);
    }

    fn toy_dataset(n_classes: usize, per_class: usize) -> Dataset {
        make_synthetic_dataset(n_classes, per_class, 3, 4, 0.1, 5)
    }

    #[test]
    fn b0_splits_evenly() {
        let ds = toy_dataset(10, 6);
        let stream = split_b0(&ds, 5, 1).unwrap();
        assert_eq!(stream.tasks.len(), 5);
        for t in &stream.tasks {
            assert_eq!(t.classes.len(), 2);
        }
    }

    #[test]
    fn b0_rejects_non_divisible() {
        let ds = toy_dataset(10, 4);
        assert!(matches!(split_b0(&ds, 3, 1), Err(DataError::Config(_))));
    }

    #[test]
    fn b0_partition_property() {
        let ds = toy_dataset(12, 4);
        for seed in 0..5 {
            let stream = split_b0(&ds, 4, seed).unwrap();
            let mut union = BTreeSet::new();
            let mut total = 0;
            for t in &stream.tasks {
                for &c in &t.classes {
                    assert!(union.insert(c), "class {c} appears in two tasks");
                    total += 1;
                }
                for s in t.train.iter().chain(t.test.iter()) {
                    assert!(t.classes.contains(&s.label));
                }
            }
            assert_eq!(total, 12);
            assert_eq!(union.len(), 12);
        }
    }

    #[test]
    fn b50_task_sizes() {
        let ds = toy_dataset(20, 4);
        let stream = split_b50(&ds, 10, 5, 2).unwrap();
        let sizes: Vec<usize> = stream.tasks.iter().map(|t| t.classes.len()).collect();
        assert_eq!(sizes, vec![10, 5, 5]);
        assert_eq!(sizes.iter().sum::<usize>(), 20);
    }

    #[test]
    fn b50_degenerate_single_task() {
        let ds = toy_dataset(6, 4);
        let stream = split_b50(&ds, 6, 0, 2).unwrap();
        assert_eq!(stream.tasks.len(), 1);
        assert_eq!(stream.tasks[0].classes.len(), 6);
    }

    #[test]
    fn stream_determinism() {
        let ds = toy_dataset(8, 5);
        let a = split_b0(&ds, 4, 7).unwrap();
        let b = split_b0(&ds, 4, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_pool_is_cumulative() {
        let ds = toy_dataset(8, 5);
        let stream = split_b0(&ds, 4, 7).unwrap();
        for step in 1..=4 {
            let pool = stream.test_pool(step);
            let expected: usize = stream.tasks[..step].iter().map(|t| t.test.len()).sum();
            assert_eq!(pool.len(), expected);
            let seen: BTreeSet<usize> = stream.tasks[..step]
                .iter()
                .flat_map(|t| t.classes.iter().cloned())
                .collect();
            assert!(pool.iter().all(|s| seen.contains(&s.label)));
        }
    }

    #[test]
    fn longtail_identity_at_factor_one() {
        let ds = toy_dataset(10, 8);
        let stream = split_b0(&ds, 5, 3).unwrap();
        let tailed = apply_longtail(stream.clone(), 1.0, LongTailMode::Ordered, 3);
        for (a, b) in stream.tasks.iter().zip(&tailed.tasks) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
        }
    }

    #[test]
    fn longtail_endpoint_reaches_one() {
        let ds = make_synthetic_dataset(10, 100, 3, 4, 0.1, 5);
        let stream = split_b0(&ds, 5, 3).unwrap();
        let tailed = apply_longtail(stream, 100.0, LongTailMode::Ordered, 3);
        let counts: BTreeMap<usize, usize> = tailed
            .tasks
            .iter()
            .flat_map(|t| t.train_count_per_class())
            .collect();
        assert_eq!(counts.values().copied().min(), Some(1));
        assert_eq!(counts.values().copied().max(), Some(100));
        // Ordered mode decays with class index.
        assert_eq!(counts[&0], 100);
        assert_eq!(counts[&9], 1);
    }

    #[test]
    fn longtail_ordered_and_shuffled_share_count_multiset() {
        let ds = make_synthetic_dataset(8, 50, 3, 4, 0.1, 9);
        let stream = split_b0(&ds, 4, 9).unwrap();
        let ordered = apply_longtail(stream.clone(), 20.0, LongTailMode::Ordered, 9);
        let shuffled = apply_longtail(stream, 20.0, LongTailMode::Shuffled, 9);
        let collect = |s: &TaskStream| {
            let mut counts: Vec<usize> = s
                .tasks
                .iter()
                .flat_map(|t| t.train_count_per_class().into_values())
                .collect();
            counts.sort_unstable();
            counts
        };
        assert_eq!(collect(&ordered), collect(&shuffled));
        // Test sets untouched in both modes.
        for (a, b) in ordered.tasks.iter().zip(&shuffled.tasks) {
            assert_eq!(a.test, b.test);
        }
    }

    #[test]
    fn longtail_clamps_zero_counts() {
        let ds = make_synthetic_dataset(10, 20, 3, 4, 0.1, 5);
        let stream = split_b0(&ds, 5, 3).unwrap();
        // 20 * 1000^(-1) rounds to 0 for the tail class; clamp keeps 1.
        let tailed = apply_longtail(stream, 1000.0, LongTailMode::Ordered, 3);
        let counts: BTreeMap<usize, usize> = tailed
            .tasks
            .iter()
            .flat_map(|t| t.train_count_per_class())
            .collect();
        assert!(counts.values().all(|&c| c >= 1));
        assert_eq!(counts[&9], 1);
    }

    #[test]
    fn csv_roundtrip_via_save() {
        let samples = make_synthetic_gaussians(3, 4, 5, 0.2, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.csv");
        save_csv_samples(&path, &samples).unwrap();
        let loaded = load_csv_dataset(&path, 5, 1.0).unwrap();
        assert_eq!(loaded, samples);
    }
}
