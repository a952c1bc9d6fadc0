//! Result records and their persistence: line-delimited JSON records, a
//! per-step CSV for plotting, and a seed-aggregated summary table.
//!
//! Records carry only deterministic content (wall-clock timings stay in
//! memory and on stdout), so reruns with the same config and seed emit
//! byte-identical lines.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("results io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("results decode {path}:{line}: {source}")]
    Decode {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ResultsError {
    ResultsError::Io { path: path.display().to_string(), source }
}

/// Accuracy record for one incremental step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub seen_classes: usize,
    pub accuracy: f64,
    pub per_task: Vec<f64>,
    pub imbalance_ratio: Option<f64>,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// One finished run. `config` is the canonical echo of the effective
/// configuration; `manifest` records resolved implementation choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub pipeline: String,
    pub seed: u64,
    pub config: String,
    pub manifest: Vec<(String, String)>,
    pub steps: Vec<StepRecord>,
    pub avg_accuracy: f64,
    pub last_accuracy: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

impl ExperimentResult {
    /// Config echo with the seed line removed; runs of one sweep share it.
    pub fn group_key(&self) -> String {
        self.config
            .lines()
            .filter(|l| !l.trim_start().starts_with("seed "))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Appends one record per line to `records.jsonl` in `out_dir`.
pub fn append_records(out_dir: &Path, results: &[ExperimentResult]) -> Result<(), ResultsError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join(RECORDS_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    for r in results {
        let line = serde_json::to_string(r).expect("result serialization");
        writeln!(file, "{line}").map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

pub fn read_records(out_dir: &Path) -> Result<Vec<ExperimentResult>, ResultsError> {
    let path = out_dir.join(RECORDS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| ResultsError::Decode {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Per-step CSV for plotting incremental-accuracy curves.
pub fn write_step_csv(out_dir: &Path, result: &ExperimentResult) -> Result<(), ResultsError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let name = format!("steps_{}_seed{}.csv", result.pipeline, result.seed);
    let path = out_dir.join(name);
    let mut csv = String::from("step,seen_classes,accuracy,imbalance_ratio\n");
    for s in &result.steps {
        let imbalance = match s.imbalance_ratio {
            Some(r) => format!("{r}"),
            None => "na".to_string(),
        };
        writeln!(csv, "{},{},{},{}", s.step, s.seen_classes, s.accuracy, imbalance).unwrap();
    }
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean with Bessel's correction; 0 for one run.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Aggregates runs over seeds (grouped by config-minus-seed) into
/// `summary.csv`: mean and standard error of Avg and Last.
pub fn write_summary(out_dir: &Path, results: &[ExperimentResult]) -> Result<String, ResultsError> {
    let mut groups: BTreeMap<String, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.group_key()).or_default().push(r);
    }
    let mut csv = String::from("pipeline,drc,runs,avg_mean,avg_stderr,last_mean,last_stderr\n");
    for runs in groups.values() {
        let avg: Vec<f64> = runs.iter().map(|r| r.avg_accuracy).collect();
        let last: Vec<f64> = runs.iter().map(|r| r.last_accuracy).collect();
        let drc = runs[0]
            .config
            .lines()
            .find_map(|l| l.strip_prefix("pipeline.drc = "))
            .unwrap_or("?");
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            runs[0].pipeline,
            drc,
            runs.len(),
            mean(&avg),
            standard_error(&avg),
            mean(&last),
            standard_error(&last)
        )
        .unwrap();
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    Ok(csv)
}

/// Emits every artifact for a batch of runs: records, per-step CSVs, and
/// the seed-aggregated summary.
pub fn emit_results(out_dir: &Path, results: &[ExperimentResult]) -> Result<(), ResultsError> {
    append_records(out_dir, results)?;
    for r in results {
        write_step_csv(out_dir, r)?;
    }
    let all = read_records(out_dir)?;
    write_summary(out_dir, &all)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(seed: u64, avg: f64, last: f64) -> ExperimentResult {
        ExperimentResult {
            pipeline: "maf".into(),
            seed,
            config: format!("seed = {seed}\npipeline = maf\npipeline.drc = true\n"),
            manifest: vec![],
            steps: vec![
                StepRecord {
                    step: 1,
                    seen_classes: 2,
                    accuracy: avg,
                    per_task: vec![avg],
                    imbalance_ratio: None,
                    wall_secs: 0.0,
                },
                StepRecord {
                    step: 2,
                    seen_classes: 4,
                    accuracy: last,
                    per_task: vec![avg, last],
                    imbalance_ratio: Some(2.0),
                    wall_secs: 0.0,
                },
            ],
            avg_accuracy: (avg + last) / 2.0,
            last_accuracy: last,
            wall_secs: 0.0,
        }
    }

    #[test]
    fn records_roundtrip_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![result(1, 0.9, 0.8), result(2, 0.85, 0.7)];
        emit_results(dir.path(), &runs).unwrap();
        let loaded = read_records(dir.path()).unwrap();
        assert_eq!(loaded, runs);
        assert!(dir.path().join("steps_maf_seed1.csv").exists());
        let csv = std::fs::read_to_string(dir.path().join("steps_maf_seed1.csv")).unwrap();
        assert!(csv.starts_with("step,seen_classes,accuracy,imbalance_ratio\n"));
        assert!(csv.contains(",na"));
    }

    #[test]
    fn summary_mean_matches_hand_computation() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![result(1, 0.9, 0.8), result(2, 0.8, 0.6), result(3, 0.7, 0.7)];
        emit_results(dir.path(), &runs).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        let avg_mean: f64 = fields[3].parse().unwrap();
        let expected = ((0.9 + 0.8) / 2.0 + (0.8 + 0.6) / 2.0 + (0.7 + 0.7) / 2.0) / 3.0;
        assert!((avg_mean - expected).abs() < 1e-12);
    }

    #[test]
    fn standard_error_matches_independent_recomputation() {
        let values = [0.82, 0.76, 0.9, 0.61, 0.88];
        let got = standard_error(&values);
        // Independent recomputation straight from the definition.
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
        let expected = (ss / (n - 1.0)).sqrt() / n.sqrt();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(standard_error(&[0.5]), 0.0);
    }

    #[test]
    fn group_key_ignores_seed() {
        let a = result(1, 0.9, 0.8);
        let b = result(2, 0.8, 0.7);
        assert_eq!(a.group_key(), b.group_key());
    }
}
