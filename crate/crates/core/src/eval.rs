//! Top-1 evaluation over the cumulative test pool.

use crate::data::TaskStream;
use crate::model::{Model, ModelError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation pool at step {0}")]
    EmptyPool(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Top-1 accuracy over all seen classes.
    pub accuracy: f64,
    /// Accuracy restricted to each seen task's test samples.
    pub per_task: Vec<f64>,
}

/// Evaluates on the test samples of every task up to and including `step`.
pub fn evaluate(model: &Model, stream: &TaskStream, step: usize) -> Result<Evaluation, EvalError> {
    let mut per_task = Vec::new();
    let mut correct_total = 0usize;
    let mut count_total = 0usize;
    for task in stream.tasks.iter().filter(|t| t.index <= step) {
        if task.test.is_empty() {
            return Err(EvalError::EmptyPool(step));
        }
        let mut correct = 0usize;
        for chunk in task.test.chunks(256) {
            let xs: Vec<&[f64]> = chunk.iter().map(|s| s.features.as_slice()).collect();
            let predictions = model.predict_batch(&xs)?;
            correct += predictions
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        per_task.push(correct as f64 / task.test.len() as f64);
        correct_total += correct;
        count_total += task.test.len();
    }
    if count_total == 0 {
        return Err(EvalError::EmptyPool(step));
    }
    Ok(Evaluation { accuracy: correct_total as f64 / count_total as f64, per_task })
}
