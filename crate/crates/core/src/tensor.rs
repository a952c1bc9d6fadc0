//! Dense f64 tensors and a per-pass reverse-mode gradient tape.
//!
//! The tape is rebuilt for every forward pass: leaves are bound from plain
//! [`Tensor`] values, ops append nodes, and [`Tape::backward`] accumulates
//! gradients in reverse creation order (which is a topological order by
//! construction). Leaves with `requires_grad = false` never receive a
//! gradient buffer, so frozen parameters stay untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("teacher distribution row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Dense tensor: flat row-major f64 storage plus a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: TensorId, rhs: TensorId },
    Add { lhs: TensorId, rhs: TensorId },
    AddRowBias { input: TensorId, bias: TensorId },
    Scale { input: TensorId, factor: f64 },
    Relu { input: TensorId },
    ConcatCols { inputs: Vec<TensorId> },
    SelectRows { input: TensorId, rows: Vec<usize> },
    SliceCols { input: TensorId, start: usize, len: usize },
    Sum { input: TensorId },
    MeanCrossEntropy { logits: TensorId, labels: Vec<usize> },
    MeanKlDiv { teacher: TensorId, logits: TensorId, temperature: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode gradient tape. One tape per forward pass, one owner.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::ShapeMismatch(format!(
            "expected vector or matrix, got shape {other:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { shape, data, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Binds a tensor value onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Binds a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 2 || bshape.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul needs matrices, got {ashape:?} x {bshape:?}"
            )));
        }
        let (m, k, k2, n) = (ashape[0], ashape[1], bshape[0], bshape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims differ: {ashape:?} x {bshape:?}"
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::MatMul { lhs: a, rhs: b }, ng))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add { lhs: a, rhs: b }, ng))
    }

    /// Adds a length-n bias vector to every row of an [m, n] matrix.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape)?;
        if self.nodes[bias.0].data.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "bias length {} does not match row width {n}",
                self.nodes[bias.0].data.len()
            )));
        }
        let bias_data = &self.nodes[bias.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bias_data[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(shape, data, Op::AddRowBias { input: x, bias }, ng))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Scale { input: x, factor }, ng)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Relu { input: x }, ng)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of zero tensors".into()));
        }
        let (m, _) = rows_cols(&self.nodes[xs[0].0].shape)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, nx) = rows_cols(&self.nodes[x.0].shape)?;
            if mx != m {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat row counts differ: {m} vs {mx}"
                )));
            }
            widths.push(nx);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = &self.nodes[x.0].data;
            for r in 0..m {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![m, total], data, Op::ConcatCols { inputs: xs.to_vec() }, ng))
    }

    /// Gathers the given rows of a matrix into a new [k, n] matrix.
    pub fn select_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId, TensorError> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::ShapeMismatch(format!("row {bad} out of {m}")));
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows.len(), n], data, Op::SelectRows { input: x, rows: rows.to_vec() }, ng))
    }

    /// Takes columns [start, start+len) of a matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape)?;
        if start + len > n {
            return Err(TensorError::ShapeMismatch(format!(
                "columns {start}..{} out of width {n}",
                start + len
            )));
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![m, len], data, Op::SliceCols { input: x, start, len }, ng))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum { input: x }, ng)
    }

    /// Mean of per-row `-log softmax(row)[label]` over an [m, n] logit matrix.
    pub fn mean_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (m, n) = rows_cols(&self.nodes[logits.0].shape)?;
        if labels.len() != m {
            return Err(TensorError::ShapeMismatch(format!(
                "{} labels for {m} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: n });
        }
        let data = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * n..(r + 1) * n];
            total -= log_softmax_at(row, label);
        }
        let loss = total / m as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MeanCrossEntropy { logits, labels: labels.to_vec() },
            ng,
        ))
    }

    /// Cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId, TensorError> {
        self.mean_cross_entropy(logits, &[label])
    }

    /// Mean over rows of `KL(teacher || softmax(logits / temperature))`.
    ///
    /// The teacher rows must already be probability vectors; gradients flow
    /// into the student logits only.
    pub fn mean_kl_div(
        &mut self,
        teacher: TensorId,
        logits: TensorId,
        temperature: f64,
    ) -> Result<TensorId, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::BadTemperature(temperature));
        }
        let (m, n) = rows_cols(&self.nodes[logits.0].shape)?;
        let (mt, nt) = rows_cols(&self.nodes[teacher.0].shape)?;
        if (mt, nt) != (m, n) {
            return Err(TensorError::ShapeMismatch(format!(
                "teacher {:?} vs student {:?}",
                self.nodes[teacher.0].shape, self.nodes[logits.0].shape
            )));
        }
        let teacher_data = &self.nodes[teacher.0].data;
        for r in 0..m {
            let sum: f64 = teacher_data[r * n..(r + 1) * n].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(TensorError::NotNormalized { row: r, sum });
            }
        }
        let student = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for r in 0..m {
            let p = &teacher_data[r * n..(r + 1) * n];
            let row = &student[r * n..(r + 1) * n];
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            let ls = log_softmax_vec(&scaled);
            for j in 0..n {
                if p[j] > 0.0 {
                    total += p[j] * (p[j].ln() - ls[j]);
                }
            }
        }
        let loss = total / m as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MeanKlDiv { teacher, logits, temperature },
            ng,
        ))
    }

    /// Single-distribution form of [`Tape::mean_kl_div`].
    pub fn kl_divergence(
        &mut self,
        teacher: TensorId,
        logits: TensorId,
        temperature: f64,
    ) -> Result<TensorId, TensorError> {
        self.mean_kl_div(teacher, logits, temperature)
    }

    /// Reverse accumulation from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<Grads, TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = grads[i].take().unwrap();
            match self.nodes[i].op.clone() {
                Op::Leaf => {
                    grads[i] = Some(grad);
                }
                Op::MatMul { lhs, rhs } => {
                    let (m, k) = (self.nodes[lhs.0].shape[0], self.nodes[lhs.0].shape[1]);
                    let nn = self.nodes[rhs.0].shape[1];
                    if self.needs(lhs) {
                        // dA = dC * B^T
                        let b = &self.nodes[rhs.0].data;
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..nn {
                                    s += grad[r * nn + j] * b[c * nn + j];
                                }
                                da[r * k + c] = s;
                            }
                        }
                        accumulate(&mut grads[lhs.0], &da);
                    }
                    if self.needs(rhs) {
                        // dB = A^T * dC
                        let a = &self.nodes[lhs.0].data;
                        let mut db = vec![0.0; k * nn];
                        for r in 0..k {
                            for c in 0..nn {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += a[j * k + r] * grad[j * nn + c];
                                }
                                db[r * nn + c] = s;
                            }
                        }
                        accumulate(&mut grads[rhs.0], &db);
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.needs(lhs) {
                        accumulate(&mut grads[lhs.0], &grad);
                    }
                    if self.needs(rhs) {
                        accumulate(&mut grads[rhs.0], &grad);
                    }
                }
                Op::AddRowBias { input, bias } => {
                    if self.needs(input) {
                        accumulate(&mut grads[input.0], &grad);
                    }
                    if self.needs(bias) {
                        let (m, w) = rows_cols(&self.nodes[i].shape).unwrap();
                        let mut db = vec![0.0; w];
                        for r in 0..m {
                            for c in 0..w {
                                db[c] += grad[r * w + c];
                            }
                        }
                        accumulate(&mut grads[bias.0], &db);
                    }
                }
                Op::Scale { input, factor } => {
                    if self.needs(input) {
                        let dg: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                        accumulate(&mut grads[input.0], &dg);
                    }
                }
                Op::Relu { input } => {
                    if self.needs(input) {
                        let x = &self.nodes[input.0].data;
                        let dg: Vec<f64> = grad
                            .iter()
                            .zip(x)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[input.0], &dg);
                    }
                }
                Op::ConcatCols { inputs } => {
                    let (m, total) = rows_cols(&self.nodes[i].shape).unwrap();
                    let mut offset = 0;
                    for x in inputs {
                        let (_, w) = rows_cols(&self.nodes[x.0].shape).unwrap();
                        if self.needs(x) {
                            let mut dg = vec![0.0; m * w];
                            for r in 0..m {
                                dg[r * w..(r + 1) * w].copy_from_slice(
                                    &grad[r * total + offset..r * total + offset + w],
                                );
                            }
                            accumulate(&mut grads[x.0], &dg);
                        }
                        offset += w;
                    }
                }
                Op::SelectRows { input, rows } => {
                    if self.needs(input) {
                        let (m, w) = rows_cols(&self.nodes[input.0].shape).unwrap();
                        let mut dg = vec![0.0; m * w];
                        for (k, &r) in rows.iter().enumerate() {
                            for c in 0..w {
                                dg[r * w + c] += grad[k * w + c];
                            }
                        }
                        accumulate(&mut grads[input.0], &dg);
                    }
                }
                Op::SliceCols { input, start, len } => {
                    if self.needs(input) {
                        let (m, w) = rows_cols(&self.nodes[input.0].shape).unwrap();
                        let mut dg = vec![0.0; m * w];
                        for r in 0..m {
                            dg[r * w + start..r * w + start + len]
                                .copy_from_slice(&grad[r * len..(r + 1) * len]);
                        }
                        accumulate(&mut grads[input.0], &dg);
                    }
                }
                Op::Sum { input } => {
                    if self.needs(input) {
                        let dg = vec![grad[0]; self.nodes[input.0].data.len()];
                        accumulate(&mut grads[input.0], &dg);
                    }
                }
                Op::MeanCrossEntropy { logits, labels } => {
                    if self.needs(logits) {
                        let (m, w) = rows_cols(&self.nodes[logits.0].shape).unwrap();
                        let data = &self.nodes[logits.0].data;
                        let mut dg = vec![0.0; m * w];
                        let g = grad[0] / m as f64;
                        for (r, &label) in labels.iter().enumerate() {
                            let row = &data[r * w..(r + 1) * w];
                            let sm = softmax_unchecked(row);
                            for c in 0..w {
                                let target = if c == label { 1.0 } else { 0.0 };
                                dg[r * w + c] = g * (sm[c] - target);
                            }
                        }
                        accumulate(&mut grads[logits.0], &dg);
                    }
                }
                Op::MeanKlDiv { teacher, logits, temperature } => {
                    if self.needs(logits) {
                        let (m, w) = rows_cols(&self.nodes[logits.0].shape).unwrap();
                        let p = &self.nodes[teacher.0].data;
                        let data = &self.nodes[logits.0].data;
                        let mut dg = vec![0.0; m * w];
                        let g = grad[0] / (m as f64 * temperature);
                        for r in 0..m {
                            let row: Vec<f64> =
                                data[r * w..(r + 1) * w].iter().map(|v| v / temperature).collect();
                            let sm = softmax_unchecked(&row);
                            for c in 0..w {
                                dg[r * w + c] = g * (sm[c] - p[r * w + c]);
                            }
                        }
                        accumulate(&mut grads[logits.0], &dg);
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by leaf id.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Writes gradients back into tensors, in the order they were bound.
    pub fn store(&self, ids: &[TensorId], tensors: &mut [&mut Tensor]) {
        assert_eq!(ids.len(), tensors.len());
        for (id, t) in ids.iter().zip(tensors.iter_mut()) {
            t.grad = self.grads[id.0].clone();
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

fn log_softmax_vec(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

fn softmax_unchecked(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::ShapeMismatch("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("softmax input"));
    }
    Ok(softmax_unchecked(logits))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
