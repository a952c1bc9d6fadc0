//! The classification model: MLP feature extractor, bias-free branch
//! layers, per-task heads, residual logit fusion, and parameter-space
//! branch merging.
//!
//! A branch layer is a strictly linear d×d map without bias. Heads are
//! affine. That combination is what makes branch merging exact: averaging
//! two branch weight matrices and pushing the result through a shared head
//! reproduces the average of the two branch logits, so the merged frozen
//! branch replays the previous model's fused old-class logits bit for bit
//! (up to float roundoff).

use crate::seeds::{self, stream};
use crate::tensor::{argmax, matmul_raw, softmax, Tape, Tensor, TensorError, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint decode {path}: {source}")]
    CheckpointDecode {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
}

fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data)
}

// ── Feature extractor ───────────────────────────────────────────────

/// Fully connected stack with ReLU between layers; the final layer is
/// linear so features keep full range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// He-style init for hidden layers, smaller variance on the output.
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "extractor needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let last = i == widths.len() - 2;
            let sigma = if last { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            weights.push(gaussian_matrix(fan_in, fan_out, sigma, rng).param());
            biases.push(Tensor::vector(vec![0.0; fan_out]).param());
        }
        Mlp { weights, biases }
    }

    /// Single identity layer, mostly for tests.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Mlp {
            weights: vec![Tensor::matrix(dim, dim, w).param()],
            biases: vec![Tensor::vector(vec![0.0; dim]).param()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().shape[1]
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            t.requires_grad = trainable;
        }
    }

    /// Plain value-path forward for a single input row.
    pub fn forward_values(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let n_layers = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
            debug_assert_eq!(cur.len(), fan_in);
            let mut out = matmul_raw(&cur, &w.data, 1, fan_in, fan_out);
            for (o, bias) in out.iter_mut().zip(&b.data) {
                *o += bias;
            }
            if i + 1 < n_layers {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
            cur = out;
        }
        cur
    }
}

/// Extractor stage: a single MLP, or a frozen/trainable pair with
/// concatenated outputs (the expansion stage of the MEC pipeline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Extractor {
    Mlp(Mlp),
    Concat { frozen: Mlp, trainable: Mlp },
}

impl Extractor {
    pub fn input_dim(&self) -> usize {
        match self {
            Extractor::Mlp(m) => m.input_dim(),
            Extractor::Concat { frozen, .. } => frozen.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Extractor::Mlp(m) => m.output_dim(),
            Extractor::Concat { frozen, trainable } => frozen.output_dim() + trainable.output_dim(),
        }
    }

    pub fn forward_values(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Extractor::Mlp(m) => m.forward_values(x),
            Extractor::Concat { frozen, trainable } => {
                let mut f = frozen.forward_values(x);
                f.extend(trainable.forward_values(x));
                f
            }
        }
    }
}

// ── Branch layers and heads ─────────────────────────────────────────

/// Bias-free linear d×d map. Frozen means the weight takes no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLayer {
    pub weight: Tensor,
}

impl BranchLayer {
    pub fn identity_noise(dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = gaussian_matrix(dim, dim, sigma, rng);
        for i in 0..dim {
            t.data[i * dim + i] += 1.0;
        }
        BranchLayer { weight: t.param() }
    }

    pub fn gaussian(dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        BranchLayer { weight: gaussian_matrix(dim, dim, sigma, rng).param() }
    }

    pub fn from_weight(weight: Tensor, frozen: bool) -> Self {
        let mut weight = weight;
        weight.requires_grad = !frozen;
        weight.grad = None;
        BranchLayer { weight }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn frozen(&self) -> bool {
        !self.weight.requires_grad
    }

    pub fn forward_values(&self, f: &[f64]) -> Vec<f64> {
        let d = self.dim();
        matmul_raw(f, &self.weight.data, 1, d, self.weight.shape[1])
    }
}

/// Merges branch weights in parameter space: the new frozen branch is the
/// elementwise mean. Merging a lone branch (task 1) is a frozen copy.
pub fn merge_branches(old: Option<&BranchLayer>, recent: &BranchLayer) -> BranchLayer {
    let weight = match old {
        None => recent.weight.clone(),
        Some(prev) => {
            assert_eq!(prev.weight.shape, recent.weight.shape, "branch shapes differ");
            let data: Vec<f64> = prev
                .weight
                .data
                .iter()
                .zip(&recent.weight.data)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            Tensor::new(recent.weight.shape.clone(), data)
        }
    };
    BranchLayer::from_weight(weight, true)
}

/// Affine per-task classifier head over the branch (or feature) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub classes: Vec<usize>,
}

impl TaskHead {
    pub fn new(in_dim: usize, classes: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let sigma = (1.0 / in_dim as f64).sqrt();
        TaskHead {
            weight: gaussian_matrix(in_dim, classes.len(), sigma, rng).param(),
            bias: Tensor::vector(vec![0.0; classes.len()]).param(),
            classes,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, classes: Vec<usize>) -> Self {
        TaskHead { weight: weight.param(), bias: bias.param(), classes }
    }

    pub fn width(&self) -> usize {
        self.classes.len()
    }

    pub fn forward_values(&self, b: &[f64]) -> Vec<f64> {
        let (d, n) = (self.weight.shape[0], self.weight.shape[1]);
        let mut out = matmul_raw(b, &self.weight.data, 1, d, n);
        for (o, bias) in out.iter_mut().zip(&self.bias.data) {
            *o += bias;
        }
        out
    }
}

// ── Model ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    /// Heads applied directly to features.
    Plain { heads: Vec<TaskHead> },
    /// Two-branch residual classifier: a frozen merged branch carrying old
    /// knowledge (absent at task 1) and a trainable branch for the current
    /// task; logits of both paths are fused by averaging.
    Residual {
        old_branch: Option<BranchLayer>,
        new_branch: BranchLayer,
        heads: Vec<TaskHead>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: Extractor,
    pub classifier: Classifier,
}

/// Policy for initializing the trainable branch of a new task.
#[derive(Debug, Clone)]
pub enum BranchInit {
    IdentityNoise { sigma: f64 },
    Gaussian { sigma: f64 },
    FromWeights(Tensor),
}

impl BranchInit {
    fn build(self, dim: usize, rng: &mut ChaCha8Rng) -> BranchLayer {
        match self {
            BranchInit::IdentityNoise { sigma } => BranchLayer::identity_noise(dim, sigma, rng),
            BranchInit::Gaussian { sigma } => BranchLayer::gaussian(dim, sigma, rng),
            BranchInit::FromWeights(w) => {
                assert_eq!(w.shape, vec![dim, dim]);
                BranchLayer::from_weight(w, false)
            }
        }
    }
}

/// Default noise scale when a new branch starts near the identity.
pub const IDENTITY_NOISE_SIGMA: f64 = 0.01;

impl Model {
    /// Task-1 model: one head, and one trainable branch in residual mode.
    /// Deliberately pipeline-independent so every pipeline degenerates to
    /// the same training problem on a single-task stream.
    pub fn initial(extractor: Extractor, classes: Vec<usize>, residual: bool, seed: u64) -> Model {
        let d = extractor.output_dim();
        let mut rng = seeds::rng(seed, &[stream::MODEL_INIT, 1]);
        let classifier = if residual {
            let new_branch = BranchLayer::identity_noise(d, IDENTITY_NOISE_SIGMA, &mut rng);
            let head = TaskHead::new(d, classes, &mut rng);
            Classifier::Residual { old_branch: None, new_branch, heads: vec![head] }
        } else {
            Classifier::Plain { heads: vec![TaskHead::new(d, classes, &mut rng)] }
        };
        Model { extractor, classifier }
    }

    /// Grows the model for a new task: installs the merged frozen branch,
    /// keeps the inherited heads trainable, and appends a fresh head (or
    /// the caller-provided one).
    pub fn expand_for_task(
        prev: &Model,
        new_classes: Vec<usize>,
        branch_init: BranchInit,
        new_head: Option<TaskHead>,
        rng: &mut ChaCha8Rng,
    ) -> Model {
        let d = prev.extractor.output_dim();
        let classifier = match &prev.classifier {
            Classifier::Plain { heads } => {
                let mut heads = heads.clone();
                heads.push(new_head.unwrap_or_else(|| TaskHead::new(d, new_classes, rng)));
                Classifier::Plain { heads }
            }
            Classifier::Residual { old_branch, new_branch, heads } => {
                let merged = merge_branches(old_branch.as_ref(), new_branch);
                let mut heads = heads.clone();
                heads.push(new_head.unwrap_or_else(|| TaskHead::new(d, new_classes, rng)));
                Classifier::Residual {
                    old_branch: Some(merged),
                    new_branch: branch_init.build(d, rng),
                    heads,
                }
            }
        };
        Model { extractor: prev.extractor.clone(), classifier }
    }

    pub fn heads(&self) -> &[TaskHead] {
        match &self.classifier {
            Classifier::Plain { heads } | Classifier::Residual { heads, .. } => heads,
        }
    }

    pub fn task_count(&self) -> usize {
        self.heads().len()
    }

    /// Global class ids in logit-column order.
    pub fn class_columns(&self) -> Vec<usize> {
        self.heads().iter().flat_map(|h| h.classes.iter().copied()).collect()
    }

    pub fn seen_class_count(&self) -> usize {
        self.heads().iter().map(|h| h.width()).sum()
    }

    /// Width of the old-class logit block (classes of tasks 1..t-1).
    pub fn old_block_width(&self) -> usize {
        let heads = self.heads();
        heads[..heads.len() - 1].iter().map(|h| h.width()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    /// Branch parameters only; constant 2·d² for any task count t ≥ 2.
    pub fn branch_param_count(&self) -> usize {
        match &self.classifier {
            Classifier::Plain { .. } => 0,
            Classifier::Residual { old_branch, new_branch, .. } => {
                new_branch.weight.numel()
                    + old_branch.as_ref().map_or(0, |b| b.weight.numel())
            }
        }
    }

    /// Parameters in canonical order. Must stay in lockstep with
    /// [`Model::params_mut`] and [`Model::bind`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        match &self.extractor {
            Extractor::Mlp(m) => {
                for (w, b) in m.weights.iter().zip(&m.biases) {
                    out.push(w);
                    out.push(b);
                }
            }
            Extractor::Concat { frozen, trainable } => {
                for m in [frozen, trainable] {
                    for (w, b) in m.weights.iter().zip(&m.biases) {
                        out.push(w);
                        out.push(b);
                    }
                }
            }
        }
        match &self.classifier {
            Classifier::Plain { heads } => {
                for h in heads {
                    out.push(&h.weight);
                    out.push(&h.bias);
                }
            }
            Classifier::Residual { old_branch, new_branch, heads } => {
                if let Some(b) = old_branch {
                    out.push(&b.weight);
                }
                out.push(&new_branch.weight);
                for h in heads {
                    out.push(&h.weight);
                    out.push(&h.bias);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match &mut self.extractor {
            Extractor::Mlp(m) => {
                for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
                    out.push(w);
                    out.push(b);
                }
            }
            Extractor::Concat { frozen, trainable } => {
                for m in [frozen, trainable] {
                    for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
                        out.push(w);
                        out.push(b);
                    }
                }
            }
        }
        match &mut self.classifier {
            Classifier::Plain { heads } => {
                for h in heads {
                    out.push(&mut h.weight);
                    out.push(&mut h.bias);
                }
            }
            Classifier::Residual { old_branch, new_branch, heads } => {
                if let Some(b) = old_branch {
                    out.push(&mut b.weight);
                }
                out.push(&mut new_branch.weight);
                for h in heads {
                    out.push(&mut h.weight);
                    out.push(&mut h.bias);
                }
            }
        }
        out
    }

    /// Binds the model onto a tape. With `trainable = false` every leaf is
    /// a constant, which is how teachers and evaluation passes run.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TapedModel {
        let mut param_ids = Vec::new();
        let mut bind_one = |tape: &mut Tape, t: &Tensor| -> TensorId {
            let id = if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t.shape.clone(), t.data.clone())
            };
            param_ids.push(id);
            id
        };
        let extractor = match &self.extractor {
            Extractor::Mlp(m) => TapedExtractor::Mlp(
                m.weights
                    .iter()
                    .zip(&m.biases)
                    .map(|(w, b)| (bind_one(tape, w), bind_one(tape, b)))
                    .collect(),
            ),
            Extractor::Concat { frozen, trainable: tr } => {
                let f = frozen
                    .weights
                    .iter()
                    .zip(&frozen.biases)
                    .map(|(w, b)| (bind_one(tape, w), bind_one(tape, b)))
                    .collect();
                let t = tr
                    .weights
                    .iter()
                    .zip(&tr.biases)
                    .map(|(w, b)| (bind_one(tape, w), bind_one(tape, b)))
                    .collect();
                TapedExtractor::Concat { frozen: f, trainable: t }
            }
        };
        let classifier = match &self.classifier {
            Classifier::Plain { heads } => TapedClassifier::Plain {
                heads: heads
                    .iter()
                    .map(|h| TapedHead {
                        weight: bind_one(tape, &h.weight),
                        bias: bind_one(tape, &h.bias),
                        width: h.width(),
                    })
                    .collect(),
            },
            Classifier::Residual { old_branch, new_branch, heads } => TapedClassifier::Residual {
                old_branch: old_branch.as_ref().map(|b| bind_one(tape, &b.weight)),
                new_branch: bind_one(tape, &new_branch.weight),
                heads: heads
                    .iter()
                    .map(|h| TapedHead {
                        weight: bind_one(tape, &h.weight),
                        bias: bind_one(tape, &h.bias),
                        width: h.width(),
                    })
                    .collect(),
            },
        };
        TapedModel { extractor, classifier, param_ids }
    }

    /// Extractor output for one sample, value path (used for herding).
    pub fn features_vec(&self, x: &[f64]) -> Vec<f64> {
        self.extractor.forward_values(x)
    }

    /// Fused logits for a batch of inputs, no gradients recorded.
    pub fn fused_logits_values(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let taped = self.bind(&mut tape, false);
        let x = batch_input(&mut tape, xs, self.extractor.input_dim());
        let bundle = taped.forward(&mut tape, x)?;
        let n = self.seen_class_count();
        let flat = tape.value(bundle.fused_all);
        Ok(xs.iter().enumerate().map(|(r, _)| flat[r * n..(r + 1) * n].to_vec()).collect())
    }

    /// Argmax class over softmax of the fused logits; ties resolve to the
    /// lowest class column.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(self.predict_batch(&[x])?[0])
    }

    pub fn predict_batch(&self, xs: &[&[f64]]) -> Result<Vec<usize>, ModelError> {
        let logits = self.fused_logits_values(xs)?;
        let columns = self.class_columns();
        let mut out = Vec::with_capacity(xs.len());
        for row in &logits {
            let p = softmax(row)?;
            out.push(columns[argmax(&p)]);
        }
        Ok(out)
    }
}

/// Packs sample feature slices into one [m, dim] constant.
pub fn batch_input(tape: &mut Tape, xs: &[&[f64]], dim: usize) -> TensorId {
    let mut data = Vec::with_capacity(xs.len() * dim);
    for x in xs {
        assert_eq!(x.len(), dim, "input width mismatch");
        data.extend_from_slice(x);
    }
    tape.constant(vec![xs.len(), dim], data)
}

// ── Taped forward pass ──────────────────────────────────────────────

struct TapedHead {
    weight: TensorId,
    bias: TensorId,
    width: usize,
}

enum TapedExtractor {
    Mlp(Vec<(TensorId, TensorId)>),
    Concat { frozen: Vec<(TensorId, TensorId)>, trainable: Vec<(TensorId, TensorId)> },
}

enum TapedClassifier {
    Plain { heads: Vec<TapedHead> },
    Residual { old_branch: Option<TensorId>, new_branch: TensorId, heads: Vec<TapedHead> },
}

/// All logit views a training stage needs, as tape nodes.
pub struct LogitBundle {
    pub features: TensorId,
    /// Fused logits over every seen class (plain models: the logits).
    pub fused_all: TensorId,
    /// Fused old-task block; `None` at task 1.
    pub fused_old: Option<TensorId>,
    /// Fused current-task block.
    pub fused_new: TensorId,
    /// New-branch concatenated logits (plain models: same as `fused_all`).
    pub branch_all: TensorId,
    /// Old-branch logits through the old heads (plain models: old slice).
    pub primed_old: Option<TensorId>,
}

/// The four per-branch logit blocks of a residual classifier.
pub struct BranchLogits {
    pub old_branch_old_heads: Option<TensorId>,
    pub old_branch_new_head: Option<TensorId>,
    pub new_branch_old_heads: Option<TensorId>,
    pub new_branch_new_head: TensorId,
}

/// Elementwise mean of two logit blocks (the residual fusion rule).
pub fn residual_fuse(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

fn mlp_forward(
    tape: &mut Tape,
    layers: &[(TensorId, TensorId)],
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let mut cur = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        cur = tape.matmul(cur, w)?;
        cur = tape.add_row_bias(cur, b)?;
        if i + 1 < layers.len() {
            cur = tape.relu(cur);
        }
    }
    Ok(cur)
}

fn head_forward(tape: &mut Tape, head: &TapedHead, b: TensorId) -> Result<TensorId, TensorError> {
    let z = tape.matmul(b, head.weight)?;
    tape.add_row_bias(z, head.bias)
}

impl TapedModel {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.param_ids
    }

    pub fn features(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
        match &self.extractor {
            TapedExtractor::Mlp(layers) => mlp_forward(tape, layers, x),
            TapedExtractor::Concat { frozen, trainable } => {
                let f = mlp_forward(tape, frozen, x)?;
                let t = mlp_forward(tape, trainable, x)?;
                tape.concat_cols(&[f, t])
            }
        }
    }

    /// The four-block logit decomposition (residual classifiers only).
    pub fn branch_logits(
        &self,
        tape: &mut Tape,
        features: TensorId,
    ) -> Result<BranchLogits, TensorError> {
        let TapedClassifier::Residual { old_branch, new_branch, heads } = &self.classifier else {
            panic!("branch_logits requires a residual classifier");
        };
        let b_new = tape.matmul(features, *new_branch)?;
        let new_blocks: Vec<TensorId> = heads
            .iter()
            .map(|h| head_forward(tape, h, b_new))
            .collect::<Result<_, _>>()?;
        let (old_old, old_new, new_old) = match old_branch {
            Some(ob) => {
                let b_old = tape.matmul(features, *ob)?;
                let old_blocks: Vec<TensorId> = heads
                    .iter()
                    .map(|h| head_forward(tape, h, b_old))
                    .collect::<Result<_, _>>()?;
                let n = heads.len();
                let old_old = if n > 1 { Some(tape.concat_cols(&old_blocks[..n - 1])?) } else { None };
                let new_old = if n > 1 { Some(tape.concat_cols(&new_blocks[..n - 1])?) } else { None };
                (old_old, Some(old_blocks[n - 1]), new_old)
            }
            None => (None, None, None),
        };
        Ok(BranchLogits {
            old_branch_old_heads: old_old,
            old_branch_new_head: old_new,
            new_branch_old_heads: new_old,
            new_branch_new_head: new_blocks.last().copied().unwrap(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<LogitBundle, TensorError> {
        let features = self.features(tape, x)?;
        match &self.classifier {
            TapedClassifier::Plain { heads } => {
                let blocks: Vec<TensorId> = heads
                    .iter()
                    .map(|h| head_forward(tape, h, features))
                    .collect::<Result<_, _>>()?;
                let all = tape.concat_cols(&blocks)?;
                let new_width = heads.last().unwrap().width;
                let old_width: usize = heads[..heads.len() - 1].iter().map(|h| h.width).sum();
                let old = if heads.len() > 1 {
                    Some(tape.slice_cols(all, 0, old_width)?)
                } else {
                    None
                };
                let new = tape.slice_cols(all, old_width, new_width)?;
                Ok(LogitBundle {
                    features,
                    fused_all: all,
                    fused_old: old,
                    fused_new: new,
                    branch_all: all,
                    primed_old: old,
                })
            }
            TapedClassifier::Residual { old_branch, new_branch, heads } => {
                let b_new = tape.matmul(features, *new_branch)?;
                let new_blocks: Vec<TensorId> = heads
                    .iter()
                    .map(|h| head_forward(tape, h, b_new))
                    .collect::<Result<_, _>>()?;
                let branch_all = tape.concat_cols(&new_blocks)?;
                match old_branch {
                    None => Ok(LogitBundle {
                        features,
                        fused_all: branch_all,
                        fused_old: None,
                        fused_new: branch_all,
                        branch_all,
                        primed_old: None,
                    }),
                    Some(ob) => {
                        let b_old = tape.matmul(features, *ob)?;
                        let old_blocks: Vec<TensorId> = heads
                            .iter()
                            .map(|h| head_forward(tape, h, b_old))
                            .collect::<Result<_, _>>()?;
                        let fused_blocks: Vec<TensorId> = new_blocks
                            .iter()
                            .zip(&old_blocks)
                            .map(|(&n, &o)| residual_fuse(tape, n, o))
                            .collect::<Result<_, _>>()?;
                        let n = heads.len();
                        let fused_all = tape.concat_cols(&fused_blocks)?;
                        let fused_old = if n > 1 {
                            Some(tape.concat_cols(&fused_blocks[..n - 1])?)
                        } else {
                            None
                        };
                        let primed_old = if n > 1 {
                            Some(tape.concat_cols(&old_blocks[..n - 1])?)
                        } else {
                            None
                        };
                        Ok(LogitBundle {
                            features,
                            fused_all,
                            fused_old,
                            fused_new: fused_blocks[n - 1],
                            branch_all,
                            primed_old,
                        })
                    }
                }
            }
        }
    }
}

pub struct TapedModel {
    extractor: TapedExtractor,
    classifier: TapedClassifier,
    param_ids: Vec<TensorId>,
}

// ── Reference residual classifier without merging ───────────────────

/// The unmerged variant: one branch per task, all but the last frozen.
/// Kept as a test oracle; its branch parameter count grows linearly in t
/// while the merged model stays at two branches.
#[derive(Debug, Clone)]
pub struct RcModel {
    pub extractor: Extractor,
    pub branches: Vec<BranchLayer>,
    pub heads: Vec<TaskHead>,
}

/// Elementwise mean of old-branch outputs.
pub fn rc_average_old(outputs: &[Vec<f64>]) -> Vec<f64> {
    assert!(!outputs.is_empty(), "averaging zero branch outputs");
    let dim = outputs[0].len();
    let mut mean = vec![0.0; dim];
    for o in outputs {
        assert_eq!(o.len(), dim);
        for (m, v) in mean.iter_mut().zip(o) {
            *m += v / outputs.len() as f64;
        }
    }
    mean
}

pub struct RcForward {
    pub fused_all: Vec<f64>,
    pub primed_old_heads: Option<Vec<f64>>,
}

impl RcModel {
    pub fn initial(extractor: Extractor, classes: Vec<usize>, seed: u64) -> RcModel {
        let d = extractor.output_dim();
        let mut rng = seeds::rng(seed, &[stream::MODEL_INIT, 1]);
        RcModel {
            extractor,
            branches: vec![BranchLayer::identity_noise(d, IDENTITY_NOISE_SIGMA, &mut rng)],
            heads: vec![TaskHead::new(d, classes, &mut rng)],
        }
    }

    pub fn expand(&mut self, new_classes: Vec<usize>, rng: &mut ChaCha8Rng) {
        let d = self.extractor.output_dim();
        if let Some(last) = self.branches.last_mut() {
            last.weight.requires_grad = false;
        }
        self.branches.push(BranchLayer::identity_noise(d, IDENTITY_NOISE_SIGMA, rng));
        self.heads.push(TaskHead::new(d, new_classes, rng));
    }

    pub fn branch_param_count(&self) -> usize {
        self.branches.iter().map(|b| b.weight.numel()).sum()
    }

    pub fn forward_values(&self, x: &[f64]) -> RcForward {
        let f = self.extractor.forward_values(x);
        let outputs: Vec<Vec<f64>> = self.branches.iter().map(|b| b.forward_values(&f)).collect();
        let t = self.branches.len();
        let new_logits: Vec<f64> = self
            .heads
            .iter()
            .flat_map(|h| h.forward_values(outputs.last().unwrap()))
            .collect();
        if t == 1 {
            return RcForward { fused_all: new_logits, primed_old_heads: None };
        }
        let avg_old = rc_average_old(&outputs[..t - 1]);
        let old_logits: Vec<f64> =
            self.heads.iter().flat_map(|h| h.forward_values(&avg_old)).collect();
        let fused: Vec<f64> = new_logits
            .iter()
            .zip(&old_logits)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let old_width: usize = self.heads[..t - 1].iter().map(|h| h.width()).sum();
        RcForward {
            fused_all: fused,
            primed_old_heads: Some(old_logits[..old_width].to_vec()),
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    task_count: usize,
    class_counts: Vec<usize>,
    model: Model,
}

/// Serializes the model with a small manifest. f64 values round-trip
/// bit-exactly through the JSON encoding.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        task_count: model.task_count(),
        class_counts: model.heads().iter().map(|h| h.width()).collect(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&ck).expect("checkpoint serialization");
    std::fs::write(path, text).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|source| ModelError::CheckpointDecode {
            path: path.display().to_string(),
            source,
        })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion(ck.version));
    }
    Ok(ck.model)
}
