//! Shared training core: text and image featurization, a three-class linear
//! softmax head, ADAM, early-stopping training and pseudo-labeling.
//!
//! The feature extractors (tf·idf bag of words, block-mean image
//! downsampling) are reference backends; anything implementing
//! [`Classifier`] can stand in for them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AssignedLabel, CorpusError, Label, LabelProvenance, Probs, StudyRecord};
use crate::metrics::{class_auc_report, MetricsError};
use crate::textprep::{preprocess, TokenSeq};

pub type FeatureVector = Vec<f64>;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("validation labels contain a single class ({0}); AUC-based selection is undefined")]
    DegenerateValidation(Label),
    #[error("{what}: {features} feature vectors but {labels} labels")]
    LengthMismatch { what: &'static str, features: usize, labels: usize },
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("image grid {grid:?} is larger than the {rows}x{cols} image")]
    GridTooLarge { grid: (usize, usize), rows: usize, cols: usize },
    #[error("empty image")]
    EmptyImage,
    #[error("record {0} has no pixels but the model is an image model")]
    MissingPixels(String),
    #[error("record {accession_id} already carries a {provenance} label")]
    AlreadyLabeled { accession_id: String, provenance: &'static str },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed model file: {source}")]
    ModelFormat { path: String, source: serde_json::Error },
}

// ---- text features ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    doc_freq: Vec<usize>,
    corpus_size: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.doc_freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_freq.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn doc_freq(&self, index: usize) -> usize {
        self.doc_freq[index]
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    /// Smoothed idf: ln((1 + N) / (1 + df)) + 1.
    pub fn idf(&self, index: usize) -> f64 {
        let n = self.corpus_size as f64;
        ((1.0 + n) / (1.0 + self.doc_freq[index] as f64)).ln() + 1.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }
}

/// Tokens in at least `min_df` documents, indexed lexicographically.
pub fn build_vocab<'a, I>(token_seqs: I, min_df: usize) -> Result<Vocabulary, LearnError>
where
    I: IntoIterator<Item = &'a TokenSeq>,
{
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    let mut corpus_size = 0;
    for seq in token_seqs {
        corpus_size += 1;
        let mut distinct: Vec<&str> = seq.iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        for t in distinct {
            *df.entry(t).or_default() += 1;
        }
    }
    if corpus_size == 0 {
        return Err(LearnError::EmptyCorpus);
    }
    let kept: Vec<(&str, usize)> = df.into_iter().filter(|&(_, n)| n >= min_df.max(1)).collect();
    Ok(Vocabulary {
        index: kept.iter().enumerate().map(|(i, (t, _))| (t.to_string(), i)).collect(),
        doc_freq: kept.iter().map(|&(_, n)| n).collect(),
        corpus_size,
    })
}

/// Raw-count tf times idf, L2-normalized; unknown tokens are ignored.
pub fn featurize_text(tokens: &TokenSeq, vocab: &Vocabulary) -> FeatureVector {
    let mut x = vec![0.0; vocab.len()];
    for t in tokens.iter() {
        if let Some(i) = vocab.index_of(t) {
            x[i] += 1.0;
        }
    }
    for (i, v) in x.iter_mut().enumerate() {
        if *v != 0.0 {
            *v *= vocab.idf(i);
        }
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

// ---- image features ----

/// Affine min-max map onto [0, 255]; a constant image maps to zeros.
pub fn normalize_pixels(raw: &[f64]) -> Result<Vec<f64>, LearnError> {
    if raw.is_empty() {
        return Err(LearnError::EmptyImage);
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite("pixels"));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect())
}

/// Block means over a `grid` partition of a row-major image, scaled by 1/255.
/// Block edges are at floor(i·rows/gr) so uneven sizes are covered exactly.
pub fn featurize_image(
    pixels: &[f64],
    rows: usize,
    cols: usize,
    grid: (usize, usize),
) -> Result<FeatureVector, LearnError> {
    let (gr, gc) = grid;
    if rows == 0 || cols == 0 || pixels.len() != rows * cols {
        return Err(LearnError::EmptyImage);
    }
    if gr == 0 || gc == 0 || gr > rows || gc > cols {
        return Err(LearnError::GridTooLarge { grid, rows, cols });
    }
    let mut out = Vec::with_capacity(gr * gc);
    for bi in 0..gr {
        let (r0, r1) = (bi * rows / gr, (bi + 1) * rows / gr);
        for bj in 0..gc {
            let (c0, c1) = (bj * cols / gc, (bj + 1) * cols / gc);
            let mut sum = 0.0;
            for r in r0..r1 {
                sum += pixels[r * cols + c0..r * cols + c1].iter().sum::<f64>();
            }
            out.push(sum / ((r1 - r0) * (c1 - c0)) as f64 / 255.0);
        }
    }
    Ok(out)
}

// ---- model ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "feature_kind", rename_all = "snake_case")]
pub enum FeatureSpace {
    Text { vocabulary: Vocabulary },
    Image { grid: (usize, usize) },
}

impl FeatureSpace {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSpace::Text { vocabulary } => vocabulary.len(),
            FeatureSpace::Image { grid } => grid.0 * grid.1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FeatureSpace::Text { .. } => "text",
            FeatureSpace::Image { .. } => "image",
        }
    }

    pub fn featurize(&self, record: &StudyRecord) -> Result<FeatureVector, LearnError> {
        match self {
            FeatureSpace::Text { vocabulary } => Ok(featurize_text(&preprocess(&record.report_text), vocabulary)),
            FeatureSpace::Image { grid } => {
                let px = record
                    .pixels
                    .as_ref()
                    .ok_or_else(|| LearnError::MissingPixels(record.accession_id.clone()))?;
                let raw: Vec<f64> = px.data().iter().map(|&v| f64::from(v)).collect();
                featurize_image(&normalize_pixels(&raw)?, px.rows(), px.cols(), *grid)
            }
        }
    }
}

/// Three output units over a D-dimensional feature vector. Weights are row-major 3×D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    pub space: FeatureSpace,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: [f64; 3],
    pub train_config: Option<TrainConfig>,
}

impl LinearSoftmaxModel {
    pub fn zeros(space: FeatureSpace) -> Self {
        let dim = space.dim();
        Self { space, dim, weights: vec![0.0; 3 * dim], bias: [0.0; 3], train_config: None }
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 3] {
        logits(&self.weights, &self.bias, x)
    }

    pub fn check(&self) -> Result<(), LearnError> {
        if self.weights.len() != 3 * self.dim || self.space.dim() != self.dim {
            return Err(LearnError::DimensionMismatch { expected: 3 * self.space.dim(), got: self.weights.len() });
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, text + "\n").map_err(|source| LearnError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| LearnError::Io { path: p.clone(), source })?;
        let model: Self = serde_json::from_str(&text).map_err(|source| LearnError::ModelFormat { path: p, source })?;
        model.check()?;
        Ok(model)
    }
}

fn logits(w: &[f64], b: &[f64; 3], x: &[f64]) -> [f64; 3] {
    let d = x.len();
    let mut z = *b;
    for (k, zk) in z.iter_mut().enumerate() {
        *zk += w[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    z
}

fn softmax(z: [f64; 3]) -> Probs {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

pub fn predict_proba(model: &LinearSoftmaxModel, x: &[f64]) -> Result<Probs, LearnError> {
    if x.len() != model.dim {
        return Err(LearnError::DimensionMismatch { expected: model.dim, got: x.len() });
    }
    Ok(softmax(model.logits(x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct XentGrad {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: [f64; 3],
}

/// Adds this example's gradient into `gw`/`gb` and returns its loss.
fn accumulate_xent(w: &[f64], b: &[f64; 3], x: &[f64], y: Label, gw: &mut [f64], gb: &mut [f64; 3]) -> f64 {
    let z = logits(w, b, x);
    let m = z[0].max(z[1]).max(z[2]);
    let log_sum = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let p = softmax(z);
    let d = x.len();
    for k in 0..3 {
        let delta = p[k] - if k == y.index() { 1.0 } else { 0.0 };
        gb[k] += delta;
        if delta != 0.0 {
            for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                *g += delta * xi;
            }
        }
    }
    log_sum - z[y.index()]
}

/// Cross-entropy −ln p[label] and its gradient; log-sum-exp is max-shifted.
pub fn softmax_xent(model: &LinearSoftmaxModel, x: &[f64], label: Label) -> Result<XentGrad, LearnError> {
    if x.len() != model.dim {
        return Err(LearnError::DimensionMismatch { expected: model.dim, got: x.len() });
    }
    let mut grad_weights = vec![0.0; model.weights.len()];
    let mut grad_bias = [0.0; 3];
    let loss = accumulate_xent(&model.weights, &model.bias, x, label, &mut grad_weights, &mut grad_bias);
    Ok(XentGrad { loss, grad_weights, grad_bias })
}

// ---- optimizer ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamParams) {
    assert_eq!(params.len(), grads.len(), "adam: parameter/gradient shape");
    assert_eq!(params.len(), state.m.len(), "adam: parameter/state shape");
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

// ---- training ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Weighted one-vs-rest AUC on the validation set (higher is better).
    #[default]
    ValWauc,
    /// Mean validation cross-entropy (lower is better); usable on single-class validation sets.
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate_grid: Vec<f64>,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam: AdamParams,
    #[serde(default)]
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate_grid: vec![1e-2, 1e-3],
            batch_size: 16,
            patience: 15,
            max_epochs: 500,
            seed: 0,
            adam: AdamParams::default(),
            selection: SelectionMetric::ValWauc,
        }
    }
}

impl TrainConfig {
    pub fn text_default() -> Self {
        Self::default()
    }

    pub fn image_default() -> Self {
        Self { patience: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::InvalidConfig(m));
        if self.learning_rate_grid.is_empty() {
            return bad("learning-rate grid is empty".into());
        }
        if let Some(lr) = self.learning_rate_grid.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return bad(format!("learning rate {lr} is not positive"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad(format!("adam betas ({}, {}) must lie in (0, 1)", a.beta1, a.beta2));
        }
        if !(a.epsilon.is_finite() && a.epsilon > 0.0) {
            return bad(format!("adam epsilon {} must be positive", a.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub features: &'a [FeatureVector],
    pub labels: &'a [Label],
}

impl<'a> Dataset<'a> {
    pub fn new(features: &'a [FeatureVector], labels: &'a [Label]) -> Self {
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub learning_rate: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Selection metric on the validation set per epoch.
    pub val_metric: Vec<f64>,
    /// 1-based epoch of the kept checkpoint.
    pub best_epoch: usize,
    pub best_value: f64,
}

impl GridRun {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub selection: SelectionMetric,
    pub runs: Vec<GridRun>,
    pub selected: usize,
}

impl TrainLog {
    pub fn best(&self) -> &GridRun {
        &self.runs[self.selected]
    }
}

fn check_dataset(what: &'static str, d: &Dataset, dim: usize) -> Result<(), LearnError> {
    if d.features.len() != d.labels.len() {
        return Err(LearnError::LengthMismatch { what, features: d.features.len(), labels: d.labels.len() });
    }
    for x in d.features {
        if x.len() != dim {
            return Err(LearnError::DimensionMismatch { expected: dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("features"));
        }
    }
    Ok(())
}

/// Trains one model per grid learning rate (concurrently) and keeps the best checkpoint.
pub fn train(
    space: FeatureSpace,
    train_set: Dataset,
    val_set: Dataset,
    config: &TrainConfig,
) -> Result<(LinearSoftmaxModel, TrainLog), LearnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(LearnError::EmptyTrainSet);
    }
    if val_set.is_empty() {
        return Err(LearnError::EmptyValidationSet);
    }
    let dim = space.dim();
    check_dataset("training set", &train_set, dim)?;
    check_dataset("validation set", &val_set, dim)?;
    if config.selection == SelectionMetric::ValWauc {
        let first = val_set.labels[0];
        if val_set.labels.iter().all(|&l| l == first) {
            return Err(LearnError::DegenerateValidation(first));
        }
    }

    let results: Vec<Result<(Vec<f64>, [f64; 3], GridRun), LearnError>> = config
        .learning_rate_grid
        .par_iter()
        .enumerate()
        .map(|(i, &lr)| train_one(dim, train_set, val_set, config, lr, i as u64))
        .collect();
    let mut runs = Vec::new();
    let mut params = Vec::new();
    for r in results {
        let (w, b, run) = r?;
        params.push((w, b));
        runs.push(run);
    }
    let mut selected = 0;
    for (i, run) in runs.iter().enumerate() {
        if better(config.selection, run.best_value, runs[selected].best_value) {
            selected = i;
        }
    }
    let (weights, bias) = params.swap_remove(selected);
    let model = LinearSoftmaxModel { space, dim, weights, bias, train_config: Some(config.clone()) };
    Ok((model, TrainLog { selection: config.selection, runs, selected }))
}

fn better(metric: SelectionMetric, candidate: f64, incumbent: f64) -> bool {
    match metric {
        SelectionMetric::ValWauc => candidate > incumbent,
        SelectionMetric::ValLoss => candidate < incumbent,
    }
}

/// Selection value and mean validation loss.
fn evaluate(metric: SelectionMetric, w: &[f64], b: &[f64; 3], val: &Dataset) -> Result<(f64, f64), LearnError> {
    let mut probs = Vec::with_capacity(val.len());
    let mut loss = 0.0;
    for (x, &y) in val.features.iter().zip(val.labels) {
        let p = softmax(logits(w, b, x));
        loss -= p[y.index()].max(f64::MIN_POSITIVE).ln();
        probs.push(p);
    }
    loss /= val.len() as f64;
    match metric {
        SelectionMetric::ValWauc => Ok((class_auc_report(&probs, val.labels)?.wauc, loss)),
        SelectionMetric::ValLoss => Ok((loss, loss)),
    }
}

type Checkpoint = (Vec<f64>, [f64; 3], GridRun);

fn train_one(
    dim: usize,
    train_set: Dataset,
    val_set: Dataset,
    config: &TrainConfig,
    lr: f64,
    stream: u64,
) -> Result<Checkpoint, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n_w = 3 * dim;
    // weights then bias, flat, so one ADAM state covers both
    let mut params = vec![0.0; n_w + 3];
    let mut state = AdamState::new(n_w + 3);
    let mut grads = vec![0.0; n_w + 3];
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut run = GridRun {
        learning_rate: lr,
        train_loss: Vec::new(),
        val_metric: Vec::new(),
        best_epoch: 0,
        best_value: match config.selection {
            SelectionMetric::ValWauc => f64::NEG_INFINITY,
            SelectionMetric::ValLoss => f64::INFINITY,
        },
    };
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let (w, b) = params.split_at(n_w);
            let b: [f64; 3] = b.try_into().expect("3 biases");
            let (gw, gb) = grads.split_at_mut(n_w);
            let gb: &mut [f64; 3] = gb.try_into().expect("3 biases");
            for &i in batch {
                epoch_loss += accumulate_xent(w, &b, &train_set.features[i], train_set.labels[i], gw, gb);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grads, &mut state, lr, &config.adam);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("parameters during training"));
        }
        run.train_loss.push(epoch_loss / train_set.len() as f64);

        let (w, b) = params.split_at(n_w);
        let (value, val_loss) = evaluate(config.selection, w, &b.try_into().expect("3 biases"), &val_set)?;
        run.val_metric.push(value);
        if better(config.selection, value, run.best_value) {
            run.best_value = value;
            run.best_epoch = epoch;
            best_loss = val_loss;
            best.copy_from_slice(&params);
            stale = 0;
        } else {
            // a tie on the metric keeps the better-calibrated parameters but
            // does not count as progress
            if value == run.best_value && val_loss < best_loss {
                run.best_epoch = epoch;
                best_loss = val_loss;
                best.copy_from_slice(&params);
            }
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let bias: [f64; 3] = best[n_w..].try_into().expect("3 biases");
    best.truncate(n_w);
    Ok((best, bias, run))
}

// ---- pluggable boundary ----

/// What the pipeline needs from a classifier backend.
pub trait Classifier: Sync {
    fn feature_kind(&self) -> &'static str;
    fn featurize(&self, record: &StudyRecord) -> Result<FeatureVector, LearnError>;
    fn predict_proba(&self, features: &[f64]) -> Result<Probs, LearnError>;
}

impl Classifier for LinearSoftmaxModel {
    fn feature_kind(&self) -> &'static str {
        self.space.kind()
    }

    fn featurize(&self, record: &StudyRecord) -> Result<FeatureVector, LearnError> {
        self.space.featurize(record)
    }

    fn predict_proba(&self, features: &[f64]) -> Result<Probs, LearnError> {
        predict_proba(self, features)
    }
}

/// Probability vectors for a batch of records.
pub fn predict_records<C: Classifier + ?Sized>(model: &C, records: &[StudyRecord]) -> Result<Vec<Probs>, LearnError> {
    records
        .par_iter()
        .map(|r| model.predict_proba(&model.featurize(r)?))
        .collect()
}

/// Label every record with the argmax class, carrying the probabilities as
/// provenance. Records that already hold a manual or rule label are refused.
pub fn pseudo_label<C: Classifier + ?Sized>(model: &C, records: &[StudyRecord]) -> Result<Vec<StudyRecord>, LearnError> {
    for r in records {
        if let Some(l) = &r.label {
            if !matches!(l.provenance, LabelProvenance::Pseudo { .. }) {
                return Err(LearnError::AlreadyLabeled {
                    accession_id: r.accession_id.clone(),
                    provenance: l.provenance.kind(),
                });
            }
        }
    }
    let probs = predict_records(model, records)?;
    records
        .iter()
        .zip(probs)
        .map(|(r, p)| {
            let mut out = r.clone();
            out.label = Some(AssignedLabel::pseudo(p)?);
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorSpec};
    use crate::textprep::tokenize;
    use proptest::prelude::*;

    fn seq(s: &str) -> TokenSeq {
        tokenize(s, 512)
    }

    fn image_space(d: usize) -> FeatureSpace {
        FeatureSpace::Image { grid: (1, d) }
    }

    #[test]
    fn vocab_threshold_and_order() {
        let docs = [seq("knee joint effusion"), seq("knee fracture"), seq("zebra")];
        let v = build_vocab(&docs, 2).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["knee"]);
        let v = build_vocab(&docs, 1).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["effusion", "fracture", "joint", "knee", "zebra"]);
        assert_eq!(v.index_of("joint"), Some(2));
        assert_eq!(build_vocab(&docs, 1).unwrap(), v);
        assert!(matches!(build_vocab(&[], 1), Err(LearnError::EmptyCorpus)));
    }

    #[test]
    fn tfidf_hand_fixture() {
        // N = 3; df(a) = 3, df(b) = 2, df(c) = 1
        let docs = [seq("a b"), seq("a a b c"), seq("a")];
        let v = build_vocab(&docs, 1).unwrap();
        let idf_a = 1.0;
        let idf_b = (4.0f64 / 3.0).ln() + 1.0;
        let idf_c = (4.0f64 / 2.0).ln() + 1.0;
        let raw = [2.0 * idf_a, idf_b, idf_c];
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let x = featurize_text(&docs[1], &v);
        for (got, want) in x.iter().zip(raw.iter().map(|r| r / norm)) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn tfidf_oov_and_scale() {
        let v = build_vocab(&[seq("knee"), seq("hip knee")], 1).unwrap();
        assert!(featurize_text(&seq("novel words only"), &v).iter().all(|&x| x == 0.0));
        let one = featurize_text(&seq("knee"), &v);
        let many = featurize_text(&seq("knee knee knee knee"), &v);
        assert_eq!(one, many);
        assert!((one.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pixels(&[0.0, 1.0, 0.5]).unwrap(), vec![0.0, 255.0, 127.5]);
        assert_eq!(normalize_pixels(&[7.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_pixels(&[-2.0, 0.0, 2.0]).unwrap(), vec![0.0, 127.5, 255.0]);
        assert!(matches!(normalize_pixels(&[1.0, f64::NAN]), Err(LearnError::NonFinite(_))));
    }

    #[test]
    fn image_featurize_examples() {
        assert_eq!(featurize_image(&[255.0; 16], 4, 4, (2, 2)).unwrap(), vec![1.0; 4]);
        // 2x2 blocks alternating 0 / 255
        let mut px = vec![0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                if (r / 2 + c / 2) % 2 == 1 {
                    px[r * 4 + c] = 255.0;
                }
            }
        }
        assert_eq!(featurize_image(&px, 4, 4, (2, 2)).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        let id: Vec<f64> = (0..6).map(|i| i as f64 * 51.0).collect();
        let f = featurize_image(&id, 2, 3, (2, 3)).unwrap();
        assert_eq!(f, id.iter().map(|v| v / 255.0).collect::<Vec<_>>());
        assert!(matches!(featurize_image(&id, 2, 3, (3, 3)), Err(LearnError::GridTooLarge { .. })));
        // uneven blocks: 3 columns into 2 -> widths 1 and 2
        assert_eq!(featurize_image(&[0.0, 255.0, 0.0], 1, 3, (1, 2)).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn xent_uniform_and_limit() {
        let m = LinearSoftmaxModel::zeros(image_space(4));
        let g = softmax_xent(&m, &[0.3, -1.0, 2.0, 0.0], Label::Abnormal).unwrap();
        assert!((g.loss - 3f64.ln()).abs() < 1e-12);
        assert!((g.loss - 1.098612).abs() < 1e-6);

        let mut m = LinearSoftmaxModel::zeros(image_space(1));
        let mut prev = f64::INFINITY;
        for logit in [0.0, 1.0, 5.0, 10.0, 30.0] {
            m.bias = [0.0, logit, 0.0];
            let loss = softmax_xent(&m, &[0.0], Label::Abnormal).unwrap().loss;
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
        m.bias = [0.0, 1000.0, -1000.0];
        let g = softmax_xent(&m, &[0.0], Label::Arthroplasty).unwrap();
        assert!(g.loss.is_finite() && (g.loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let d = rng.random_range(1..8);
            let mut m = LinearSoftmaxModel::zeros(image_space(d));
            m.weights.iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
            m.bias.iter_mut().for_each(|b| *b = rng.random_range(-2.0..2.0));
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = Label::from_index(rng.random_range(0..3)).unwrap();
            let g = softmax_xent(&m, &x, y).unwrap();
            let loss_at = |m: &LinearSoftmaxModel| softmax_xent(m, &x, y).unwrap().loss;
            for i in 0..m.weights.len() + 3 {
                let mut plus = m.clone();
                let mut minus = m.clone();
                let analytic = if i < m.weights.len() {
                    plus.weights[i] += h;
                    minus.weights[i] -= h;
                    g.grad_weights[i]
                } else {
                    plus.bias[i - m.weights.len()] += h;
                    minus.bias[i - m.weights.len()] -= h;
                    g.grad_bias[i - m.weights.len()]
                };
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_examples() {
        let hp = AdamParams::default();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &hp);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);

        let lr = 0.01;
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.5, 1e-3], &mut s, lr, &hp);
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * lr).abs() <= 1e-6 * lr + 1e-5 * lr, "{v}");
        }
        assert_eq!(p[0], -p[1] * 1.0 + (p[0] + p[1]));
        let mut q = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut q, &[0.7, -0.7], &mut s, lr, &hp);
        assert_eq!(q[0], -q[1]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        let hp = AdamParams::default();
        for g in [1.0, -4.0, 0.25] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.5, &hp);
            let want = -0.5 * g / (g.abs() + hp.epsilon);
            assert!((p[0] - want).abs() < 1e-15);
            assert!((p[0] + 0.5 * g.signum()).abs() <= 1e-6 * 0.5);
        }
    }

    #[test]
    fn predict_uniform_and_shift_invariant() {
        let mut m = LinearSoftmaxModel::zeros(image_space(2));
        let p = predict_proba(&m, &[0.4, 0.9]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        m.weights = vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1];
        m.bias = [0.1, 0.2, -0.3];
        let before = predict_proba(&m, &[0.4, 0.9]).unwrap();
        m.bias = m.bias.map(|b| b + 5.0);
        let after = predict_proba(&m, &[0.4, 0.9]).unwrap();
        for (a, b) in before.iter().zip(after) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(predict_proba(&m, &[1.0]), Err(LearnError::DimensionMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate_grid.clear();
        assert!(matches!(c.validate(), Err(LearnError::InvalidConfig(_))));
        let c = TrainConfig { patience: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { adam: AdamParams { beta1: 1.0, ..Default::default() }, ..Default::default() };
        assert!(c.validate().is_err());
        // small learning rates are allowed
        let c = TrainConfig { learning_rate_grid: vec![1e-5, 5e-5], ..Default::default() };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overfit_one_point() {
        let x = vec![vec![1.0, 0.5]];
        let y = vec![Label::Arthroplasty];
        let cfg = TrainConfig {
            learning_rate_grid: vec![0.5],
            selection: SelectionMetric::ValLoss,
            patience: 5,
            max_epochs: 200,
            ..Default::default()
        };
        let (m, _) = train(image_space(2), Dataset::new(&x, &y), Dataset::new(&x, &y), &cfg).unwrap();
        assert!(predict_proba(&m, &x[0]).unwrap()[2] > 0.9);
        // AUC selection cannot work on a single-class validation set
        let cfg = TrainConfig { selection: SelectionMetric::ValWauc, ..cfg };
        assert!(matches!(
            train(image_space(2), Dataset::new(&x, &y), Dataset::new(&x, &y), &cfg),
            Err(LearnError::DegenerateValidation(Label::Arthroplasty))
        ));
    }

    #[test]
    fn constant_val_metric_stops_after_patience_plus_one() {
        // features carry no information, so every model ranks val identically (all ties)
        let x = vec![vec![0.0]; 6];
        let y = vec![Label::Normal, Label::Abnormal, Label::Arthroplasty, Label::Normal, Label::Abnormal, Label::Arthroplasty];
        let vx = vec![vec![1.0]; 3];
        let vy = vec![Label::Normal, Label::Abnormal, Label::Arthroplasty];
        let cfg = TrainConfig { patience: 4, learning_rate_grid: vec![0.1, 0.01], ..Default::default() };
        let (_, log) = train(image_space(1), Dataset::new(&x, &y), Dataset::new(&vx, &vy), &cfg).unwrap();
        for run in &log.runs {
            assert_eq!(run.epochs_run(), 5);
            assert_eq!(run.best_epoch, 1);
            assert!(run.val_metric.iter().all(|&v| v == 0.5));
        }
        assert_eq!(log.selected, 0);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let x = vec![vec![0.0]];
        let y = vec![Label::Normal];
        let vx = vec![vec![0.0], vec![1.0]];
        let vy = vec![Label::Normal, Label::Abnormal];
        let s = image_space(1);
        let cfg = TrainConfig { learning_rate_grid: vec![], ..Default::default() };
        assert!(matches!(train(s.clone(), Dataset::new(&x, &y), Dataset::new(&vx, &vy), &cfg), Err(LearnError::InvalidConfig(_))));
        let cfg = TrainConfig::default();
        assert!(matches!(train(s.clone(), Dataset::new(&[], &[]), Dataset::new(&vx, &vy), &cfg), Err(LearnError::EmptyTrainSet)));
        let bad = vec![vec![0.0, 1.0]];
        assert!(matches!(train(s, Dataset::new(&bad, &y), Dataset::new(&vx, &vy), &cfg), Err(LearnError::DimensionMismatch { .. })));
    }

    fn text_split(noise: f64, n: usize, seed: u64) -> (Vec<TokenSeq>, Vec<Label>) {
        let spec = GeneratorSpec { n_records: n, noise_rate: noise, ..Default::default() };
        let g = generate(&spec, seed).unwrap();
        let seqs = g.records.iter().map(|r| preprocess(&r.report_text)).collect();
        (seqs, g.truth.clone())
    }

    fn fit_text_labeler(noise: f64) -> LinearSoftmaxModel {
        let (tr, ty) = text_split(noise, 400, 1);
        let (va, vy) = text_split(noise, 150, 2);
        let vocab = build_vocab(&tr, 1).unwrap();
        let fx = |s: &[TokenSeq]| s.iter().map(|t| featurize_text(t, &vocab)).collect::<Vec<_>>();
        let (trx, vax) = (fx(&tr), fx(&va));
        let cfg = TrainConfig { max_epochs: 80, ..Default::default() };
        let (m, log) = train(FeatureSpace::Text { vocabulary: vocab.clone() }, Dataset::new(&trx, &ty), Dataset::new(&vax, &vy), &cfg).unwrap();
        if noise == 0.0 {
            assert_eq!(log.best().best_value, 1.0);
        }
        m
    }

    #[test]
    fn separable_text_reaches_perfect_val_wauc_and_labels_held_out() {
        let m = fit_text_labeler(0.0);
        let spec = GeneratorSpec { n_records: 100, noise_rate: 0.0, ..Default::default() };
        let held = generate(&spec, 99).unwrap();
        let mut unlabeled = held.records.clone();
        unlabeled.iter_mut().for_each(|r| r.label = None);
        let labeled = pseudo_label(&m, &unlabeled).unwrap();
        let correct = labeled
            .iter()
            .zip(&held.truth)
            .filter(|(r, t)| r.label.as_ref().unwrap().value == **t)
            .count();
        assert!(correct as f64 / 100.0 >= 0.95, "accuracy {correct}/100");
        for r in &labeled {
            let l = r.label.as_ref().unwrap();
            let LabelProvenance::Pseudo { probs } = l.provenance else { panic!("not pseudo") };
            assert_eq!(l.value, Label::argmax(&probs));
        }
        // a signal document never seen in training
        let doc = held.records.iter().position(|r| r.report_text.contains("arthroplasty")).unwrap();
        let x = m.featurize(&held.records[doc]).unwrap();
        assert_eq!(Label::argmax(&predict_proba(&m, &x).unwrap()), held.truth[doc]);
    }

    #[test]
    fn training_is_bit_deterministic_and_bounded() {
        let (tr, ty) = text_split(0.05, 200, 5);
        let (va, vy) = text_split(0.05, 80, 6);
        let vocab = build_vocab(&tr, 2).unwrap();
        let fx = |s: &[TokenSeq]| s.iter().map(|t| featurize_text(t, &vocab)).collect::<Vec<_>>();
        let (trx, vax) = (fx(&tr), fx(&va));
        let cfg = TrainConfig { max_epochs: 40, patience: 5, seed: 9, ..Default::default() };
        let space = FeatureSpace::Text { vocabulary: vocab.clone() };
        let a = train(space.clone(), Dataset::new(&trx, &ty), Dataset::new(&vax, &vy), &cfg).unwrap();
        let b = train(space, Dataset::new(&trx, &ty), Dataset::new(&vax, &vy), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        for run in &a.1.runs {
            assert!(run.epochs_run() <= run.best_epoch + cfg.patience + 1);
        }
    }

    #[test]
    fn novel_tokens_get_no_feature() {
        let train_docs = [seq("knee effusion"), seq("knee")];
        let v = build_vocab(&train_docs, 1).unwrap();
        let x = featurize_text(&seq("knee meniscus chondrocalcinosis"), &v);
        assert_eq!(x.len(), 2);
        assert!(v.index_of("meniscus").is_none());
    }

    #[test]
    fn pseudo_label_tie_break_and_refusal() {
        let mut m = LinearSoftmaxModel::zeros(FeatureSpace::Text { vocabulary: build_vocab(&[seq("x")], 1).unwrap() });
        let p = [0.4f64, 0.4, 0.2];
        m.bias = p.map(f64::ln);
        let spec = GeneratorSpec { n_records: 3, ..Default::default() };
        let mut recs = generate(&spec, 1).unwrap().records;
        recs.iter_mut().for_each(|r| r.label = None);
        let out = pseudo_label(&m, &recs).unwrap();
        assert!(out.iter().all(|r| r.label.as_ref().unwrap().value == Label::Normal));

        m.bias = [0.1f64, 0.7, 0.2].map(f64::ln);
        let out = pseudo_label(&m, &out).unwrap();
        assert!(out.iter().all(|r| r.label.as_ref().unwrap().value == Label::Abnormal));

        recs[1].label = Some(AssignedLabel::rule(Label::Normal));
        match pseudo_label(&m, &recs) {
            Err(LearnError::AlreadyLabeled { accession_id, .. }) => assert_eq!(accession_id, recs[1].accession_id),
            other => panic!("{other:?}"),
        }
        recs[1].label = Some(AssignedLabel::manual(Label::Normal));
        assert!(pseudo_label(&m, &recs).is_err());
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let mut m = LinearSoftmaxModel::zeros(FeatureSpace::Image { grid: (2, 2) });
        m.weights = (0..12).map(|i| (i as f64 * 0.1).sin() / 3.0).collect();
        m.bias = [1.0 / 3.0, -2.0f64.sqrt(), 1e-300];
        m.train_config = Some(TrainConfig::image_default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = LinearSoftmaxModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(predict_proba(&back, &x).unwrap(), predict_proba(&m, &x).unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"feature_kind\": \"image\""));
        assert!(matches!(LinearSoftmaxModel::load(&dir.path().join("none")), Err(LearnError::Io { .. })));
    }

    proptest! {
        #[test]
        fn probabilities_on_simplex(
            w in proptest::collection::vec(-5.0f64..5.0, 9),
            b in proptest::array::uniform3(-5.0f64..5.0),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let mut m = LinearSoftmaxModel::zeros(image_space(3));
            m.weights = w;
            m.bias = b;
            let p = predict_proba(&m, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // strictly inside only while 1 - e^-spread is representable
            let z = m.logits(&x);
            let spread = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
            if spread < 30.0 {
                prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn text_features_unit_or_zero(doc in "[a-e ]{0,40}") {
            let v = build_vocab(&[seq("a b c"), seq("c d")], 1).unwrap();
            let x = featurize_text(&seq(&doc), &v);
            let n = x.iter().map(|v| v * v).sum::<f64>();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn image_features_in_unit_interval(raw in proptest::collection::vec(-100.0f64..100.0, 36), g in 1usize..6) {
            let px = normalize_pixels(&raw).unwrap();
            prop_assert!(px.iter().all(|&v| (0.0..=255.0).contains(&v)));
            let f = featurize_image(&px, 6, 6, (g, g)).unwrap();
            prop_assert_eq!(f.len(), g * g);
            prop_assert!(f.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
