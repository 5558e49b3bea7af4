//! Test-time adaptation.
//!
//! Every test batch is an independent episode: the model is reset to its
//! source snapshot, extractor blocks `1..=J` take Adam steps that maximize
//! the summed IM objective of the frozen projectors, and predictions are
//! read off at fixed iteration checkpoints. PTBN, TENT and an eval-mode
//! control run on the same stream for comparison.
//!
//! Labels never reach the optimization path: [`adapt_episode`] and
//! [`tent_episode`] take images only, and accuracy is computed afterwards.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CorruptedBatch, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::{im_objective, LossReport};
use crate::nn::{select_trainable, BnMode, ModelBundle, TrainMode, TrainableSet};
use crate::parallel;
use crate::tensor::optim::{AdamHyper, Optimizer};
use crate::tensor::{argmax_rows, Scalar, Tape, Tensor};
use crate::train::batch_ranges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Iteration counts at which predictions are read; strictly increasing.
    pub checkpoints: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Highest extractor block that learns.
    #[serde(rename = "J")]
    pub j: usize,
    pub tent_checkpoints: Vec<usize>,
    pub tent_lr: f64,
    /// Run the PTBN, TENT and eval-mode baselines next to the adapted model.
    pub baselines: bool,
    /// Leading batches of each stream to process; `None` processes all.
    pub max_batches: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            checkpoints: vec![1, 3, 5, 10, 20, 50, 100],
            lr: 1e-5,
            batch_size: 128,
            j: 2,
            tent_checkpoints: vec![1, 3, 5, 10],
            tent_lr: 1e-3,
            baselines: true,
            max_batches: None,
        }
    }
}

fn check_checkpoints(name: &str, c: &[usize]) -> Result<()> {
    if c.is_empty() || c.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} {c:?} must be non-empty and strictly increasing")));
    }
    Ok(())
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_checkpoints("checkpoints", &self.checkpoints)?;
        check_checkpoints("tent_checkpoints", &self.tent_checkpoints)?;
        if !(self.lr > 0.0) || !(self.tent_lr > 0.0) {
            return Err(Error::Config("adaptation learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "adaptation batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.j == 0 {
            return Err(Error::Config("J must be at least 1".into()));
        }
        if self.max_batches == Some(0) {
            return Err(Error::Config("max_batches must be positive when set".into()));
        }
        Ok(())
    }

    pub fn max_iterations(&self) -> usize {
        *self.checkpoints.last().unwrap_or(&0)
    }
}

/// Mean entropies over the heads of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerEntropy {
    pub layer: usize,
    pub h_cond: f64,
    pub h_marg: f64,
}

/// Objective value at one iteration, measured before that iteration's step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub im_total: f64,
    pub layers: Vec<LayerEntropy>,
}

/// Label-free outcome of one adaptation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub checkpoints: Vec<usize>,
    /// Entry `t` describes the model after `t` steps.
    pub iterations: Vec<IterationStats>,
    /// Predictions of the model after `t` steps, for every reached `t`.
    pub predictions: Vec<Vec<usize>>,
    /// PTBN predictions of the source model.
    pub unadapted: Vec<usize>,
    /// A non-finite loss or parameter aborted the episode.
    pub diverged: bool,
}

impl Episode {
    /// Predictions at `iteration`; the unadapted ones if the episode diverged.
    pub fn predictions_at(&self, iteration: usize) -> &[usize] {
        if self.diverged {
            return &self.unadapted;
        }
        self.predictions.get(iteration).map_or(&self.unadapted, |p| p)
    }

    pub fn im_at(&self, iteration: usize) -> Option<f64> {
        self.iterations.get(iteration).map(|s| s.im_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub im_total: f64,
    pub layers: Vec<LayerEntropy>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointPrediction {
    pub iteration: usize,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Scored record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptTrace {
    pub iterations: Vec<IterationRecord>,
    pub checkpoints: Vec<CheckpointPrediction>,
    pub diverged: bool,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    correct(pred, labels) as f64 / labels.len().max(1) as f64
}

fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

impl AdaptTrace {
    /// Attaches accuracies to a finished episode.
    pub fn score(ep: &Episode, labels: &[usize]) -> Self {
        Self {
            iterations: ep
                .iterations
                .iter()
                .zip(&ep.predictions)
                .map(|(s, p)| IterationRecord {
                    iteration: s.iteration,
                    im_total: s.im_total,
                    layers: s.layers.clone(),
                    accuracy: accuracy(p, labels),
                })
                .collect(),
            checkpoints: ep
                .checkpoints
                .iter()
                .map(|&c| {
                    let p = ep.predictions_at(c);
                    CheckpointPrediction {
                        iteration: c,
                        predictions: p.to_vec(),
                        accuracy: accuracy(p, labels),
                    }
                })
                .collect(),
            diverged: ep.diverged,
        }
    }

    pub fn max_accuracy(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn source_of<T: Scalar>(model: &ModelBundle<T>) -> Result<std::sync::Arc<crate::nn::Snapshot<T>>> {
    model
        .source_snapshot()
        .ok_or_else(|| Error::Protocol("adaptation needs a source snapshot; call mark_source on the trained model".into()))
}

/// Non-trainable parameters must come out of an episode untouched.
fn check_frozen<T: Scalar>(model: &ModelBundle<T>, source: &[Tensor<T>], trainable: &TrainableSet) -> Result<()> {
    for (i, (p, v)) in model.params().iter().zip(source).enumerate() {
        if !trainable.contains(i) && !p.value.bit_eq(v) {
            return Err(Error::Protocol(format!("frozen parameter `{}` changed during adaptation", p.name)));
        }
    }
    Ok(())
}

enum Step<V> {
    Ok(V),
    NonFinite,
}

fn guard<V>(r: Result<V>) -> Result<Step<V>> {
    match r {
        Ok(v) => Ok(Step::Ok(v)),
        Err(Error::NonFinite { .. }) => Ok(Step::NonFinite),
        Err(e) => Err(e),
    }
}

/// Adapts to the images `x` and returns the label-free episode record. The
/// model is reset to its source snapshot before and after.
pub fn adapt_episode<T: Scalar>(model: &mut ModelBundle<T>, x: &Tensor<T>, cfg: &AdaptConfig) -> Result<Episode> {
    let out = adapt_in_place(model, x, cfg);
    if let Some(source) = model.source_snapshot() {
        source.restore(model)?;
    }
    let mut ep = out?;
    if ep.unadapted.is_empty() {
        ep.unadapted = baseline_ptbn(model, x)?;
    }
    Ok(ep)
}

/// Like [`adapt_episode`] but leaves the model in its adapted state.
/// `unadapted` is empty if the very first forward pass failed.
pub fn adapt_in_place<T: Scalar>(model: &mut ModelBundle<T>, x: &Tensor<T>, cfg: &AdaptConfig) -> Result<Episode> {
    cfg.validate()?;
    let source = source_of(model)?;
    if model.projectors().is_empty() {
        return Err(Error::Protocol("adaptation needs clustering projectors".into()));
    }
    let trainable = select_trainable(model, TrainMode::Adapt, cfg.j)?;
    source.restore(model)?;
    let ep = im_steps(model, x, cfg, &trainable)?;
    check_frozen(model, source.values(), &trainable)?;
    Ok(ep)
}

fn im_steps<T: Scalar>(
    model: &mut ModelBundle<T>,
    x: &Tensor<T>,
    cfg: &AdaptConfig,
    trainable: &TrainableSet,
) -> Result<Episode> {
    let last = cfg.max_iterations();
    let lambda = model.spec().projectors.lambda.clone();
    let mut opt = Optimizer::adam(AdamHyper::with_lr(cfg.lr), model.params().len());
    let mut ep = Episode {
        checkpoints: cfg.checkpoints.clone(),
        iterations: Vec::with_capacity(last + 1),
        predictions: Vec::with_capacity(last + 1),
        unadapted: Vec::new(),
        diverged: false,
    };
    for t in 0..=last {
        let mut tape = Tape::new();
        let Step::Ok(pass) = guard(model.forward(&mut tape, x, BnMode::Train, trainable))? else {
            ep.diverged = true;
            break;
        };
        let preds = argmax_rows(tape.value(pass.logits));
        if t == 0 {
            ep.unadapted = preds.clone();
        }
        let Step::Ok(im) = guard(im_objective(&mut tape, &pass.z, &lambda))? else {
            ep.diverged = true;
            break;
        };
        let report = LossReport::from_objective(&tape, &im, None, &lambda);
        if !report.im_total.is_finite() {
            ep.diverged = true;
            break;
        }
        let mut layers: Vec<usize> = report.heads.iter().map(|h| h.layer).collect();
        layers.dedup();
        ep.iterations.push(IterationStats {
            iteration: t,
            im_total: report.im_total,
            layers: layers
                .into_iter()
                .filter_map(|l| {
                    report
                        .layer_entropies(l)
                        .map(|(h_cond, h_marg)| LayerEntropy { layer: l, h_cond, h_marg })
                })
                .collect(),
        });
        ep.predictions.push(preds);
        if t == last {
            break;
        }
        let Step::Ok(mut grads) = guard(tape.backward(im.total))? else {
            ep.diverged = true;
            break;
        };
        model.store_grads(&pass, &mut grads)?;
        opt.step(model.params_mut())?;
        model.clear_grads();
        if model.params().iter().any(|p| !p.value.is_finite()) {
            ep.diverged = true;
            break;
        }
    }
    Ok(ep)
}

/// Runs one episode on a labelled batch and scores it.
pub fn adapt_batch<T: Scalar>(model: &mut ModelBundle<T>, batch: &Dataset, cfg: &AdaptConfig) -> Result<AdaptTrace> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (x, labels) = batch.batch::<T>(&idx);
    let ep = adapt_episode(model, &x, cfg)?;
    Ok(AdaptTrace::score(&ep, &labels))
}

/// Predictions with batch-norm statistics taken from `x` itself.
pub fn baseline_ptbn<T: Scalar>(model: &ModelBundle<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.predict_logits(x, BnMode::BatchOnly)?))
}

/// Predictions of the source model with its stored running statistics.
pub fn no_adapt_predictions<T: Scalar>(model: &ModelBundle<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.predict_logits(x, BnMode::Eval)?))
}

/// Label-free outcome of one TENT episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TentEpisode {
    pub checkpoints: Vec<usize>,
    /// Mean prediction entropy after `t` steps.
    pub entropy: Vec<f64>,
    pub predictions: Vec<Vec<usize>>,
    pub unadapted: Vec<usize>,
    pub diverged: bool,
}

impl TentEpisode {
    pub fn predictions_at(&self, iteration: usize) -> &[usize] {
        if self.diverged {
            return &self.unadapted;
        }
        self.predictions.get(iteration).map_or(&self.unadapted, |p| p)
    }
}

/// Entropy minimization over batch-norm scale and shift, reset per batch.
pub fn tent_episode<T: Scalar>(
    model: &mut ModelBundle<T>,
    x: &Tensor<T>,
    checkpoints: &[usize],
    lr: f64,
) -> Result<TentEpisode> {
    let out = tent_in_place(model, x, checkpoints, lr);
    if let Some(source) = model.source_snapshot() {
        source.restore(model)?;
    }
    let mut ep = out?;
    if ep.unadapted.is_empty() {
        ep.unadapted = baseline_ptbn(model, x)?;
    }
    Ok(ep)
}

/// Like [`tent_episode`] but leaves the model in its adapted state.
pub fn tent_in_place<T: Scalar>(
    model: &mut ModelBundle<T>,
    x: &Tensor<T>,
    checkpoints: &[usize],
    lr: f64,
) -> Result<TentEpisode> {
    check_checkpoints("tent_checkpoints", checkpoints)?;
    let source = source_of(model)?;
    let trainable = TrainableSet::bn_affine(model);
    source.restore(model)?;
    let ep = tent_steps(model, x, checkpoints, lr, &trainable)?;
    check_frozen(model, source.values(), &trainable)?;
    Ok(ep)
}

fn tent_steps<T: Scalar>(
    model: &mut ModelBundle<T>,
    x: &Tensor<T>,
    checkpoints: &[usize],
    lr: f64,
    trainable: &TrainableSet,
) -> Result<TentEpisode> {
    let last = *checkpoints.last().unwrap_or(&0);
    let mut opt = Optimizer::adam(AdamHyper::with_lr(lr), model.params().len());
    let mut ep = TentEpisode {
        checkpoints: checkpoints.to_vec(),
        entropy: Vec::with_capacity(last + 1),
        predictions: Vec::with_capacity(last + 1),
        unadapted: Vec::new(),
        diverged: false,
    };
    for t in 0..=last {
        let mut tape = Tape::new();
        let Step::Ok(pass) = guard(model.forward_classifier(&mut tape, x, BnMode::Train, trainable))? else {
            ep.diverged = true;
            break;
        };
        let preds = argmax_rows(tape.value(pass.logits));
        if t == 0 {
            ep.unadapted = preds.clone();
        }
        let Step::Ok(h) = guard(tape.softmax_rows(pass.logits).and_then(|p| tape.cond_entropy(p)))? else {
            ep.diverged = true;
            break;
        };
        let hv = tape.value(h).item().as_f64();
        if !hv.is_finite() {
            ep.diverged = true;
            break;
        }
        ep.entropy.push(hv);
        ep.predictions.push(preds);
        if t == last {
            break;
        }
        let Step::Ok(mut grads) = guard(tape.backward(h))? else {
            ep.diverged = true;
            break;
        };
        model.store_grads(&pass, &mut grads)?;
        opt.step(model.params_mut())?;
        model.clear_grads();
        if model.params().iter().any(|p| !p.value.is_finite()) {
            ep.diverged = true;
            break;
        }
    }
    Ok(ep)
}

/// TENT predictions after `iterations` steps.
pub fn baseline_tent<T: Scalar>(model: &mut ModelBundle<T>, x: &Tensor<T>, iterations: usize, lr: f64) -> Result<Vec<usize>> {
    let ep = tent_episode(model, x, &[iterations], lr)?;
    Ok(ep.predictions_at(iterations).to_vec())
}

/// One labelled evaluation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TestStream {
    /// Corruption name, or `none` for clean data.
    pub corruption: String,
    /// 0 for clean data.
    pub severity: u8,
    pub data: Dataset,
}

impl TestStream {
    pub fn clean(data: Dataset) -> Self {
        Self {
            corruption: "none".into(),
            severity: 0,
            data,
        }
    }

    pub fn corrupted(data: &Dataset, spec: CorruptionSpec) -> Result<Self> {
        Ok(Self::from(CorruptedBatch::from_dataset(data, spec)?))
    }
}

impl From<CorruptedBatch> for TestStream {
    fn from(b: CorruptedBatch) -> Self {
        Self {
            corruption: b.spec.kind.name().into(),
            severity: b.spec.severity,
            data: b.data,
        }
    }
}

/// Correct counts of every method on one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchResult {
    pub stream: usize,
    pub batch: usize,
    pub size: usize,
    /// Adapted-model correct count per checkpoint.
    pub correct: Vec<usize>,
    /// Summed IM objective after `t` steps.
    pub im: Vec<f64>,
    pub diverged: bool,
    pub no_adapt: Option<usize>,
    pub ptbn: Option<usize>,
    pub tent: Option<Vec<usize>>,
    pub tent_entropy: Option<Vec<f64>>,
    pub tent_diverged: bool,
    /// Per-checkpoint predictions, kept for protocol checks.
    #[serde(skip)]
    pub predictions: Vec<Vec<usize>>,
}

fn run_batch<T: Scalar>(
    model: &mut ModelBundle<T>,
    stream: &TestStream,
    si: usize,
    bi: usize,
    idx: &[usize],
    cfg: &AdaptConfig,
) -> Result<BatchResult> {
    let (x, labels) = stream.data.batch::<T>(idx);
    let ep = adapt_episode(model, &x, cfg)?;
    let predictions: Vec<Vec<usize>> = cfg.checkpoints.iter().map(|&c| ep.predictions_at(c).to_vec()).collect();
    let mut r = BatchResult {
        stream: si,
        batch: bi,
        size: idx.len(),
        correct: predictions.iter().map(|p| correct(p, &labels)).collect(),
        im: ep.iterations.iter().map(|s| s.im_total).collect(),
        diverged: ep.diverged,
        no_adapt: None,
        ptbn: None,
        tent: None,
        tent_entropy: None,
        tent_diverged: false,
        predictions,
    };
    if cfg.baselines {
        r.no_adapt = Some(correct(&no_adapt_predictions(model, &x)?, &labels));
        r.ptbn = Some(correct(&baseline_ptbn(model, &x)?, &labels));
        let tent = tent_episode(model, &x, &cfg.tent_checkpoints, cfg.tent_lr)?;
        r.tent = Some(cfg.tent_checkpoints.iter().map(|&c| correct(tent.predictions_at(c), &labels)).collect());
        r.tent_entropy = Some(tent.entropy);
        r.tent_diverged = tent.diverged;
    }
    Ok(r)
}

/// One CSV line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub corruption: String,
    pub severity: u8,
    /// Iteration count, `max`, or `0` for methods without iterations.
    pub checkpoint: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub im_before: Option<f64>,
    pub im_after: Option<f64>,
}

pub const CSV_HEADER: [&str; 8] = [
    "corruption",
    "severity",
    "checkpoint",
    "method",
    "seed",
    "accuracy",
    "im_before",
    "im_after",
];

/// Per-stream aggregate written to the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSummary {
    pub corruption: String,
    pub severity: u8,
    pub batches: usize,
    pub samples: usize,
    pub clust3: BTreeMap<usize, f64>,
    pub clust3_max: f64,
    pub clust3_best_checkpoint: usize,
    pub no_adapt: Option<f64>,
    pub ptbn: Option<f64>,
    pub tent_max: Option<f64>,
    /// Fraction of batches whose IM objective after 10 steps is below its
    /// starting value.
    pub im_decrease_at_10: Option<f64>,
    pub tent_entropy_decrease_at_10: Option<f64>,
    pub diverged_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub seed: u64,
    pub checkpoints: Vec<usize>,
    pub streams: Vec<StreamSummary>,
    pub mean_clust3_max: f64,
    pub mean_no_adapt: Option<f64>,
    pub mean_ptbn: Option<f64>,
    pub mean_tent_max: Option<f64>,
}

/// Results of a full adaptation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub seed: u64,
    pub config: AdaptConfig,
    pub streams: Vec<(String, u8)>,
    /// Sorted by `(stream, batch)`.
    pub batches: Vec<BatchResult>,
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl AdaptReport {
    fn stream_batches(&self, s: usize) -> impl Iterator<Item = &BatchResult> {
        self.batches.iter().filter(move |b| b.stream == s)
    }

    fn frac(&self, s: usize, count: impl Fn(&BatchResult) -> Option<usize>) -> Option<f64> {
        let n: usize = self.stream_batches(s).map(|b| b.size).sum();
        let c: Option<usize> = self.stream_batches(s).map(count).sum();
        c.map(|c| c as f64 / n.max(1) as f64)
    }

    /// Accuracy of the adapted model at each checkpoint of stream `s`.
    pub fn clust3_accuracy(&self, s: usize) -> Vec<f64> {
        (0..self.config.checkpoints.len())
            .map(|k| self.frac(s, |b| Some(b.correct[k])).unwrap_or(0.0))
            .collect()
    }

    fn im_means(&self, s: usize, t: usize) -> (Option<f64>, Option<f64>) {
        let bs: Vec<&BatchResult> = self.stream_batches(s).filter(|b| !b.im.is_empty()).collect();
        if bs.is_empty() {
            return (None, None);
        }
        let before = mean(&bs.iter().map(|b| b.im[0]).collect::<Vec<_>>());
        let after: Vec<f64> = bs.iter().filter_map(|b| b.im.get(t).copied()).collect();
        (Some(before), (!after.is_empty()).then(|| mean(&after)))
    }

    fn decrease_at(values: impl Iterator<Item = Option<(f64, f64)>>) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = values.collect::<Option<Vec<_>>>()?;
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.iter().filter(|(a, b)| b < a).count();
        Some(n as f64 / pairs.len() as f64)
    }

    pub fn stream_summary(&self, s: usize) -> StreamSummary {
        let (corruption, severity) = self.streams[s].clone();
        let acc = self.clust3_accuracy(s);
        let (best_k, best) = acc
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
        let tent_acc: Option<Vec<f64>> = (0..self.config.tent_checkpoints.len())
            .map(|k| self.frac(s, |b| b.tent.as_ref().map(|t| t[k])))
            .collect();
        let bs: Vec<&BatchResult> = self.stream_batches(s).collect();
        StreamSummary {
            corruption,
            severity,
            batches: bs.len(),
            samples: bs.iter().map(|b| b.size).sum(),
            clust3: self.config.checkpoints.iter().copied().zip(acc.iter().copied()).collect(),
            clust3_max: best,
            clust3_best_checkpoint: self.config.checkpoints[best_k],
            no_adapt: self.frac(s, |b| b.no_adapt),
            ptbn: self.frac(s, |b| b.ptbn),
            tent_max: tent_acc.map(|a| a.into_iter().fold(f64::NEG_INFINITY, f64::max)),
            im_decrease_at_10: Self::decrease_at(bs.iter().map(|b| Some((*b.im.first()?, *b.im.get(10)?)))),
            tent_entropy_decrease_at_10: Self::decrease_at(bs.iter().map(|b| {
                let e = b.tent_entropy.as_ref()?;
                Some((*e.first()?, *e.get(10)?))
            })),
            diverged_batches: bs.iter().filter(|b| b.diverged).count(),
        }
    }

    pub fn summary(&self) -> AdaptSummary {
        let streams: Vec<StreamSummary> = (0..self.streams.len()).map(|s| self.stream_summary(s)).collect();
        let opt_mean = |f: &dyn Fn(&StreamSummary) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = streams.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| mean(&v))
        };
        AdaptSummary {
            seed: self.seed,
            checkpoints: self.config.checkpoints.clone(),
            mean_clust3_max: mean(&streams.iter().map(|s| s.clust3_max).collect::<Vec<_>>()),
            mean_no_adapt: opt_mean(&|s| s.no_adapt),
            mean_ptbn: opt_mean(&|s| s.ptbn),
            mean_tent_max: opt_mean(&|s| s.tent_max),
            streams,
        }
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for s in 0..self.streams.len() {
            let (corruption, severity) = self.streams[s].clone();
            let row = |checkpoint: String, method: &str, accuracy: f64, im: (Option<f64>, Option<f64>)| ResultRow {
                corruption: corruption.clone(),
                severity,
                checkpoint,
                method: method.into(),
                seed: self.seed,
                accuracy,
                im_before: im.0,
                im_after: im.1,
            };
            let sum = self.stream_summary(s);
            if let Some(a) = sum.no_adapt {
                out.push(row("0".into(), "no_adapt", a, (None, None)));
            }
            if let Some(a) = sum.ptbn {
                out.push(row("0".into(), "ptbn", a, (None, None)));
            }
            for (&c, &a) in &sum.clust3 {
                out.push(row(c.to_string(), "clust3", a, self.im_means(s, c)));
            }
            out.push(row("max".into(), "clust3", sum.clust3_max, self.im_means(s, sum.clust3_best_checkpoint)));
            let tent: Option<Vec<f64>> = (0..self.config.tent_checkpoints.len())
                .map(|k| self.frac(s, |b| b.tent.as_ref().map(|t| t[k])))
                .collect();
            if let (Some(tent), Some(m)) = (tent, sum.tent_max) {
                for (&c, &a) in self.config.tent_checkpoints.iter().zip(&tent) {
                    out.push(row(c.to_string(), "tent", a, (None, None)));
                }
                out.push(row("max".into(), "tent", m, (None, None)));
            }
        }
        out
    }

    /// Results table with floats at six decimals; absent values are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
        for r in self.rows() {
            wr.write_record([
                r.corruption,
                r.severity.to_string(),
                r.checkpoint,
                r.method,
                r.seed.to_string(),
                fmt6(r.accuracy),
                opt(r.im_before),
                opt(r.im_after),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(csv_path, buf)?;
        let mut json = serde_json::to_vec_pretty(&self.summary())?;
        json.push(b'\n');
        std::fs::write(json_path, json)?;
        Ok(())
    }
}

/// Adapts to every batch of every stream. Batches run in parallel on
/// cloned models and are merged in `(stream, batch)` order.
pub fn run_ttt<T: Scalar>(model: &ModelBundle<T>, streams: &[TestStream], cfg: &AdaptConfig, seed: u64) -> Result<AdaptReport> {
    cfg.validate()?;
    source_of(model)?;
    let mut jobs = Vec::new();
    for (si, s) in streams.iter().enumerate() {
        let ranges = batch_ranges(s.data.len(), cfg.batch_size, true);
        let take = cfg.max_batches.unwrap_or(usize::MAX);
        for (bi, r) in ranges.into_iter().take(take).enumerate() {
            jobs.push((si, bi, r.collect::<Vec<usize>>()));
        }
    }
    let results: Vec<Result<BatchResult>> = parallel::pool()?.install(|| {
        jobs.par_iter()
            .map_init(
                || model.clone(),
                |m, (si, bi, idx)| run_batch(m, &streams[*si], *si, *bi, idx, cfg),
            )
            .collect()
    });
    let mut batches = results.into_iter().collect::<Result<Vec<_>>>()?;
    batches.sort_by_key(|b| (b.stream, b.batch));
    Ok(AdaptReport {
        seed,
        config: cfg.clone(),
        streams: streams.iter().map(|s| (s.corruption.clone(), s.severity)).collect(),
        batches,
    })
}
