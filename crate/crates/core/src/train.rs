//! Joint source training: cross-entropy on the classifier plus the summed
//! information loss of every projector head, SGD with momentum and a
//! step-decay schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::nn::{BnMode, ModelBundle, ModelSpec, TrainableSet};
use crate::tensor::checkpoint::{self, Entry};
use crate::tensor::optim::{Optimizer, SgdHyper};
use crate::tensor::{argmax_rows, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` after which the learning rate decays.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.4, 0.7],
            lr_decay: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("train.lr must be positive, momentum in [0, 1), weight_decay ≥ 0");
        }
        if self.milestones.iter().any(|&f| !(f > 0.0 && f < 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("train.milestones must be strictly increasing fractions in (0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// Epoch indices (0-based) at which a decay takes effect: `⌈f·epochs⌉`,
    /// keeping only those below `epochs`.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .milestones
            .iter()
            .map(|f| (f * self.epochs as f64).ceil() as usize)
            .filter(|&e| e < self.epochs)
            .collect();
        out.dedup();
        out
    }

    /// Learning rate used throughout 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestone_epochs().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    /// Mean information loss per projector head.
    pub im: f64,
    pub total: f64,
    pub h_cond: f64,
    pub h_marg: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

impl EvalResult {
    pub fn score(predictions: Vec<usize>, labels: &[usize], num_classes: usize) -> Self {
        let mut hit = vec![0usize; num_classes];
        let mut seen = vec![0usize; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            seen[y] += 1;
            hit[y] += usize::from(p == y);
        }
        let correct: usize = hit.iter().sum();
        Self {
            accuracy: correct as f64 / labels.len().max(1) as f64,
            per_class: hit
                .iter()
                .zip(&seen)
                .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
                .collect(),
            predictions,
        }
    }
}

/// Consecutive index ranges of at most `batch` items. With batch statistics
/// a trailing single item is folded into the previous range.
pub fn batch_ranges(n: usize, batch: usize, batch_stats: bool) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if batch_stats && out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Argmax predictions of `model` on `ds`; running statistics are never touched.
pub fn predict<T: Scalar>(model: &ModelBundle<T>, ds: &Dataset, mode: BnMode, batch: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    for r in batch_ranges(ds.len(), batch, mode.uses_batch_stats()) {
        let idx: Vec<usize> = r.collect();
        let (x, _) = ds.batch::<T>(&idx);
        preds.extend(argmax_rows(&model.predict_logits(&x, mode)?));
    }
    Ok(preds)
}

pub fn evaluate<T: Scalar>(model: &ModelBundle<T>, ds: &Dataset, mode: BnMode, batch: usize) -> Result<EvalResult> {
    Ok(EvalResult::score(predict(model, ds, mode, batch)?, &ds.labels, ds.num_classes))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Stateful joint trainer; one call to [`Trainer::step_epoch`] per epoch.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: ModelBundle<T>,
    pub config: TrainConfig,
    optimizer: Optimizer<T>,
    epoch: usize,
}

#[derive(Default)]
struct Sums {
    n: f64,
    ce: f64,
    im: f64,
    total: f64,
    h_cond: f64,
    h_marg: f64,
    correct: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelBundle<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.spec().validate()?;
        let optimizer = Optimizer::sgd(
            SgdHyper {
                lr: config.lr,
                momentum: config.momentum,
                weight_decay: config.weight_decay,
            },
            model.params().len(),
        );
        Ok(Self {
            model,
            config,
            optimizer,
            epoch: 0,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    /// Runs one epoch over `train` in seeded shuffled order, then measures
    /// test accuracy with running statistics.
    pub fn step_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let e = self.epoch;
        let lr = self.config.lr_at(e);
        self.optimizer.set_lr(lr);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SHUFFLE_STREAM, e as u64)));
        let all = TrainableSet::all(&self.model);
        let lambda = self.model.spec().projectors.lambda.clone();
        let mut s = Sums::default();
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let diverged = |loss: f64| Error::Diverged {
                epoch: e + 1,
                batch: bi,
                loss,
            };
            let (x, y) = train.batch::<T>(chunk);
            let mut tape = Tape::new();
            let pass = match self.model.forward(&mut tape, &x, BnMode::Train, &all) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let (loss, report) = if pass.z.is_empty() {
                let ce = tape.cross_entropy(pass.logits, &y)?;
                (ce, None)
            } else {
                let g = total_loss(&mut tape, pass.logits, &y, &pass.z, &lambda)?;
                let r = LossReport::from_graph(&tape, &g, &lambda);
                (g.total, Some(r))
            };
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(diverged(lv));
            }
            let mut grads = tape.backward(loss)?;
            self.model.store_grads(&pass, &mut grads)?;
            self.optimizer.step(self.model.params_mut())?;
            if self.model.params().iter().any(|p| !p.value.is_finite()) {
                return Err(diverged(lv));
            }

            let w = chunk.len() as f64;
            s.n += w;
            s.total += w * lv;
            match report {
                Some(r) => {
                    s.ce += w * r.ce.unwrap_or(0.0);
                    s.im += w * r.mean_head_im();
                    s.h_cond += w * r.mean_h_cond();
                    s.h_marg += w * r.mean_h_marg();
                }
                None => s.ce += w * lv,
            }
            let preds = argmax_rows(tape.value(pass.logits));
            s.correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        self.model.clear_grads();
        self.epoch += 1;
        let test_acc = evaluate(&self.model, test, BnMode::Eval, 256)?.accuracy;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            ce: s.ce / s.n,
            im: s.im / s.n,
            total: s.total / s.n,
            h_cond: s.h_cond / s.n,
            h_marg: s.h_marg / s.n,
            train_acc: s.correct as f64 / s.n,
            test_acc,
        })
    }

    /// Runs the remaining epochs, handing each log line to `on_epoch`.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let l = self.step_epoch(train, test)?;
            on_epoch(&l);
            log.push(l);
        }
        Ok(log)
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = self.model.to_entries();
        out.push(Entry::new("trainer.epoch", &Tensor::<f64>::scalar(self.epoch as f64)));
        if let Optimizer::Sgd(sgd) = &self.optimizer {
            out.push(Entry::new("optimizer.steps", &Tensor::<f64>::scalar(sgd.steps as f64)));
            for (p, v) in self.model.params().iter().zip(&sgd.velocity) {
                if let Some(v) = v {
                    let t = Tensor::new(p.value.shape().to_vec(), v.clone()).expect("velocity shape");
                    out.push(Entry::new(format!("optimizer.velocity.{}", p.name), &t));
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn from_entries(spec: ModelSpec, config: TrainConfig, entries: &[Entry]) -> Result<Self> {
        let mut model = ModelBundle::new(spec, config.seed)?;
        model.load_entries(entries)?;
        let mut tr = Self::new(model, config)?;
        let scalar = |name: &str| -> Option<f64> {
            entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.tensor.to_tensor::<f64>().item())
        };
        tr.epoch = scalar("trainer.epoch").unwrap_or(0.0) as usize;
        if let Optimizer::Sgd(sgd) = &mut tr.optimizer {
            sgd.steps = scalar("optimizer.steps").unwrap_or(0.0) as u64;
            for (i, p) in tr.model.params().iter().enumerate() {
                let name = format!("optimizer.velocity.{}", p.name);
                if let Some(e) = entries.iter().find(|e| e.name == name) {
                    if e.tensor.shape() != p.value.shape() {
                        return Err(Error::Structure(format!("`{name}` has the wrong shape")));
                    }
                    sgd.velocity[i] = Some(e.tensor.to_tensor::<T>().into_data());
                }
            }
        }
        Ok(tr)
    }

    pub fn load(spec: ModelSpec, config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(spec, config, &checkpoint::load(path)?)
    }
}

/// Trains a fresh model from `spec` and returns it with the log.
pub fn joint_train<T: Scalar>(
    spec: ModelSpec,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelBundle<T>, Vec<EpochLog>)> {
    let model = ModelBundle::new(spec, config.seed)?;
    let mut tr = Trainer::new(model, config.clone())?;
    let log = tr.run(train, test, |_| {})?;
    Ok((tr.model, log))
}

pub fn write_log_jsonl<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    for l in log {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
