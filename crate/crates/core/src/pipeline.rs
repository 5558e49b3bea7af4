//! Per-seed steps of the experiment pipeline, shared by the command line
//! and the end-to-end checks.

use crate::adapt::{run_ttt, AdaptReport, TestStream};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::ModelBundle;
use crate::train::{EpochLog, TrainConfig, Trainer};

/// Training config for one seed: the configured schedule with its seed replaced.
pub fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Trains a fresh model for `seed`; `on_epoch` sees every epoch log.
pub fn train_seed(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Trainer<f32>, Vec<EpochLog>)> {
    let model = ModelBundle::<f32>::new(cfg.model.clone(), seed)?;
    let mut tr = Trainer::new(model, train_config(cfg, seed))?;
    let log = tr.run(train, test, on_epoch)?;
    Ok((tr, log))
}

/// Loads a trained model written by [`Trainer::save`].
pub fn load_model(cfg: &ExperimentConfig, seed: u64, path: impl AsRef<std::path::Path>) -> Result<ModelBundle<f32>> {
    Ok(Trainer::<f32>::load(cfg.model.clone(), train_config(cfg, seed), path)?.model)
}

/// Corrupted copies of `test` for every configured corruption and severity.
pub fn streams(cfg: &ExperimentConfig, test: &Dataset, seed: u64) -> Result<Vec<TestStream>> {
    cfg.corruption_specs(seed)?
        .into_iter()
        .map(|spec| TestStream::corrupted(test, spec))
        .collect()
}

/// Adapts `model` to every configured stream.
pub fn adapt_seed(cfg: &ExperimentConfig, model: &ModelBundle<f32>, test: &Dataset, seed: u64) -> Result<AdaptReport> {
    let mut m = model.clone();
    m.mark_source();
    run_ttt(&m, &streams(cfg, test, seed)?, &cfg.adapt, seed)
}
