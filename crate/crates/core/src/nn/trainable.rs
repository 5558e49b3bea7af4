use std::collections::BTreeSet;

use super::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Source training: everything learns.
    Joint,
    /// Test-time: only extractor blocks `1..=J` learn.
    Adapt,
}

/// Which parameters receive gradient, as a mask over parameter indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    mask: Vec<bool>,
}

impl TrainableSet {
    pub fn all<T: Scalar>(model: &ModelBundle<T>) -> Self {
        Self::matching(model, |_| true)
    }

    pub fn none<T: Scalar>(model: &ModelBundle<T>) -> Self {
        Self::matching(model, |_| false)
    }

    /// Batch-norm scale and shift of every block.
    pub fn bn_affine<T: Scalar>(model: &ModelBundle<T>) -> Self {
        Self::matching(model, |name| {
            name.starts_with("extractor.") && (name.ends_with(".bn.weight") || name.ends_with(".bn.bias"))
        })
    }

    pub fn matching<T: Scalar>(model: &ModelBundle<T>, pred: impl Fn(&str) -> bool) -> Self {
        Self {
            mask: model.params().iter().map(|p| pred(&p.name)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.mask.get(index).copied().unwrap_or(false)
    }

    pub fn paths<T: Scalar>(&self, model: &ModelBundle<T>) -> BTreeSet<String> {
        model
            .params()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p.name.clone())
            .collect()
    }
}

/// Parameters that learn in `mode`. In adapt mode these are the conv
/// weights and batch-norm affine parameters of extractor blocks `1..=j`.
pub fn select_trainable<T: Scalar>(model: &ModelBundle<T>, mode: TrainMode, j: usize) -> Result<TrainableSet> {
    match mode {
        TrainMode::Joint => Ok(TrainableSet::all(model)),
        TrainMode::Adapt => {
            let blocks = model.spec().blocks();
            if j == 0 || j > blocks {
                return Err(Error::Config(format!("J = {j} must lie in 1..={blocks}")));
            }
            let prefixes: Vec<String> = (1..=j).map(|l| format!("extractor.block{l}.")).collect();
            Ok(TrainableSet::matching(model, |name| {
                prefixes.iter().any(|p| name.starts_with(p.as_str()))
            }))
        }
    }
}
