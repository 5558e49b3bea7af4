use super::{BnState, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::optim::Optimizer;
use crate::tensor::{Scalar, Tensor};

/// Full copy of parameter values, running statistics and optionally the
/// optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    bn: Vec<BnState<T>>,
    optimizer: Option<Optimizer<T>>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn capture(model: &ModelBundle<T>, optimizer: Option<&Optimizer<T>>) -> Self {
        Self {
            names: model.params().iter().map(|p| p.name.clone()).collect(),
            values: model.params().iter().map(|p| p.value.clone()).collect(),
            bn: model.bn_states().to_vec(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn optimizer(&self) -> Option<&Optimizer<T>> {
        self.optimizer.as_ref()
    }

    /// Writes the captured state back into `model` and returns a copy of the
    /// captured optimizer state. Gradients are cleared.
    pub fn restore(&self, model: &mut ModelBundle<T>) -> Result<Option<Optimizer<T>>> {
        let params = model.params();
        let same = params.len() == self.names.len()
            && params
                .iter()
                .zip(self.names.iter().zip(&self.values))
                .all(|(p, (n, v))| &p.name == n && p.value.shape() == v.shape())
            && model.bn_states().len() == self.bn.len()
            && model
                .bn_states()
                .iter()
                .zip(&self.bn)
                .all(|(a, b)| a.running_mean.len() == b.running_mean.len());
        if !same {
            return Err(Error::Structure("snapshot was taken from a differently shaped model".into()));
        }
        for (p, v) in model.params_mut().iter_mut().zip(&self.values) {
            p.value.data_mut().copy_from_slice(v.data());
            p.grad = None;
        }
        model.bn_states_mut().clone_from_slice(&self.bn);
        Ok(self.optimizer.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelSpec, ProjectorSpec};
    use crate::tensor::optim::AdamHyper;

    #[test]
    fn restore_is_bit_exact_and_idempotent() {
        let mut m = ModelBundle::<f32>::new(ModelSpec::default(), 3).unwrap();
        let opt = Optimizer::adam(AdamHyper::with_lr(1e-3), m.params().len());
        let snap = Snapshot::capture(&m, Some(&opt));
        for p in m.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        m.bn_states_mut()[0].running_mean[0] = 9.0;
        let got = snap.restore(&mut m).unwrap();
        assert_eq!(got.as_ref(), Some(&opt));
        for (p, v) in m.params().iter().zip(snap.values()) {
            assert!(p.value.bit_eq(v));
        }
        let again = Snapshot::capture(&m, Some(&opt));
        snap.restore(&mut m).unwrap();
        assert_eq!(Snapshot::capture(&m, Some(&opt)), again);
        assert_eq!(again, snap);
    }

    #[test]
    fn mismatched_structure_is_rejected() {
        let a = ModelBundle::<f32>::new(ModelSpec::default(), 3).unwrap();
        let spec = ModelSpec {
            projectors: ProjectorSpec {
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut b = ModelBundle::<f32>::new(spec, 3).unwrap();
        let snap = Snapshot::capture(&a, None);
        assert!(matches!(snap.restore(&mut b), Err(Error::Structure(_))));
    }
}
