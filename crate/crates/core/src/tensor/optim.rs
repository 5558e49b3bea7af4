//! Named parameters and the two optimizers used by the pipeline.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor addressed by a stable dotted path.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                grad.shape(),
                self.name,
                self.value.shape()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub hyper: SgdHyper,
    pub velocity: Vec<Option<Vec<T>>>,
    pub steps: u64,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(hyper: SgdHyper, num_params: usize) -> Self {
        Optimizer::Sgd(Sgd {
            hyper,
            velocity: vec![None; num_params],
            steps: 0,
        })
    }

    pub fn adam(hyper: AdamHyper, num_params: usize) -> Self {
        Optimizer::Adam(Adam {
            hyper,
            m: vec![None; num_params],
            v: vec![None; num_params],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Sgd(s) => s.steps,
            Optimizer::Adam(a) => a.steps,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(s) => s.hyper.lr = lr,
            Optimizer::Adam(a) => a.hyper.lr = lr,
        }
    }

    /// Updates every parameter that carries a gradient. Parameters without a
    /// gradient, and their optimizer state, are left untouched.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        let slots = match self {
            Optimizer::Sgd(s) => s.velocity.len(),
            Optimizer::Adam(a) => a.m.len(),
        };
        if slots != params.len() {
            return Err(Error::Structure(format!(
                "optimizer tracks {slots} parameters, model has {}",
                params.len()
            )));
        }
        match self {
            Optimizer::Sgd(s) => s.step(params),
            Optimizer::Adam(a) => a.step(params),
        }
        Ok(())
    }
}

impl<T: Scalar> Sgd<T> {
    fn step(&mut self, params: &mut [Parameter<T>]) {
        self.steps += 1;
        let lr = T::from_f64(self.hyper.lr);
        let mu = T::from_f64(self.hyper.momentum);
        let wd = T::from_f64(self.hyper.weight_decay);
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let Some(g) = &p.grad else { continue };
            let w = p.value.data_mut();
            let d: Vec<T> = g.data().iter().zip(w.iter()).map(|(&gv, &wv)| gv + wd * wv).collect();
            let v = match vel {
                Some(v) => {
                    for (vv, dv) in v.iter_mut().zip(&d) {
                        *vv = mu * *vv + *dv;
                    }
                    v
                }
                slot @ None => slot.insert(d),
            };
            for (wv, &vv) in w.iter_mut().zip(v.iter()) {
                *wv -= lr * vv;
            }
        }
    }
}

impl<T: Scalar> Adam<T> {
    fn step(&mut self, params: &mut [Parameter<T>]) {
        self.steps += 1;
        let h = self.hyper;
        let t = self.steps as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - h.beta1), T::from_f64(1.0 - h.beta2));
        let step_size = T::from_f64(h.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(h.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = &p.grad else { continue };
            let n = g.numel();
            let m = m.get_or_insert_with(|| vec![T::zero(); n]);
            let v = v.get_or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *w -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("x", Tensor::scalar(x));
        p.set_grad(Tensor::scalar(g)).unwrap();
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut params = vec![scalar_param(0.0, 1.0)];
        let mut opt = Optimizer::sgd(
            SgdHyper {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            1,
        );
        opt.step(&mut params).unwrap();
        assert!((params[0].value.item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        for g in [1e-4, 0.5, 300.0, -7.0] {
            let mut params = vec![scalar_param(1.0, g)];
            let mut opt = Optimizer::adam(AdamHyper::with_lr(1e-3), 1);
            opt.step(&mut params).unwrap();
            let moved = (params[0].value.item() - 1.0).abs();
            assert!((moved - 1e-3).abs() < 1e-6, "g = {g}: moved {moved}");
        }
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let mut params = vec![scalar_param(2.0, 1.0), Parameter::new("y", Tensor::scalar(5.0))];
        let mut opt = Optimizer::adam(AdamHyper::with_lr(0.1), 2);
        opt.step(&mut params).unwrap();
        assert_eq!(params[1].value.item(), 5.0);
        let Optimizer::Adam(a) = &opt else { unreachable!() };
        assert!(a.m[1].is_none());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn grad_shape_is_checked() {
        let mut p = Parameter::new("w", Tensor::<f64>::zeros(&[2, 2]));
        assert!(p.set_grad(Tensor::zeros(&[4])).is_err());
    }
}
