use serde::{Deserialize, Serialize};

use super::layers::Parameter;
use super::{SubstrateError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

pub const SGD_MOMENTUM: f32 = 0.9;
pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Optimizer bound to one ordered parameter group.
///
/// Moment buffers are created on the first step and must keep matching the
/// shapes of the group they were created for.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    momentum: f32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self::with_momentum(kind, lr, SGD_MOMENTUM)
    }

    /// SGD momentum coefficient override (ignored by Adam).
    pub fn with_momentum(kind: OptimizerKind, lr: f32, momentum: f32) -> Self {
        Self {
            kind,
            lr,
            momentum,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter, then zeroes all
    /// gradients in the group. Frozen parameters are left untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<(), SubstrateError> {
        if let Some(p) = params.iter().find(|p| p.trainable && !p.has_grad) {
            return Err(SubstrateError::MissingGradient(p.name.clone()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(SubstrateError::OptimizerGroupChanged);
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            if p.trainable {
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        let v = self.first[i].data_mut();
                        for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v) {
                            *vel = self.momentum * *vel + g;
                            *w -= self.lr * *vel;
                        }
                    }
                    OptimizerKind::Adam => {
                        let c1 = 1.0 - ADAM_BETA1.powi(t);
                        let c2 = 1.0 - ADAM_BETA2.powi(t);
                        let m = self.first[i].data_mut();
                        let v = self.second[i].data_mut();
                        for (((w, g), mi), vi) in
                            p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v)
                        {
                            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                            let mhat = *mi / c1;
                            let vhat = *vi / c2;
                            *w -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        p.accumulate(&Tensor::scalar(g));
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_param(1.0, 2.0);
        let mut opt = Optimizer::with_momentum(OptimizerKind::SgdMomentum, 0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-7);
        assert_eq!(p.grad.data(), &[0.0]);
        assert!(!p.has_grad);
    }

    #[test]
    fn frozen_param_unchanged() {
        let mut p = scalar_param(1.0, 5.0);
        p.trainable = false;
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.5);
            p.accumulate(&Tensor::scalar(5.0));
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value.data(), &[1.0]);
        }
    }

    #[test]
    fn zero_grad_leaves_weight() {
        let mut p = scalar_param(0.3, 0.0);
        let mut opt = Optimizer::with_momentum(OptimizerKind::SgdMomentum, 0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.3]);
    }

    #[test]
    fn missing_gradient_reported() {
        let mut p = Parameter::new("enc.0.weight", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        match opt.step(&mut [&mut p]) {
            Err(SubstrateError::MissingGradient(name)) => assert_eq!(name, "enc.0.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_param(1.0, 3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }
}
