//! SGD with (optionally Nesterov) momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return arg_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return arg_err(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }
}

/// Momentum buffers plus hyper-parameters. Buffers are created lazily with
/// the shape of their parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    buffers: Vec<Option<Vec<f32>>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(SgdState {
            config,
            buffers: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f32) -> Result<()> {
        let mut c = self.config;
        c.lr = lr;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f32]> {
        self.buffers.get(id.index()).and_then(|b| b.as_deref())
    }
}

/// Applies one update to every parameter and clears the gradients.
///
/// With `d = grad + wd * p` and `buf = momentum * buf + d`, the step is
/// `p -= lr * (d + momentum * buf)` for Nesterov, `p -= lr * buf` otherwise.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState) -> Result<()> {
    if let Some((_, p)) = params.iter().find(|(_, p)| p.value.grad().is_none()) {
        return Err(Error::State(format!(
            "parameter `{}` has no gradient",
            p.name
        )));
    }
    if state.buffers.len() < params.len() {
        state.buffers.resize(params.len(), None);
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
        nesterov,
    } = state.config;
    for (id, p) in params.iter_mut() {
        let grad = p.value.grad().expect("checked above").to_vec();
        let buf = state.buffers[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
        if buf.len() != grad.len() {
            return Err(Error::Dimension(format!(
                "momentum buffer of `{}` has {} elements, parameter has {}",
                p.name,
                buf.len(),
                grad.len()
            )));
        }
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let d = grad[i] + weight_decay * data[i];
            buf[i] = momentum * buf[i] + d;
            let step = if nesterov {
                d + momentum * buf[i]
            } else {
                buf[i]
            };
            data[i] -= lr * step;
        }
        p.value.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f32, grad: f32) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::scalar(value));
        ps.get_mut(id).accumulate_grad(&[grad]).unwrap();
        (ps, id)
    }

    fn cfg(lr: f32, momentum: f32, weight_decay: f32) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay,
            nesterov: true,
        }
    }

    #[test]
    fn plain_sgd_subtracts_gradient() {
        let (mut ps, id) = one_param(1.0, 0.25);
        let mut st = SgdState::new(cfg(1.0, 0.0, 0.0)).unwrap();
        sgd_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get(id).data(), &[0.75]);
        assert!(ps.get(id).grad().is_none());
    }

    #[test]
    fn pure_decay_shrinks() {
        let (mut ps, id) = one_param(2.0, 0.0);
        let mut st = SgdState::new(cfg(0.5, 0.0, 0.1)).unwrap();
        sgd_step(&mut ps, &mut st).unwrap();
        assert!((ps.get(id).data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn nesterov_two_steps_match_recurrence() {
        let (lr, mu) = (0.1f64, 0.9f64);
        let (g1, g2) = (0.5f64, -0.2f64);
        // hand-rolled recurrence
        let mut p = 1.0f64;
        let mut b = 0.0f64;
        for g in [g1, g2] {
            b = mu * b + g;
            p -= lr * (g + mu * b);
        }

        let (mut ps, id) = one_param(1.0, g1 as f32);
        let mut st = SgdState::new(cfg(lr as f32, mu as f32, 0.0)).unwrap();
        sgd_step(&mut ps, &mut st).unwrap();
        ps.get_mut(id).accumulate_grad(&[g2 as f32]).unwrap();
        sgd_step(&mut ps, &mut st).unwrap();
        assert!((ps.get(id).data()[0] as f64 - p).abs() < 1e-6);
        assert_eq!(st.buffer(id).unwrap().len(), 1);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0));
        let mut st = SgdState::new(cfg(0.1, 0.9, 0.0)).unwrap();
        assert!(matches!(sgd_step(&mut ps, &mut st), Err(Error::State(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::new(cfg(0.0, 0.9, 0.0)).is_err());
        assert!(SgdState::new(cfg(0.1, 1.0, 0.0)).is_err());
        assert!(SgdState::new(cfg(0.1, 0.9, -1.0)).is_err());
    }
}
