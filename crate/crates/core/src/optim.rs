//! First-order optimizers with optional binary masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum { lr, momentum }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

/// Optimizer configuration plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Element = f32> {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter from its stored gradient.
    ///
    /// Wherever a mask entry is zero the parameter (and its moment buffers)
    /// is set to exactly `+0.0` after the update.
    pub fn step<'a, I>(&mut self, params: I, masks: Option<&BTreeMap<String, Vec<bool>>>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
            if let Some(mask) = masks.and_then(|m| m.get(*name)) {
                if mask.len() != p.numel() {
                    return Err(Error::Shape {
                        op: "optimizer_step",
                        detail: format!("mask for `{name}` has {} entries, parameter {:?}", mask.len(), p.shape()),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params {
            let grad = p.take_grad().expect("checked above");
            let n = grad.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            match self.config {
                OptimizerConfig::SgdMomentum { lr, momentum } => {
                    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
                    for ((w, g), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *v = mu * *v + *g;
                        *w -= lr * *v;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let c1 = T::from_f64(1.0 - beta1.powf(t));
                    let c2 = T::from_f64(1.0 - beta2.powf(t));
                    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
                    for (((w, g), m1), m2) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m1 = b1 * *m1 + (T::one() - b1) * *g;
                        *m2 = b2 * *m2 + (T::one() - b2) * *g * *g;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if let Some(mask) = masks.and_then(|m| m.get(name)) {
                let second = self.second.get_mut(name);
                let first = self.first.get_mut(name).expect("inserted above");
                for (i, keep) in mask.iter().enumerate() {
                    if !keep {
                        p.data_mut()[i] = T::zero();
                        first[i] = T::zero();
                    }
                }
                if let Some(second) = second {
                    for (i, keep) in mask.iter().enumerate() {
                        if !keep {
                            second[i] = T::zero();
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut w = param(1.0, 1.0);
        opt.step([("w", &mut w)], None).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig::adam(0.001));
        let mut w = param(1.0, 1.0);
        opt.step([("w", &mut w)], None).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε).
        assert!((w.data()[0] - (1.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w.data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn zero_mask_annihilates() {
        for cfg in [OptimizerConfig::sgd(0.5, 0.9), OptimizerConfig::adam(0.1)] {
            let mut opt = OptimizerState::<f32>::new(cfg);
            let mut w = Tensor::new(vec![3], vec![1.0f32, -2.0, 3.0]).unwrap();
            w.set_grad(vec![0.1, 0.2, -0.3]).unwrap();
            let masks = BTreeMap::from([("w".to_string(), vec![false; 3])]);
            opt.step([("w", &mut w)], Some(&masks)).unwrap();
            assert!(w.data().iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut w = Tensor::<f64>::zeros(vec![2]);
        let err = opt.step([("conv1.weight", &mut w)], None).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig::sgd(0.1, 0.5));
        let mut w = param(0.0, 1.0);
        opt.step([("w", &mut w)], None).unwrap();
        w.set_grad(vec![1.0]).unwrap();
        opt.step([("w", &mut w)], None).unwrap();
        // v1 = 1, v2 = 1.5; w = -0.1 - 0.15
        assert!((w.data()[0] + 0.25).abs() < 1e-15);
        assert_eq!(opt.steps(), 2);
    }
}
