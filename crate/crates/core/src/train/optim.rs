//! First-order optimizers over flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
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

fn default_momentum() -> f64 {
    0.9
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

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::SgdMomentum { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new: f64) -> Self {
        match &mut self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::SgdMomentum { lr, .. } => *lr = new,
        }
        self
    }

    /// `lr = 0` is accepted: it is the frozen-parameter control.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&momentum)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state. Moments are kept in 64-bit regardless of the
/// parameter precision.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` must match `params[i]` in length; the
    /// set of tensors must not change between calls.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid("parameter set changed between optimizer steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.first[i].len() != g.len() {
                return Err(Error::LengthMismatch {
                    expected: p.numel(),
                    actual: g.len(),
                });
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, gj)) in p.data_mut().iter_mut().zip(g).enumerate() {
                        let gj = gj.into_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let delta = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *w = T::from_f64_lossy(w.into_f64() - delta);
                    }
                }
            }
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let v = &mut self.first[i];
                    for (j, (w, gj)) in p.data_mut().iter_mut().zip(g).enumerate() {
                        v[j] = momentum * v[j] + gj.into_f64();
                        *w = T::from_f64_lossy(w.into_f64() - lr * v[j]);
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

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec([1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_adam_params_unchanged() {
        let mut p = vec![Tensor::<f32>::seeded_uniform([3, 4], -1.0, 1.0, 2).unwrap()];
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        for _ in 0..5 {
            opt.step(&mut p, &[vec![0.0; 12]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut p = scalar(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.25, 0.0)).unwrap();
        opt.step(&mut p, &[vec![4.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        opt.step(&mut p, &[vec![-2.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.5]);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        // independent reference recursion
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * p[0].data()[0];
            opt.step(&mut p, &[vec![g]]).unwrap();
            let gr = 2.0 * w;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w - p[0].data()[0]).abs() < 1e-12);
        }
        assert!(p[0].data()[0].abs() < 0.05);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0, 0.9)).unwrap();
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p[0].data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatches_and_bad_settings() {
        let mut p = scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        assert!(opt.step(&mut p, &[vec![1.0, 2.0]]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
        assert!(Optimizer::new(OptimizerConfig::adam(-1.0)).is_err());
        assert!(Optimizer::new(OptimizerConfig::sgd(0.1, 1.0)).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = OptimizerConfig::adam(3e-5);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<OptimizerConfig>(&text).unwrap(), c);
        let sgd: OptimizerConfig = serde_json::from_str(r#"{"kind":"sgd_momentum","lr":0.01}"#).unwrap();
        assert_eq!(sgd, OptimizerConfig::sgd(0.01, 0.9));
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind":"adam","lr":0.1,"bogus":1}"#).is_err());
    }
}
