// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::model::Param;
use crate::error::{Error, Result};
use crate::tensor::Real;

fn default_lr() -> f64 {
    1e-3
}
fn default_rho() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-7
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_lr")]
        learning_rate: f64,
    },
    #[serde(rename = "rmsprop")]
    RmsProp {
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::rmsprop(default_lr())
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::Sgd { learning_rate }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        Self::RmsProp {
            learning_rate,
            rho: default_rho(),
            epsilon: default_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Self::Sgd { learning_rate }
            | Self::RmsProp { learning_rate, .. }
            | Self::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::param(format!("learning rate {lr} must be positive")));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(format!("{name} = {v} outside [0, 1)")))
            }
        };
        match *self {
            Self::Sgd { .. } => Ok(()),
            Self::RmsProp { rho, epsilon, .. } => {
                unit("rho", rho)?;
                (epsilon > 0.0)
                    .then_some(())
                    .ok_or_else(|| Error::param("epsilon must be positive"))
            }
            Self::Adam {
                beta1,
                beta2,
                epsilon,
                ..
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                (epsilon > 0.0)
                    .then_some(())
                    .ok_or_else(|| Error::param("epsilon must be positive"))
            }
        }
    }
}

/// Optimizer state for a list of parameter sets.
pub struct Optimizer<T: Real> {
    config: OptimizerConfig,
    step: i32,
    /// First moments (Adam) per parameter vector.
    m: Vec<Vec<T>>,
    /// Second moments (RMSProp, Adam) per parameter vector.
    v: Vec<Vec<T>>,
}

fn flat<T>(params: &mut [Param<T>]) -> impl Iterator<Item = &mut Vec<T>> {
    params
        .iter_mut()
        .flat_map(|p| std::iter::once(&mut p.weight).chain(p.bias.as_mut()))
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Param<T>]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<T>> = params
            .iter()
            .flat_map(|p| std::iter::once(p.weight.len()).chain(p.bias.as_ref().map(Vec::len)))
            .map(|n| vec![T::zero(); n])
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update with gradients `grads` (same layout as `params`).
    pub fn step(&mut self, params: &mut [Param<T>], grads: &mut [Param<T>]) {
        self.step += 1;
        let t = self.step;
        let c = |x: f64| T::from_f64(x);
        let pairs = flat(params)
            .zip(flat(grads))
            .zip(self.m.iter_mut().zip(&mut self.v));
        match self.config {
            OptimizerConfig::Sgd { learning_rate } => {
                for ((p, g), _) in pairs {
                    let lr = c(learning_rate);
                    p.iter_mut()
                        .zip(g.iter())
                        .for_each(|(p, &g)| *p = *p - lr * g);
                }
            }
            OptimizerConfig::RmsProp {
                learning_rate,
                rho,
                epsilon,
            } => {
                let (lr, rho, one_m_rho, eps) =
                    (c(learning_rate), c(rho), c(1.0 - rho), c(epsilon));
                for ((p, g), (_, v)) in pairs {
                    for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *v = rho * *v + one_m_rho * g * g;
                        *p = *p - lr * g / (v.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let lr_t = learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                let (lr_t, b1, b2, eps) = (c(lr_t), c(beta1), c(beta2), c(epsilon));
                let (omb1, omb2) = (c(1.0 - beta1), c(1.0 - beta2));
                for ((p, g), (m, v)) in pairs {
                    for (((p, &g), m), v) in p
                        .iter_mut()
                        .zip(g.iter())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + omb1 * g;
                        *v = b2 * *v + omb2 * g * g;
                        *p = *p - lr_t * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(w: Vec<f64>) -> Vec<Param<f64>> {
        vec![Param {
            rows: 1,
            cols: w.len(),
            weight: w,
            bias: None,
        }]
    }

    #[test]
    fn sgd_step() {
        let mut p = param(vec![1.0, 2.0]);
        let mut g = param(vec![0.5, -1.0]);
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.1), &p).unwrap();
        o.step(&mut p, &mut g);
        assert_eq!(p[0].weight, vec![0.95, 2.1]);
    }

    #[test]
    fn rmsprop_first_step() {
        // v = 0.1 g^2, so the step is lr * g / (sqrt(0.1) |g| + eps).
        let mut p = param(vec![0.0]);
        let mut g = param(vec![2.0]);
        let mut o = Optimizer::new(OptimizerConfig::rmsprop(0.01), &p).unwrap();
        o.step(&mut p, &mut g);
        let want = -0.01 * 2.0 / (0.4f64.sqrt() + 1e-7);
        assert!((p[0].weight[0] - want).abs() < 1e-14);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut p = param(vec![0.0, 0.0]);
        let mut g = param(vec![3.0, -0.001]);
        let mut o = Optimizer::new(OptimizerConfig::adam(0.01), &p).unwrap();
        o.step(&mut p, &mut g);
        // Bias-corrected first step moves by lr * sign(g) up to epsilon.
        let want = -0.01 * 0.001f64.sqrt() / 0.1 * 0.3 / (0.009f64.sqrt() + 1e-7);
        assert!((p[0].weight[0] - want).abs() < 1e-14, "{}", p[0].weight[0]);
        assert!((p[0].weight[0] + 0.01).abs() < 1e-7);
        assert!((p[0].weight[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn config_parsing_and_validation() {
        let c: OptimizerConfig =
            toml::from_str("kind = \"rmsprop\"\nlearning_rate = 0.002").unwrap();
        assert_eq!(c, OptimizerConfig::rmsprop(0.002));
        let c: OptimizerConfig = toml::from_str("kind = \"adam\"").unwrap();
        assert_eq!(c, OptimizerConfig::adam(1e-3));
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig::RmsProp {
            learning_rate: 0.1,
            rho: 1.0,
            epsilon: 1e-7
        }
        .validate()
        .is_err());
    }
}
