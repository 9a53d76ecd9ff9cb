//! First-order optimizers over the flat parameter list of a model.

use serde::{Deserialize, Serialize};

use crate::encoder::MobiClrModel;
use crate::nn::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::Adam { beta1, beta2, eps } = *self {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<F: Scalar>(config: OptimizerConfig, lr: f64, model: &MobiClrModel<F>) -> Result<Self> {
        config.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd => Vec::new(),
        };
        let m = match config {
            OptimizerConfig::Adam { .. } => zeros,
            OptimizerConfig::Sgd => Vec::new(),
        };
        Ok(Optimizer { config, lr, step: 0, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored in `grads`. Moments are
    /// kept in `f64` whatever the model precision.
    pub fn step<F: Scalar>(&mut self, model: &mut MobiClrModel<F>, grads: &MobiClrModel<F>) {
        self.step += 1;
        let g: Vec<&[F]> = grads.params().into_iter().map(|p| p.data).collect();
        match self.config {
            OptimizerConfig::Sgd => {
                for (w, g) in model.params_mut().into_iter().zip(g) {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= F::cast(self.lr * g.widen());
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, g), m), v) in model
                    .params_mut()
                    .into_iter()
                    .zip(g)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for i in 0..w.len() {
                        let gi = g[i].widen();
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        w[i] -= F::cast(self.lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
    }
}
