use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f32 },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_eps")]
        eps: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

fn default_eps() -> f32 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_eps(),
            },
            lr,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer over a fixed set of parameters. Frozen parameters are skipped
/// entirely so their values stay bit-identical.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    params: Vec<ParamId>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: Vec<ParamId>) -> Self {
        let n = params.len();
        Optimizer {
            config,
            params,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let OptimizerConfig {
            kind,
            lr,
            weight_decay,
        } = self.config;
        for (slot, &id) in self.params.iter().enumerate() {
            let param = store.get_mut(id);
            if !param.requires_grad() {
                continue;
            }
            let grad = param
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(param.name.clone()))?;
            let numel = param.value.numel();
            match kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let buf = self.first[slot].get_or_insert_with(|| Tensor::zeros([numel]));
                    let p = param.value.data_mut();
                    for ((w, &g), v) in p.iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                        let g = g + weight_decay * *w;
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[slot].get_or_insert_with(|| Tensor::zeros([numel]));
                    let v = self.second[slot].get_or_insert_with(|| Tensor::zeros([numel]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let p = param.value.data_mut();
                    for (((w, &g), m), v) in p
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let g = g + weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self, store: &mut ParamStore) {
        for &id in &self.params {
            store.get_mut(id).grad = None;
        }
    }
}
