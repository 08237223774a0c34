use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter moment buffers. SGD uses only `first`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub updates: u64,
}

impl OptimizerState {
    /// In-place update of every trainable entry of `params`.
    pub fn apply(&mut self, cfg: &OptimizerConfig, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        self.updates += 1;
        let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::UnknownParam(format!("no gradient for `{name}`")))?;
            let p = params.trainable_mut(&name)?;
            let zeros = || Tensor::zeros(g.shape());
            match *cfg {
                OptimizerConfig::Sgd { momentum } => {
                    let v = self.first.entry(name).or_insert_with(zeros);
                    let nv = v.zip_map(g, |v, g| momentum * v + g)?;
                    *p = p.zip_map(&nv, |p, v| p - lr * v)?;
                    *v = nv;
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(zeros);
                    *m = m.zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g)?;
                    let v = self.second.entry(name.clone()).or_insert_with(zeros);
                    *v = v.zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
                    let c1 = 1.0 - beta1.powi(self.updates as i32);
                    let c2 = 1.0 - beta2.powi(self.updates as i32);
                    let m = &self.first[&name];
                    let step = m.zip_map(&self.second[&name], |m, v| (m / c1) / ((v / c2).sqrt() + eps))?;
                    *p = p.zip_map(&step, |p, s| p - lr * s)?;
                }
            }
        }
        Ok(())
    }
}
