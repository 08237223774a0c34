use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, OptimizerState};
use crate::conditioning::{denoise_var, Conditioning, DenoiserParams, ModelConfig};
use crate::dataset::{synth_triplets, DatasetConfig};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, gaussian, rng};
use crate::numerics::value_and_grad;
use crate::schedule::{dm_loss_var, NoiseSchedule, WeightFn};

/// Text-only pretraining of the frozen base denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Synthetic instances drawn for pretraining, disjoint in seed from the
    /// preference data.
    pub instances: usize,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            instances: 512,
            seed: 11,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.instances == 0 {
            return Err(Error::Config("base pretraining needs a batch and instances".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("base lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Trains every denoiser weight on `dm_loss` with text-only conditioning
/// over compliant targets, then returns the weights frozen.
pub fn pretrain_base(
    base: &BaseConfig,
    model: &ModelConfig,
    data: &DatasetConfig,
    schedule: &NoiseSchedule,
) -> Result<DenoiserParams> {
    base.validate()?;
    let init = DenoiserParams::init(model, derive_seed(base.seed, &[0xba5e]))?;
    if base.steps == 0 {
        return Ok(init);
    }
    let triplets = synth_triplets(base.instances, data, derive_seed(base.seed, &[0xda7a]))?;
    let text = data.encoders.text_encoder();
    let items = triplets
        .iter()
        .map(|t| Ok((text.encode(&t.prompt)?, t.pool[0].clone())))
        .collect::<Result<Vec<_>>>()?;
    let shape = data.image_shape();
    let opt = OptimizerConfig::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = OptimizerState::default();
    let mut params = init.with_frozen(false).into_params();
    let mut r = rng(derive_seed(base.seed, &[0x57e9]));
    for step in 0..base.steps {
        let batch: Vec<_> = (0..base.batch_size)
            .map(|_| {
                let i = r.random_range(0..items.len());
                let t = r.random_range(1..=schedule.steps());
                let eps = gaussian(&shape, &mut r);
                (i, t, eps)
            })
            .collect();
        let (loss, grads) = value_and_grad(
            |g, b| {
                let d = init.vars_with(|n| b.get(n))?;
                let mut total = None;
                for (i, t, eps) in &batch {
                    let (c_p, y0) = &items[*i];
                    let xt = schedule.forward_diffuse(y0, *t, eps)?;
                    let cond = Conditioning::text_only(g.constant(c_p.tokens().clone()));
                    let eps_hat = denoise_var(g.constant(xt), *t, &cond, &d, None)?;
                    let l = dm_loss_var(g.constant(eps.clone()), eps_hat, *t, WeightFn::default(), schedule)?;
                    total = Some(match total {
                        Some(acc) => l.add(acc)?,
                        None => l,
                    });
                }
                Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
            },
            &params,
        )?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                loss,
            });
        }
        state.apply(&opt, &mut params, &grads, base.lr)?;
    }
    Ok(DenoiserParams::from_params(model, params)?.with_frozen(true))
}
