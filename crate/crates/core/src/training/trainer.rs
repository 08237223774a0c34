use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::optim::OptimizerState;
use super::{
    check_compatible, initial_adapter, preference_samples, pretrain_base, split_manifest, warmup_lr, ObjectiveKind,
    TrainConfig,
};
use crate::conditioning::{denoise_var, AdapterParams, Conditioning, DenoiserParams};
use crate::dataset::{DatasetConfig, Manifest};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, rng};
use crate::numerics::{value_and_grad, Bindings, Gradients, Graph, Var};
use crate::preference::{Fusion, Objective, PreferenceBatch, PreferenceSample, SampleDraw};
use crate::schedule::{dm_loss_var, NoiseSchedule};

const EPOCH_TAG: u64 = 0xe90c;
const STEP_TAG: u64 = 0x57e9;

/// One optimizer step as written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Resumable training state. The batch and noise of step `k` depend only on
/// `(cfg.seed, k)`, so a trainer rebuilt from a checkpoint continues
/// bit-exactly.
pub struct Trainer {
    cfg: TrainConfig,
    data: DatasetConfig,
    dataset_hash: String,
    schedule: NoiseSchedule,
    denoiser: DenoiserParams,
    reference: AdapterParams,
    theta: AdapterParams,
    opt: OptimizerState,
    step: u64,
    samples: Vec<PreferenceSample>,
}

impl Trainer {
    /// Fresh run over the training split of `manifest` on top of a frozen
    /// base denoiser.
    pub fn new(cfg: &TrainConfig, manifest: &Manifest, denoiser: DenoiserParams) -> Result<Self> {
        let theta = initial_adapter(cfg)?;
        let reference = theta.clone();
        Self::assemble(cfg, manifest, denoiser, reference, theta, OptimizerState::default(), 0)
    }

    /// Continues the run recorded in `ckpt`.
    pub fn resume(ckpt: &Checkpoint, manifest: &Manifest) -> Result<Self> {
        if manifest.config_hash() != ckpt.dataset_hash {
            return Err(Error::Integrity(format!(
                "checkpoint was trained on dataset {}, manifest is {}",
                ckpt.dataset_hash,
                manifest.config_hash()
            )));
        }
        Self::assemble(
            &ckpt.config,
            manifest,
            ckpt.denoiser.clone(),
            ckpt.reference.clone(),
            ckpt.theta.clone(),
            ckpt.optimizer.clone(),
            ckpt.step,
        )
    }

    fn assemble(
        cfg: &TrainConfig,
        manifest: &Manifest,
        denoiser: DenoiserParams,
        reference: AdapterParams,
        theta: AdapterParams,
        opt: OptimizerState,
        step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&cfg.model, manifest)?;
        if denoiser.config() != &cfg.model || theta.config() != &cfg.model {
            return Err(Error::Config("parameters do not match the model config".into()));
        }
        let (train, _) = split_manifest(manifest, cfg.seed, cfg.holdout)?;
        if train.pairs().is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        Ok(Self {
            cfg: *cfg,
            data: *manifest.config(),
            dataset_hash: manifest.config_hash(),
            schedule: cfg.schedule.build()?,
            denoiser: denoiser.with_frozen(true),
            reference: reference.with_frozen(true),
            theta: theta.with_frozen(false),
            opt,
            step,
            samples: preference_samples(&train)?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn theta(&self) -> &AdapterParams {
        &self.theta
    }

    pub fn denoiser(&self) -> &DenoiserParams {
        &self.denoiser
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Sample indices of step `k`: a contiguous slice of epoch `k / spe`'s
    /// seeded permutation.
    fn batch_indices(&self, k: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, j) = (k / spe, (k % spe) as usize);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng(derive_seed(self.cfg.seed, &[EPOCH_TAG, epoch])));
        let bs = self.cfg.batch_size;
        order[j * bs..((j + 1) * bs).min(order.len())].to_vec()
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            denoiser: &self.denoiser,
            reference: &self.reference,
            schedule: &self.schedule,
            cfg: self.cfg.dsd,
            fusion: Fusion::Subject {
                gamma: self.cfg.gamma_train,
            },
        }
    }

    fn loss_and_grad(&self, batch: &PreferenceBatch, seed: u64) -> Result<(f64, Gradients)> {
        match self.cfg.objective {
            ObjectiveKind::Dsd => self.objective().loss_and_grad(&self.theta, batch, seed),
            ObjectiveKind::Dm => value_and_grad(|g, b| self.dm_winners_var(g, b, batch, seed), self.theta.params()),
        }
    }

    /// Eq. 4 on the winning targets under subject conditioning, with the
    /// same per-item draws as the preference loss.
    fn dm_winners_var<'g>(
        &self,
        g: &'g Graph,
        b: &Bindings<'g>,
        batch: &PreferenceBatch,
        seed: u64,
    ) -> Result<Var<'g>> {
        let d = self.denoiser.bind(g);
        let theta = self.reference.vars_with(|n| b.get(n))?;
        let mut total: Option<Var<'g>> = None;
        for (i, s) in batch.samples().iter().enumerate() {
            let draw = SampleDraw::for_item(seed, i, s.y0_w.shape(), self.schedule.steps());
            let xt = self.schedule.forward_diffuse(&s.y0_w, draw.t, &draw.eps_w)?;
            let cond = Conditioning::with_image(g, &s.c_p, &s.c_i, &theta, self.cfg.gamma_train)?;
            let eps_hat = denoise_var(g.constant(xt), draw.t, &cond, &d, Some(&theta))?;
            let l = dm_loss_var(
                g.constant(draw.eps_w),
                eps_hat,
                draw.t,
                self.cfg.dsd.omega,
                &self.schedule,
            )?;
            total = Some(match total {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let k = self.step;
        let batch = PreferenceBatch::new(
            self.batch_indices(k)
                .into_iter()
                .map(|i| self.samples[i].clone())
                .collect(),
        )?;
        let lr = warmup_lr(k, &self.cfg);
        let (loss, mut grads) = self.loss_and_grad(&batch, derive_seed(self.cfg.seed, &[STEP_TAG, k]))?;
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: k, loss });
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.values().map(|g| g.sum_squares()).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let c = self.cfg.grad_clip / norm;
                grads.values_mut().for_each(|g| *g = g.scale(c));
            }
        }
        self.opt
            .apply(&self.cfg.optimizer, self.theta.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepLog { step: k, lr, loss })
    }

    /// Runs up to `n` steps, stopping early at the end of training.
    pub fn run_steps(&mut self, n: u64, mut log: impl FnMut(&StepLog)) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            log(&self.step()?);
        }
        Ok(())
    }

    pub fn run(&mut self, log: impl FnMut(&StepLog)) -> Result<()> {
        self.run_steps(self.total_steps().saturating_sub(self.step), log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            data: self.data,
            dataset_hash: self.dataset_hash.clone(),
            step: self.step,
            denoiser: self.denoiser.clone(),
            reference: self.reference.clone(),
            theta: self.theta.clone(),
            optimizer: self.opt.clone(),
        }
    }
}

/// Pretrains the base, then runs every epoch. Returns the final state.
pub fn train(cfg: &TrainConfig, manifest: &Manifest) -> Result<Checkpoint> {
    train_logged(cfg, manifest, |_| {})
}

pub fn train_logged(cfg: &TrainConfig, manifest: &Manifest, log: impl FnMut(&StepLog)) -> Result<Checkpoint> {
    cfg.validate()?;
    if manifest.pairs().is_empty() {
        return Err(Error::Config("manifest has no preference pairs".into()));
    }
    check_compatible(&cfg.model, manifest)?;
    let base = pretrain_base(&cfg.base, &cfg.model, manifest.config(), &cfg.schedule.build()?)?;
    let mut t = Trainer::new(cfg, manifest, base)?;
    t.run(log)?;
    Ok(t.checkpoint())
}
