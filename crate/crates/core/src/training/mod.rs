//! Adapter-only optimization under the DSD objective, checkpointing and
//! evaluation.
//!
//! The frozen base denoiser is pretrained text-only ([`pretrain_base`]);
//! afterwards only [`AdapterParams`] move.

mod base;
mod checkpoint;
mod eval;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

pub use base::{pretrain_base, BaseConfig};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_SCHEMA,
};
pub use eval::{
    alignment, check_pairing, evaluate, interpolate, sample, sample_seed, sample_text_only, spearman, EvalOptions,
    EvalReport,
};
pub use optim::{OptimizerConfig, OptimizerState};
pub use trainer::{train, train_logged, StepLog, Trainer};

use crate::conditioning::{AdapterParams, ModelConfig};
use crate::dataset::{Manifest, PreferencePairRecord};
use crate::error::{Error, Result};
use crate::numerics::random::derive_seed;
use crate::preference::{DsdConfig, PreferenceSample};
use crate::schedule::ScheduleSpec;

/// Which loss drives the adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Eq. 12.
    #[default]
    Dsd,
    /// Eq. 4 on the winning targets only (ablation).
    Dm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dsd: DsdConfig,
    pub gamma_train: f64,
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Fraction of pairs held out from training.
    pub holdout: f64,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub base: BaseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            dsd: DsdConfig {
                beta: 0.05,
                ..DsdConfig::default()
            },
            gamma_train: 1.0,
            objective: ObjectiveKind::Dsd,
            optimizer: OptimizerConfig::default(),
            grad_clip: 1.0,
            holdout: 0.1,
            schedule: ScheduleSpec::default(),
            model: ModelConfig::default(),
            base: BaseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.gamma_train >= 0.0 && self.gamma_train.is_finite()) {
            return bad(format!("gamma_train must be non-negative, got {}", self.gamma_train));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must lie in [0, 1), got {}", self.holdout));
        }
        self.dsd.validate()?;
        self.optimizer.validate()?;
        self.model.validate()?;
        self.base.validate()?;
        self.schedule.build().map(|_| ())
    }
}

/// `lr·min(1, step/warmup_steps)`; constant when `warmup_steps == 0`.
pub fn warmup_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// Rejects a model whose shapes cannot consume the manifest's images and
/// embeddings.
pub fn check_compatible(model: &ModelConfig, manifest: &Manifest) -> Result<()> {
    let d = manifest.config();
    let [h, w, c] = d.image_shape();
    let e = &d.encoders;
    let checks = [
        ("height", model.height, h),
        ("width", model.width, w),
        ("channels", model.channels, c),
        ("ctx_dim", model.ctx_dim, e.text_dim),
        ("clip_dim", model.clip_dim, e.clip_dim),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(Error::Config(format!("model {name} = {got}, dataset needs {want}")));
        }
    }
    Ok(())
}

/// Preference samples for every pair of `manifest`, in manifest order.
pub fn preference_samples(manifest: &Manifest) -> Result<Vec<PreferenceSample>> {
    let d = manifest.config();
    let text = d.encoders.text_encoder();
    let image = d.encoders.image_encoder(d.channels());
    let mut cache: std::collections::BTreeMap<
        u64,
        (crate::conditioning::TextEmbedding, crate::conditioning::ImageEmbedding),
    > = Default::default();
    manifest
        .pairs()
        .iter()
        .map(|p| {
            let v = manifest.pair(p)?;
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(v.group.id) {
                e.insert((text.encode(&v.group.prompt)?, image.encode(&v.group.reference)?));
            }
            let (c_p, c_i) = cache[&v.group.id].clone();
            PreferenceSample::new(
                c_p,
                c_i,
                v.winner.candidate.image.clone(),
                v.loser.candidate.image.clone(),
            )
        })
        .collect()
}

const SPLIT_TAG: u64 = 0x5b11_7000;

/// Whether a pair is held out: a seeded hash of its (winner, loser) ids,
/// compared against `fraction`.
pub fn is_held_out(pair: &PreferencePairRecord, seed: u64, fraction: f64) -> bool {
    let h = derive_seed(seed, &[SPLIT_TAG, pair.winner, pair.loser]);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// `(train, held_out)` manifests sharing groups and candidates.
pub fn split_manifest(manifest: &Manifest, seed: u64, fraction: f64) -> Result<(Manifest, Manifest)> {
    let (held, train): (Vec<_>, Vec<_>) = manifest
        .pairs()
        .iter()
        .cloned()
        .partition(|p| is_held_out(p, seed, fraction));
    Ok((manifest.with_pairs(train)?, manifest.with_pairs(held)?))
}

/// The initial adapter for `cfg`: zero ICAM value projections, so the
/// conditioned model starts output-equal to the reference.
pub fn initial_adapter(cfg: &TrainConfig) -> Result<AdapterParams> {
    AdapterParams::init(&cfg.model, derive_seed(cfg.seed, &[0xada9]))
}
