use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::{check_compatible, preference_samples};
use crate::conditioning::{denoise, denoise_text_only, ImageEmbedding, TextEmbedding};
use crate::dataset::{score_candidate, Candidate, CandidateKind, GroupRecord, Manifest};
use crate::error::{Error, Result};
use crate::numerics::random::derive_seed;
use crate::numerics::Tensor;
use crate::preference::{implicit_reward_gap, Fusion, Objective};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Fusion weight for sampling and reward gaps; `None` uses the
    /// training value.
    pub gamma: Option<f64>,
    /// Monte-Carlo draws per implicit reward gap.
    pub n_draws: usize,
    pub seed: u64,
    /// Caps the number of groups sampled for the alignment metrics.
    pub max_groups: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gamma: None,
            n_draws: 8,
            seed: 0,
            max_groups: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean S_text of generated samples against their prompts (CLIP-T analogue).
    pub text_align: f64,
    /// Mean S_visual of generated samples against their references (CLIP-I analogue).
    pub subject_align: f64,
    /// Fraction of pairs with a positive implicit reward gap; zero gaps count ½.
    pub pref_accuracy: f64,
    pub pairs: usize,
    pub samples: usize,
}

/// `key=value` lines.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "text_align={}", self.text_align)?;
        writeln!(f, "subject_align={}", self.subject_align)?;
        writeln!(f, "pref_accuracy={}", self.pref_accuracy)?;
        writeln!(f, "pairs={}", self.pairs)?;
        write!(f, "samples={}", self.samples)
    }
}

fn embeddings(ck: &Checkpoint, group: &GroupRecord) -> Result<(TextEmbedding, ImageEmbedding)> {
    let d = &ck.data;
    Ok((
        d.encoders.text_encoder().encode(&group.prompt)?,
        d.encoders.image_encoder(d.channels()).encode(&group.reference)?,
    ))
}

/// DDIM sample for `group` under fusion weight `gamma`.
pub fn sample(ck: &Checkpoint, group: &GroupRecord, gamma: f64, seed: u64) -> Result<Tensor> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let (c_p, c_i) = embeddings(ck, group)?;
    let s = ck.config.schedule.build()?;
    let dp = ck.denoiser.with_frozen(true);
    s.ddim_sample(
        |x, t| denoise(x, &c_p, &c_i, t, &dp, &ck.theta, gamma),
        &ck.data.image_shape(),
        seed,
    )
}

/// DDIM sample from the base denoiser with text-only conditioning.
pub fn sample_text_only(ck: &Checkpoint, group: &GroupRecord, seed: u64) -> Result<Tensor> {
    let (c_p, _) = embeddings(ck, group)?;
    let s = ck.config.schedule.build()?;
    s.ddim_sample(
        |x, t| denoise_text_only(x, &c_p, t, &ck.denoiser),
        &ck.data.image_shape(),
        seed,
    )
}

/// One sample per γ, all from the same seed, ordered by γ.
pub fn interpolate(ck: &Checkpoint, group: &GroupRecord, gammas: &[f64], seed: u64) -> Result<Vec<(f64, Tensor)>> {
    if gammas.is_empty() {
        return Err(Error::Config("need at least one gamma".into()));
    }
    let mut sorted = gammas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|g| Ok((g, sample(ck, group, g, seed)?)))
        .collect()
}

/// Sampling seed of `group` under a run seed.
pub fn sample_seed(seed: u64, group: u64) -> u64 {
    derive_seed(seed, &[0x5a3b1e, group])
}

/// Whether `ck` can consume `manifest`'s images and embeddings.
pub fn check_pairing(ck: &Checkpoint, manifest: &Manifest) -> Result<()> {
    check_compatible(&ck.config.model, manifest)?;
    if manifest.config().encoders != ck.data.encoders {
        return Err(Error::Config(
            "manifest and checkpoint use different toy encoders".into(),
        ));
    }
    Ok(())
}

/// S_text and S_visual of `image` against `group`.
pub fn alignment(manifest: &Manifest, group: &GroupRecord, image: &Tensor) -> Result<(f64, f64)> {
    let d = manifest.config();
    let s = score_candidate(
        &Candidate {
            id: group.id,
            group: group.id,
            kind: CandidateKind::External,
            image: image.clone(),
            prompt: group.prompt.clone(),
            reference: group.reference.clone(),
        },
        &d.encoders.text_encoder(),
        &d.encoders.image_encoder(d.channels()),
        d.phi,
    )?;
    Ok((s.s_text, s.s_visual))
}

pub fn evaluate(ck: &Checkpoint, manifest: &Manifest, opts: &EvalOptions) -> Result<EvalReport> {
    check_pairing(ck, manifest)?;
    if manifest.pairs().is_empty() {
        return Err(Error::EmptyPool("evaluation manifest has no pairs".into()));
    }
    let gamma = opts.gamma.unwrap_or(ck.config.gamma_train);
    let schedule = ck.config.schedule.build()?;
    let objective = Objective {
        denoiser: &ck.denoiser,
        reference: &ck.reference,
        schedule: &schedule,
        cfg: ck.config.dsd,
        fusion: Fusion::Subject { gamma },
    };
    let mut correct = 0.0;
    for (p, s) in manifest.pairs().iter().zip(preference_samples(manifest)?) {
        let gap = implicit_reward_gap(
            &objective,
            &ck.theta,
            &s,
            opts.n_draws,
            derive_seed(opts.seed, &[p.winner, p.loser]),
        )?;
        correct += if gap > 0.0 {
            1.0
        } else if gap == 0.0 {
            0.5
        } else {
            0.0
        };
    }

    let groups: BTreeSet<u64> = manifest.pairs().iter().map(|p| p.group).collect();
    let take = opts.max_groups.unwrap_or(usize::MAX);
    let (mut text_align, mut subject_align, mut n) = (0.0, 0.0, 0usize);
    for &gid in groups.iter().take(take) {
        let group = manifest.group(gid)?;
        let y = sample(ck, group, gamma, sample_seed(opts.seed, gid))?;
        let (t, v) = alignment(manifest, group, &y)?;
        text_align += t;
        subject_align += v;
        n += 1;
    }
    let report = EvalReport {
        text_align: text_align / n as f64,
        subject_align: subject_align / n as f64,
        pref_accuracy: correct / manifest.pairs().len() as f64,
        pairs: manifest.pairs().len(),
        samples: n,
    };
    if !(report.text_align.is_finite() && report.subject_align.is_finite()) {
        return Err(Error::DegenerateEmbedding("non-finite evaluation metric".into()));
    }
    Ok(report)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape("spearman needs two equal-length series of at least 2"));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
