//! Preference-dataset pipeline: synthetic subject/instruction triplets,
//! composite quality scoring (Eq. 13), five-level ranking, winner/loser pair
//! curation and the on-disk manifest.

mod manifest;
mod scoring;
mod synth;

use serde::{Deserialize, Serialize};

pub use manifest::{
    build_manifest, load_manifest, save_manifest, GroupRecord, Manifest, PairView, MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use scoring::{
    level_histogram, make_pairs, quality_score, rank_by_scope, rank_levels, score_candidate, Candidate, CandidateKind,
    PreferencePairRecord, ScoredCandidate,
};
pub use synth::{render, synth_triplets, Palette, Triplet, POSITIONS};

use crate::conditioning::EncoderSpec;
use crate::error::{Error, Result};

/// Whether quality levels are assigned within each (subject, instruction)
/// group or across the whole candidate pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankScope {
    #[default]
    Group,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of (reference, instruction) instances; each contributes three
    /// candidates.
    pub instances: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square subject.
    pub subject_size: usize,
    pub n_colors: usize,
    pub n_subjects: usize,
    /// Std of per-pixel noise added to every target.
    pub jitter: f64,
    /// Amplitude of subject colours relative to the rest of the palette.
    pub subject_gain: f64,
    pub phi: f64,
    pub levels: usize,
    pub max_per_winner: usize,
    pub ranking: RankScope,
    pub seed: u64,
    pub encoders: EncoderSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            instances: 300,
            height: 8,
            width: 8,
            subject_size: 4,
            n_colors: 6,
            n_subjects: 6,
            jitter: 0.02,
            subject_gain: 4.0,
            phi: 0.7,
            levels: 5,
            max_per_winner: 1,
            ranking: RankScope::Group,
            seed: 7,
            encoders: EncoderSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Image channels equal the text width so background colours can be
    /// grounded exactly in the toy encoders.
    pub fn channels(&self) -> usize {
        self.encoders.text_dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels()]
    }

    pub fn vocab(&self) -> usize {
        self.n_colors + POSITIONS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.instances == 0 {
            return bad("instances must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return bad(format!("phi must lie in [0, 1], got {}", self.phi));
        }
        if self.levels < 2 {
            return bad("need at least two quality levels".into());
        }
        if self.max_per_winner == 0 {
            return bad("max_per_winner must be at least 1".into());
        }
        if self.n_colors < 2 || self.n_subjects < 2 {
            return bad("need at least two colours and two subjects".into());
        }
        if self.subject_size == 0 || self.subject_size + self.encoders.patch >= self.height.min(self.width) {
            return bad("subject plus its placement marker must be smaller than the image".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be non-negative".into());
        }
        if !(self.subject_gain > 0.0 && self.subject_gain.is_finite()) {
            return bad("subject_gain must be positive".into());
        }
        let e = &self.encoders;
        if e.vocab != self.vocab() {
            return bad(format!(
                "encoder vocab {} must equal colours + positions = {}",
                e.vocab,
                self.vocab()
            ));
        }
        if e.clip_dim != e.text_dim {
            return bad("scoring compares text and image embeddings: clip_dim must equal text_dim".into());
        }
        if e.text_dim < self.vocab() + self.n_subjects {
            return bad("text_dim must be at least vocabulary + subjects so subject colours fit orthogonally".into());
        }
        if !self.height.is_multiple_of(e.patch) || !self.width.is_multiple_of(e.patch) || !self.subject_size.is_multiple_of(e.patch) {
            return bad("image and subject sizes must be multiples of the encoder patch".into());
        }
        Ok(())
    }
}
