//! Eq. 13 scoring, quantile leveling and winner/loser pairing.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::RankScope;
use crate::conditioning::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, rng};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Compliant,
    IdentityBroken,
    InstructionIgnoring,
    /// Produced outside the synthetic generator.
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: u64,
    /// The (reference, instruction) instance the candidate answers.
    pub group: u64,
    pub kind: CandidateKind,
    pub image: Tensor,
    pub prompt: Vec<usize>,
    pub reference: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub s_text: f64,
    pub s_visual: f64,
    pub q: f64,
    /// 1..=K once ranked; 0 before.
    pub level: u8,
}

impl ScoredCandidate {
    pub fn id(&self) -> u64 {
        self.candidate.id
    }

    pub fn is_winner(&self) -> bool {
        self.level >= 4
    }

    pub fn is_loser(&self) -> bool {
        (1..=3).contains(&self.level)
    }
}

fn unit(v: &Tensor, what: &str) -> Result<Vec<f64>> {
    let n = v.norm();
    if n.is_nan() || n <= 1e-12 {
        return Err(Error::DegenerateEmbedding(format!("{what} has zero norm")));
    }
    Ok(v.data().iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eq. 13: `φ·s_text + (1 − φ)·s_visual`.
pub fn quality_score(s_text: f64, s_visual: f64, phi: f64) -> f64 {
    phi * s_text + (1.0 - phi) * s_visual
}

/// Eq. 13 with `s_text` the mean over prompt tokens of the cosine between
/// the token and the pooled candidate embedding, and `s_visual` the cosine of
/// pooled candidate and reference embeddings.
pub fn score_candidate(
    c: &Candidate,
    text_enc: &TextEncoder,
    img_enc: &ImageEncoder,
    phi: f64,
) -> Result<ScoredCandidate> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::Config(format!("phi must lie in [0, 1], got {phi}")));
    }
    let prompt = text_enc.encode(&c.prompt)?;
    let img = unit(&img_enc.encode(&c.image)?.pooled(), "candidate image embedding")?;
    let reference = unit(&img_enc.encode(&c.reference)?.pooled(), "reference image embedding")?;
    if prompt.dim() != img.len() {
        return Err(Error::shape(format!(
            "text width {} differs from image embedding width {}",
            prompt.dim(),
            img.len()
        )));
    }
    let mut s_text = 0.0;
    for r in 0..prompt.len() {
        s_text += dot(
            &unit(&Tensor::vector(prompt.tokens().row(r))?, "token embedding")?,
            &img,
        );
    }
    s_text /= prompt.len() as f64;
    let s_visual = dot(&img, &reference);
    Ok(ScoredCandidate {
        candidate: c.clone(),
        s_text,
        s_visual,
        q: quality_score(s_text, s_visual, phi),
        level: 0,
    })
}

/// Descending `q`, ties by ascending id.
fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.q.total_cmp(&a.q).then(a.id().cmp(&b.id()))
}

/// Sorts by [`rank_order`] and assigns `K` contiguous levels of
/// `⌈n/K⌉` candidates each, the first bucket at level `K`.
pub fn rank_levels(mut scored: Vec<ScoredCandidate>, k: usize) -> Vec<ScoredCandidate> {
    assert!((1..=u8::MAX as usize).contains(&k), "level count out of range");
    scored.sort_by(rank_order);
    let chunk = scored.len().div_ceil(k).max(1);
    for (i, s) in scored.iter_mut().enumerate() {
        s.level = (k - i / chunk) as u8;
    }
    scored
}

/// Levels per group (ordered by group id) or over the whole pool.
pub fn rank_by_scope(scored: Vec<ScoredCandidate>, k: usize, scope: RankScope) -> Vec<ScoredCandidate> {
    match scope {
        RankScope::Global => rank_levels(scored, k),
        RankScope::Group => {
            let mut groups: BTreeMap<u64, Vec<ScoredCandidate>> = BTreeMap::new();
            for s in scored {
                groups.entry(s.candidate.group).or_default().push(s);
            }
            groups.into_values().flat_map(|g| rank_levels(g, k)).collect()
        }
    }
}

/// Candidate count per level, index 0 = level 1.
pub fn level_histogram(scored: &[ScoredCandidate], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for s in scored {
        if (1..=k).contains(&(s.level as usize)) {
            h[s.level as usize - 1] += 1;
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePairRecord {
    pub group: u64,
    pub winner: u64,
    pub loser: u64,
}

/// Capped-cartesian pairing within each group: every winner (level 4–5)
/// is paired with up to `max_per_winner` losers (level 1–3) of its group,
/// sampled without replacement; pairs with `winner.q ≤ loser.q` are dropped.
pub fn make_pairs(ranked: &[ScoredCandidate], max_per_winner: usize, seed: u64) -> Result<Vec<PreferencePairRecord>> {
    if !ranked.iter().any(ScoredCandidate::is_winner) {
        return Err(Error::EmptyPool("no winning candidates (levels 4-5)".into()));
    }
    if !ranked.iter().any(ScoredCandidate::is_loser) {
        return Err(Error::EmptyPool("no losing candidates (levels 1-3)".into()));
    }
    let mut groups: BTreeMap<u64, Vec<&ScoredCandidate>> = BTreeMap::new();
    for s in ranked {
        groups.entry(s.candidate.group).or_default().push(s);
    }
    let mut pairs = Vec::new();
    for (group, mut members) in groups {
        members.sort_by(|a, b| rank_order(a, b));
        let losers: Vec<&ScoredCandidate> = members.iter().copied().filter(|s| s.is_loser()).collect();
        for w in members.iter().filter(|s| s.is_winner()) {
            let mut r = rng(derive_seed(seed, &[group, w.id()]));
            for l in losers.choose_multiple(&mut r, max_per_winner) {
                if w.q > l.q {
                    pairs.push(PreferencePairRecord {
                        group,
                        winner: w.id(),
                        loser: l.id(),
                    });
                }
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(id: u64, q: f64) -> ScoredCandidate {
        ScoredCandidate {
            candidate: Candidate {
                id,
                group: 0,
                kind: CandidateKind::External,
                image: Tensor::zeros(&[1]),
                prompt: vec![0],
                reference: Tensor::zeros(&[1]),
            },
            s_text: q,
            s_visual: q,
            q,
            level: 0,
        }
    }

    use crate::dataset::{DatasetConfig, Palette};

    /// Uniform image of one palette colour.
    fn uniform(cfg: &DatasetConfig, colour: &[f64]) -> Tensor {
        let data = (0..cfg.height * cfg.width)
            .flat_map(|_| colour.iter().copied())
            .collect();
        Tensor::new(cfg.image_shape().to_vec(), data).unwrap()
    }

    fn grounded() -> (DatasetConfig, Palette, TextEncoder, ImageEncoder) {
        let cfg = DatasetConfig::default();
        let p = Palette::new(&cfg).unwrap();
        let t = cfg.encoders.text_encoder();
        let i = cfg.encoders.image_encoder(cfg.channels());
        (cfg, p, t, i)
    }

    fn cand(image: Tensor, prompt: Vec<usize>, reference: Tensor) -> Candidate {
        Candidate {
            id: 0,
            group: 0,
            kind: CandidateKind::External,
            image,
            prompt,
            reference,
        }
    }

    #[test]
    fn eq13_examples() {
        let (cfg, p, t, i) = grounded();
        let bg = uniform(&cfg, &p.backgrounds[2]);
        let subj = uniform(&cfg, &p.subjects[0]);

        // Everything along one unit vector.
        for phi in [0.0, 0.3, 0.7, 1.0] {
            let s = score_candidate(&cand(bg.clone(), vec![2, 2], bg.clone()), &t, &i, phi).unwrap();
            assert!((s.s_text - 1.0).abs() < 1e-9 && (s.s_visual - 1.0).abs() < 1e-9);
            assert!((s.q - 1.0).abs() < 1e-9);
        }
        // Paper setting φ = 0.7 with s_text = 1, s_visual = 0.
        let s = score_candidate(&cand(bg.clone(), vec![2], subj.clone()), &t, &i, 0.7).unwrap();
        assert!((s.s_text - 1.0).abs() < 1e-9 && s.s_visual.abs() < 1e-9);
        assert!((s.q - 0.7).abs() < 1e-9);
        // Prompt orthogonal to the image, candidate identical to reference.
        for phi in [0.2, 0.7] {
            let s = score_candidate(&cand(subj.clone(), vec![4], subj.clone()), &t, &i, phi).unwrap();
            assert!(s.s_text.abs() < 1e-9 && (s.s_visual - 1.0).abs() < 1e-9);
            assert!((s.q - (1.0 - phi)).abs() < 1e-9);
            assert_eq!(s.q, phi * s.s_text + (1.0 - phi) * s.s_visual);
        }
    }

    #[test]
    fn zero_image_is_degenerate() {
        let (cfg, p, t, i) = grounded();
        let zero = Tensor::zeros(&cfg.image_shape());
        let bg = uniform(&cfg, &p.backgrounds[0]);
        assert!(matches!(
            score_candidate(&cand(zero, vec![0], bg.clone()), &t, &i, 0.7),
            Err(Error::DegenerateEmbedding(_))
        ));
        assert!(matches!(
            score_candidate(&cand(bg.clone(), vec![0], bg), &t, &i, 1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ten_distinct_scores_two_per_level() {
        let scored: Vec<_> = (0..10).map(|i| fake(i, i as f64 * 0.1)).collect();
        let r = rank_levels(scored, 5);
        assert_eq!(level_histogram(&r, 5), vec![2; 5]);
        assert_eq!((r[0].id(), r[0].level), (9, 5));
        assert_eq!((r[1].id(), r[1].level), (8, 5));
    }

    #[test]
    fn three_candidates_fill_top_levels() {
        let r = rank_levels(vec![fake(0, 0.2), fake(1, 0.9), fake(2, 0.5)], 5);
        assert_eq!(level_histogram(&r, 5), vec![0, 0, 1, 1, 1]);
        assert_eq!(r.iter().map(|s| s.id()).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn ties_follow_id_order() {
        let r = rank_levels((0..5).rev().map(|i| fake(i, 0.4)).collect(), 5);
        assert_eq!(
            r.iter().map(|s| (s.id(), s.level)).collect::<Vec<_>>(),
            vec![(0, 5), (1, 4), (2, 3), (3, 2), (4, 1)]
        );
    }

    fn two_by_three() -> Vec<ScoredCandidate> {
        // 5 candidates into 5 levels: ids 0,1 winners, 2,3,4 losers.
        rank_levels((0..5).map(|i| fake(i, 1.0 - i as f64 * 0.1)).collect(), 5)
    }

    #[test]
    fn capped_cartesian_counts() {
        let r = two_by_three();
        let full = make_pairs(&r, 3, 0).unwrap();
        assert_eq!(full.len(), 6);
        assert_eq!(make_pairs(&r, 1, 0).unwrap().len(), 2);
        assert_eq!(make_pairs(&r, 10, 0).unwrap().len(), 6);
        assert_eq!(make_pairs(&r, 2, 5).unwrap(), make_pairs(&r, 2, 5).unwrap());
        for p in &full {
            let w = r.iter().find(|s| s.id() == p.winner).unwrap();
            let l = r.iter().find(|s| s.id() == p.loser).unwrap();
            assert!(w.is_winner() && l.is_loser() && w.q > l.q);
        }
    }

    #[test]
    fn empty_pools() {
        let mut r = two_by_three();
        for s in &mut r {
            s.level = 5;
        }
        assert!(matches!(make_pairs(&r, 1, 0), Err(Error::EmptyPool(_))));
        for s in &mut r {
            s.level = 2;
        }
        assert!(matches!(make_pairs(&r, 1, 0), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn equal_scores_are_not_paired() {
        let r = rank_levels((0..5).map(|i| fake(i, 0.5)).collect(), 5);
        assert!(make_pairs(&r, 3, 0).unwrap().is_empty());
    }
}
