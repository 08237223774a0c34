use std::collections::BTreeMap;

use prefdiff_core::dataset::{
    build_manifest, load_manifest, make_pairs, quality_score, rank_by_scope, rank_levels, save_manifest, Candidate,
    CandidateKind, DatasetConfig, RankScope, ScoredCandidate,
};
use prefdiff_core::numerics::Tensor;
use proptest::prelude::*;

fn cand(id: u64, group: u64, q: f64) -> ScoredCandidate {
    ScoredCandidate {
        candidate: Candidate {
            id,
            group,
            kind: CandidateKind::External,
            image: Tensor::zeros(&[1]),
            prompt: vec![],
            reference: Tensor::zeros(&[1]),
        },
        s_text: 0.0,
        s_visual: 0.0,
        q,
        level: 0,
    }
}

/// Scores drawn from a small grid so ties are common; ids are a shuffled range.
fn pool(max: usize) -> impl Strategy<Value = Vec<ScoredCandidate>> {
    prop::collection::vec((0i32..40, 0u64..6), 1..=max).prop_flat_map(|v| {
        let n = v.len();
        (Just(v), Just((0..n as u64).collect::<Vec<_>>()).prop_shuffle()).prop_map(|(v, ids)| {
            v.into_iter()
                .zip(ids)
                .map(|((q, g), id)| cand(id, g, q as f64 / 8.0 - 2.0))
                .collect()
        })
    })
}

/// Level from the count of candidates strictly ahead (higher q, or equal q
/// and smaller id); no sorting involved.
fn oracle_level(all: &[ScoredCandidate], c: &ScoredCandidate, k: usize) -> u8 {
    let ahead = all
        .iter()
        .filter(|o| o.q > c.q || (o.q == c.q && o.candidate.id < c.candidate.id))
        .count();
    (k - ahead / all.len().div_ceil(k)) as u8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_strictly_increasing_in_each_score(
        phi in 0.001f64..0.999, st in -1.0f64..1.0, sv in -1.0f64..1.0, d in 1e-6f64..1.0,
    ) {
        let q = quality_score(st, sv, phi);
        prop_assert!(quality_score(st + d, sv, phi) > q);
        prop_assert!(quality_score(st, sv + d, phi) > q);
    }

    #[test]
    fn rank_levels_matches_counting_oracle(scored in pool(1000), k in 2usize..8) {
        let ranked = rank_levels(scored.clone(), k);
        prop_assert_eq!(ranked.len(), scored.len());
        for w in ranked.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            prop_assert!(a.q > b.q || (a.q == b.q && a.candidate.id < b.candidate.id));
        }
        for c in &ranked {
            prop_assert_eq!(c.level, oracle_level(&scored, c, k), "id {}", c.candidate.id);
        }
    }

    #[test]
    fn emitted_pairs_respect_levels_and_scores(
        scored in pool(300), cap in 1usize..4, seed in any::<u64>(), global in any::<bool>(),
    ) {
        let scope = if global { RankScope::Global } else { RankScope::Group };
        let ranked = rank_by_scope(scored, 5, scope);
        let by_id: BTreeMap<u64, &ScoredCandidate> = ranked.iter().map(|c| (c.candidate.id, c)).collect();
        let Ok(pairs) = make_pairs(&ranked, cap, seed) else { return Ok(()) };
        let mut per_winner: BTreeMap<u64, usize> = BTreeMap::new();
        for p in &pairs {
            let (w, l) = (by_id[&p.winner], by_id[&p.loser]);
            prop_assert!(w.level == 4 || w.level == 5);
            prop_assert!((1..=3).contains(&l.level));
            prop_assert!(w.q > l.q);
            prop_assert!(w.candidate.group == p.group && l.candidate.group == p.group);
            *per_winner.entry(p.winner).or_default() += 1;
        }
        prop_assert!(per_winner.values().all(|&n| n <= cap));
        prop_assert_eq!(make_pairs(&ranked, cap, seed).unwrap(), pairs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn pipeline_is_byte_deterministic(seed in any::<u64>(), phi in 0.1f64..0.9) {
        let cfg = DatasetConfig { instances: 16, seed, phi, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = save_manifest(&build_manifest(&cfg).unwrap(), a.path()).unwrap();
        let pb = save_manifest(&build_manifest(&cfg).unwrap(), b.path()).unwrap();
        prop_assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        let m = load_manifest(&pa).unwrap();
        for c in m.candidates() {
            prop_assert_eq!(c.q.to_bits(), quality_score(c.s_text, c.s_visual, phi).to_bits());
        }
    }
}

#[test]
fn paper_phi_pipeline_pairs_are_valid() {
    let cfg = DatasetConfig {
        instances: 100,
        ..Default::default()
    };
    assert_eq!(cfg.phi, 0.7);
    let m = build_manifest(&cfg).unwrap();
    assert!(!m.pairs().is_empty());
    for p in m.pairs() {
        let v = m.pair(p).unwrap();
        assert!(v.winner.level >= 4 && (1..=3).contains(&v.loser.level) && v.winner.q > v.loser.q);
    }
}
