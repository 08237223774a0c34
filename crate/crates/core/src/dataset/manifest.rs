//! Manifest: one JSON record per line in `manifest.jsonl`, images as `.ten`
//! files under `images/` next to it.
//!
//! ```text
//! {"record":"header","schema":1,"config_hash":"…","config":{…}}
//! {"record":"group","id":0,"prompt":[3,7],"reference":"images/ref_0.ten"}
//! {"record":"candidate","id":0,"group":0,"kind":"compliant","s_text":…,"s_visual":…,"q":…,"level":5,"image":"images/cand_0.ten"}
//! {"record":"pair","group":0,"winner":0,"loser":1}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scoring::{
    make_pairs, rank_by_scope, score_candidate, Candidate, CandidateKind, PreferencePairRecord, ScoredCandidate,
};
use super::synth::{synth_with, Palette};
use super::DatasetConfig;
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor, sha256_hex};
use crate::numerics::random::derive_seed;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRecord {
    pub id: u64,
    pub prompt: Vec<usize>,
    pub reference: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    config: DatasetConfig,
    groups: Vec<GroupRecord>,
    candidates: Vec<ScoredCandidate>,
    pairs: Vec<PreferencePairRecord>,
    group_index: HashMap<u64, usize>,
    candidate_index: HashMap<u64, usize>,
}

/// A pair resolved to its group and candidates.
#[derive(Clone, Copy, Debug)]
pub struct PairView<'a> {
    pub group: &'a GroupRecord,
    pub winner: &'a ScoredCandidate,
    pub loser: &'a ScoredCandidate,
}

impl Manifest {
    /// Checks that every reference resolves and every pair respects the
    /// level and score constraints.
    pub fn new(
        config: DatasetConfig,
        groups: Vec<GroupRecord>,
        candidates: Vec<ScoredCandidate>,
        pairs: Vec<PreferencePairRecord>,
    ) -> Result<Self> {
        let mut group_index = HashMap::new();
        for (i, g) in groups.iter().enumerate() {
            if group_index.insert(g.id, i).is_some() {
                return Err(Error::Integrity(format!("duplicate group id {}", g.id)));
            }
        }
        let mut candidate_index = HashMap::new();
        for (i, c) in candidates.iter().enumerate() {
            if !group_index.contains_key(&c.candidate.group) {
                return Err(Error::Integrity(format!(
                    "candidate {} refers to unknown group {}",
                    c.id(),
                    c.candidate.group
                )));
            }
            if candidate_index.insert(c.id(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate candidate id {}", c.id())));
            }
        }
        let m = Self {
            config,
            groups,
            candidates,
            pairs,
            group_index,
            candidate_index,
        };
        for p in &m.pairs {
            let v = m.pair(p)?;
            if v.winner.candidate.group != p.group || v.loser.candidate.group != p.group {
                return Err(Error::Integrity(format!(
                    "pair ({}, {}) crosses groups",
                    p.winner, p.loser
                )));
            }
            if !(v.winner.is_winner() && v.loser.is_loser() && v.winner.q > v.loser.q) {
                return Err(Error::Integrity(format!(
                    "pair ({}, {}) violates level/score ordering",
                    p.winner, p.loser
                )));
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn groups(&self) -> &[GroupRecord] {
        &self.groups
    }

    pub fn candidates(&self) -> &[ScoredCandidate] {
        &self.candidates
    }

    pub fn pairs(&self) -> &[PreferencePairRecord] {
        &self.pairs
    }

    pub fn group(&self, id: u64) -> Result<&GroupRecord> {
        self.group_index
            .get(&id)
            .map(|&i| &self.groups[i])
            .ok_or_else(|| Error::Integrity(format!("dangling group id {id}")))
    }

    pub fn candidate(&self, id: u64) -> Result<&ScoredCandidate> {
        self.candidate_index
            .get(&id)
            .map(|&i| &self.candidates[i])
            .ok_or_else(|| Error::Integrity(format!("dangling candidate id {id}")))
    }

    pub fn pair(&self, p: &PreferencePairRecord) -> Result<PairView<'_>> {
        Ok(PairView {
            group: self.group(p.group)?,
            winner: self.candidate(p.winner)?,
            loser: self.candidate(p.loser)?,
        })
    }

    /// Same manifest restricted to `pairs` (groups and candidates kept).
    pub fn with_pairs(&self, pairs: Vec<PreferencePairRecord>) -> Result<Self> {
        Self::new(self.config, self.groups.clone(), self.candidates.clone(), pairs)
    }
}

pub fn config_hash(cfg: &DatasetConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// synth → score → rank → pair.
pub fn build_manifest(cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    let palette = Palette::new(cfg)?;
    let triplets = synth_with(&palette, cfg.instances, cfg, cfg.seed)?;
    let text = cfg.encoders.text_encoder();
    let image = cfg.encoders.image_encoder(cfg.channels());
    let kinds = [
        CandidateKind::Compliant,
        CandidateKind::IdentityBroken,
        CandidateKind::InstructionIgnoring,
    ];
    let mut groups = Vec::with_capacity(triplets.len());
    let mut scored = Vec::with_capacity(3 * triplets.len());
    for t in triplets {
        for (k, (img, kind)) in t.pool.iter().zip(kinds).enumerate() {
            let c = Candidate {
                id: t.group * 3 + k as u64,
                group: t.group,
                kind,
                image: img.clone(),
                prompt: t.prompt.clone(),
                reference: t.reference.clone(),
            };
            scored.push(score_candidate(&c, &text, &image, cfg.phi)?);
        }
        groups.push(GroupRecord {
            id: t.group,
            prompt: t.prompt,
            reference: t.reference,
        });
    }
    let ranked = rank_by_scope(scored, cfg.levels, cfg.ranking);
    let pairs = make_pairs(&ranked, cfg.max_per_winner, derive_seed(cfg.seed, &[0x9a1e]))?;
    Manifest::new(*cfg, groups, ranked, pairs)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header {
        schema: u32,
        config_hash: String,
        config: DatasetConfig,
    },
    Group {
        id: u64,
        prompt: Vec<usize>,
        reference: String,
    },
    Candidate {
        id: u64,
        group: u64,
        kind: CandidateKind,
        s_text: f64,
        s_visual: f64,
        q: f64,
        level: u8,
        image: String,
    },
    Pair {
        group: u64,
        winner: u64,
        loser: u64,
    },
}

fn ref_path(group: u64) -> String {
    format!("images/ref_{group}.ten")
}

fn cand_path(id: u64) -> String {
    format!("images/cand_{id}.ten")
}

/// Writes `dir/manifest.jsonl` and `dir/images/*.ten`; returns the manifest
/// path.
pub fn save_manifest(m: &Manifest, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut out = Vec::new();
    let mut line = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
        Ok(())
    };
    line(&Record::Header {
        schema: MANIFEST_SCHEMA,
        config_hash: m.config_hash(),
        config: m.config,
    })?;
    for g in &m.groups {
        let rel = ref_path(g.id);
        save_tensor(dir.join(&rel), &g.reference)?;
        line(&Record::Group {
            id: g.id,
            prompt: g.prompt.clone(),
            reference: rel,
        })?;
    }
    for c in &m.candidates {
        let rel = cand_path(c.id());
        save_tensor(dir.join(&rel), &c.candidate.image)?;
        line(&Record::Candidate {
            id: c.id(),
            group: c.candidate.group,
            kind: c.candidate.kind,
            s_text: c.s_text,
            s_visual: c.s_visual,
            q: c.q,
            level: c.level,
            image: rel,
        })?;
    }
    for p in &m.pairs {
        line(&Record::Pair {
            group: p.group,
            winner: p.winner,
            loser: p.loser,
        })?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest from its file path or from the directory holding it.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;

    let mut header: Option<DatasetConfig> = None;
    let mut groups = Vec::new();
    let mut cands: Vec<(usize, Record)> = Vec::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        match (&header, rec) {
            (
                None,
                Record::Header {
                    schema,
                    config_hash: h,
                    config,
                },
            ) => {
                if schema != MANIFEST_SCHEMA {
                    return Err(Error::Schema(format!(
                        "manifest schema {schema}, expected {MANIFEST_SCHEMA}"
                    )));
                }
                if h != config_hash(&config) {
                    return Err(Error::Integrity(
                        "manifest config hash does not match its config".into(),
                    ));
                }
                header = Some(config);
            }
            (None, _) => {
                return Err(Error::Parse {
                    line,
                    msg: "first record must be the header".into(),
                })
            }
            (Some(_), Record::Header { .. }) => {
                return Err(Error::Parse {
                    line,
                    msg: "duplicate header".into(),
                })
            }
            (Some(_), Record::Group { id, prompt, reference }) => groups.push(GroupRecord {
                id,
                prompt,
                reference: load_tensor(dir.join(reference))?,
            }),
            (Some(_), r @ Record::Candidate { .. }) => cands.push((line, r)),
            (Some(_), Record::Pair { group, winner, loser }) => {
                pairs.push(PreferencePairRecord { group, winner, loser })
            }
        }
    }
    let config = header.ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let by_id: BTreeMap<u64, &GroupRecord> = groups.iter().map(|g| (g.id, g)).collect();
    let mut candidates = Vec::with_capacity(cands.len());
    for (line, r) in cands {
        let Record::Candidate {
            id,
            group,
            kind,
            s_text,
            s_visual,
            q,
            level,
            image,
        } = r
        else {
            unreachable!()
        };
        let g = by_id
            .get(&group)
            .ok_or_else(|| Error::Integrity(format!("line {line}: candidate {id} refers to unknown group {group}")))?;
        candidates.push(ScoredCandidate {
            candidate: Candidate {
                id,
                group,
                kind,
                image: load_tensor(dir.join(image))?,
                prompt: g.prompt.clone(),
                reference: g.reference.clone(),
            },
            s_text,
            s_visual,
            q,
            level,
        });
    }
    Manifest::new(config, groups, candidates, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            instances: 3,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_and_byte_determinism() {
        let m = build_manifest(&small()).unwrap();
        assert_eq!(m.pairs().len(), 6);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = save_manifest(&m, d1.path()).unwrap();
        let p2 = save_manifest(&build_manifest(&small()).unwrap(), d2.path()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(load_manifest(&p1).unwrap(), m);
        assert_eq!(load_manifest(d1.path()).unwrap(), m);
    }

    #[test]
    fn truncated_file_names_line() {
        let m = build_manifest(&small()).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = save_manifest(&m, d.path()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let n_lines = text.lines().count();
        let cut = &text[..text.len() - 10];
        fs::write(&p, cut).unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, n_lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_winner_is_integrity_error() {
        let m = build_manifest(&small()).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = save_manifest(&m, d.path()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let w = m.pairs()[0].winner;
        let bad = text.replacen(&format!("\"winner\":{w},"), "\"winner\":999999,", 1);
        assert_ne!(bad, text);
        fs::write(&p, bad).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn tampered_config_is_integrity_error() {
        let m = build_manifest(&small()).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = save_manifest(&m, d.path()).unwrap();
        let text = fs::read_to_string(&p)
            .unwrap()
            .replacen("\"phi\":0.7", "\"phi\":0.6", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Integrity(_))));
    }
}
