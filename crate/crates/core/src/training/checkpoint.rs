//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `PDCKPT\0\n`, a little-endian `u64` header
//! length, a TOML header (schema, hashes, step, configs), a `u32` block
//! count, then per block a `u32` name length, the UTF-8 name and a `.ten`
//! tensor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::TrainConfig;
use crate::conditioning::{AdapterParams, DenoiserParams};
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, sha256_hex, write_tensor};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_SCHEMA: &str = "prefdiff-checkpoint/1";
const MAGIC: &[u8; 8] = b"PDCKPT\0\n";
const MAX_HEADER: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Dataset settings, including the toy-encoder seeds.
    pub data: DatasetConfig,
    pub dataset_hash: String,
    pub step: u64,
    pub denoiser: DenoiserParams,
    pub reference: AdapterParams,
    pub theta: AdapterParams,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config, &self.data)
    }
}

fn config_hash(cfg: &TrainConfig, data: &DatasetConfig) -> String {
    let json = serde_json::to_vec(&(cfg, data)).expect("configs serialize");
    sha256_hex(&json)
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    config_hash: String,
    dataset_hash: String,
    step: u64,
    optimizer_updates: u64,
    config: TrainConfig,
    data: DatasetConfig,
}

const THETA: &str = "theta/";
const REFERENCE: &str = "reference/";
const BASE: &str = "base/";
const FIRST: &str = "optim.first/";
const SECOND: &str = "optim.second/";

fn blocks(ck: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let params = [
        (THETA, ck.theta.params()),
        (REFERENCE, ck.reference.params()),
        (BASE, ck.denoiser.params()),
    ];
    for (prefix, set) in params {
        out.extend(set.iter().map(|(n, e)| (format!("{prefix}{n}"), &e.tensor)));
    }
    for (prefix, map) in [(FIRST, &ck.optimizer.first), (SECOND, &ck.optimizer.second)] {
        out.extend(map.iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
    }
    out
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        schema: CHECKPOINT_SCHEMA.to_owned(),
        config_hash: ck.config_hash(),
        dataset_hash: ck.dataset_hash.clone(),
        step: ck.step,
        optimizer_updates: ck.optimizer.updates,
        config: ck.config,
        data: ck.data,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let blocks = blocks(ck);
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, t) in blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn schema_err(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| schema_err("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(schema_err("not a prefdiff checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(schema_err(format!("implausible header length {len}")));
    }
    let mut text = vec![0u8; len as usize];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| schema_err("header is not UTF-8"))?;
    // The schema is checked before the full header is decoded so a newer
    // layout reports a schema mismatch rather than a field error.
    let schema = text
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("schema").and_then(|s| s.as_str()).map(str::to_owned))
        .ok_or_else(|| schema_err("header has no schema field"))?;
    if schema != CHECKPOINT_SCHEMA {
        return Err(schema_err(format!("found `{schema}`, expected `{CHECKPOINT_SCHEMA}`")));
    }
    let header: Header = toml::from_str(&text).map_err(|e| schema_err(format!("header: {e}")))?;
    if config_hash(&header.config, &header.data) != header.config_hash {
        return Err(Error::Integrity(
            "checkpoint config does not match its recorded hash".into(),
        ));
    }

    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let mut sets: BTreeMap<&str, ParamSet> = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for _ in 0..u32::from_le_bytes(n) {
        let mut l = [0u8; 4];
        r.read_exact(&mut l)?;
        let mut name = vec![0u8; u32::from_le_bytes(l) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| schema_err("block name is not UTF-8"))?;
        let t = read_tensor(r)?;
        if let Some(rest) = name.strip_prefix(FIRST) {
            first.insert(rest.to_owned(), t);
        } else if let Some(rest) = name.strip_prefix(SECOND) {
            second.insert(rest.to_owned(), t);
        } else {
            let prefix = [THETA, REFERENCE, BASE]
                .into_iter()
                .find(|p| name.starts_with(p))
                .ok_or_else(|| schema_err(format!("unknown block `{name}`")))?;
            sets.entry(prefix).or_default().insert(&name[prefix.len()..], t, true)?;
        }
    }
    let model = &header.config.model;
    let mut take = |p| sets.remove(p).unwrap_or_default();
    let theta = AdapterParams::from_params(model, take(THETA).with_frozen(false))?;
    let reference = AdapterParams::from_params(model, take(REFERENCE))?;
    let denoiser = DenoiserParams::from_params(model, take(BASE))?;
    Ok(Checkpoint {
        config: header.config,
        data: header.data,
        dataset_hash: header.dataset_hash,
        step: header.step,
        denoiser,
        reference,
        theta,
        optimizer: OptimizerState {
            first,
            second,
            updates: header.optimizer_updates,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, ck)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
