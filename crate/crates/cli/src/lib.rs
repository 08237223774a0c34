//! Command implementations behind the `prefdiff` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use prefdiff_core::dataset::{build_manifest, level_histogram, load_manifest, save_manifest, DatasetConfig, Manifest};
use prefdiff_core::numerics::io::save_tensor;
use prefdiff_core::numerics::{inject_fault, Primitive};
use prefdiff_core::training::{
    alignment, check_pairing, evaluate, interpolate, load_checkpoint, pretrain_base, sample, sample_seed,
    save_checkpoint, split_manifest, EvalOptions, StepLog, TrainConfig, Trainer,
};
use prefdiff_core::{verify, Error};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_LOG: &str = "loss.tsv";

#[derive(Parser, Debug)]
#[command(
    name = "prefdiff",
    version,
    about = "Preference-trained subject-conditioned diffusion adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the dataset, training and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key.path=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize, score, rank and pair a preference dataset.
    BuildDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train the adapter on a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Draw one sample per group.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Group ids; defaults to the first `sample.groups` groups.
        #[arg(long = "group")]
        groups: Vec<u64>,
        /// Fusion weight; defaults to the training value.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Sweep the fusion weight with a fixed seed.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "group")]
        groups: Vec<u64>,
        /// Comma-separated γ values; defaults to `sample.gammas`.
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
    },
    /// Alignment metrics and preference accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Run the invariant suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt one primitive's backward rule (test hook).
        #[arg(long, value_name = "PRIMITIVE")]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    HeldOut,
    Train,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_draws: usize,
    pub max_groups: Option<usize>,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub split: Split,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            n_draws: d.n_draws,
            max_groups: d.max_groups,
            gamma: d.gamma,
            seed: d.seed,
            split: Split::HeldOut,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub seed: u64,
    pub groups: usize,
    pub gammas: Vec<f64>,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            groups: 4,
            gammas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// File configuration merged with flag overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub sample: SampleSettings,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| config_err(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

impl RunConfig {
    /// File, then `--set` overrides, then `--seed`/`--out`.
    pub fn resolve(common: &Common) -> Result<Self> {
        let mut table = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in &common.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        if common.seed.is_some() {
            cfg.seed = common.seed;
        }
        if let Some(s) = cfg.seed {
            cfg.data.seed = s;
            cfg.train.seed = s;
            cfg.eval.seed = s;
            cfg.sample.seed = s;
        }
        if common.out.is_some() {
            cfg.out = common.out.clone();
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| config_err("no output directory: pass --out"))
    }

    /// Creates the output directory and writes the resolved config into it.
    pub fn persist(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string(self).map_err(|e| config_err(e.to_string()))?;
        fs::write(dir.join(CONFIG_FILE), text).with_context(|| format!("writing config into {}", dir.display()))?;
        Ok(dir.to_path_buf())
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
    match core {
        Some(Error::Config(_)) => 2,
        Some(Error::Integrity(_) | Error::Parse { .. }) => 3,
        Some(Error::Divergence { .. }) => 4,
        Some(Error::Schema(_)) => 5,
        _ => 1,
    }
}

pub fn build_dataset(common: &Common, out: &mut impl Write) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(common)?;
    cfg.data.validate()?;
    let dir = cfg.persist()?;
    let m = build_manifest(&cfg.data)?;
    let path = save_manifest(&m, &dir)?;
    let hist = level_histogram(m.candidates(), cfg.data.levels);
    for (i, n) in hist.iter().enumerate().rev() {
        writeln!(out, "level {}: {n}", i + 1)?;
    }
    writeln!(out, "candidates: {}", m.candidates().len())?;
    writeln!(out, "pairs: {}", m.pairs().len())?;
    writeln!(out, "manifest: {}", path.display())?;
    Ok(path)
}

fn log_line(w: &mut impl Write, l: &StepLog) -> std::io::Result<()> {
    writeln!(w, "{}\t{}\t{}", l.step, l.lr, l.loss)
}

pub fn train(
    common: &Common,
    manifest: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    out: &mut impl Write,
) -> Result<PathBuf> {
    let mut cfg = RunConfig::resolve(common)?;
    let m = load_manifest(manifest)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            cfg.train = ck.config;
            Trainer::resume(&ck, &m)?
        }
        None => {
            cfg.train.validate()?;
            if m.pairs().is_empty() {
                return Err(config_err("manifest has no preference pairs"));
            }
            prefdiff_core::training::check_compatible(&cfg.train.model, &m)?;
            let base = pretrain_base(
                &cfg.train.base,
                &cfg.train.model,
                m.config(),
                &cfg.train.schedule.build()?,
            )?;
            Trainer::new(&cfg.train, &m, base)?
        }
    };
    let dir = cfg.persist()?;
    let log_path = dir.join(LOSS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut io_err = None;
    let steps = max_steps.unwrap_or(u64::MAX);
    let res = trainer.run_steps(steps, |l| {
        if let Err(e) = log_line(&mut log, l) {
            io_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e).context("writing the loss log");
    }
    res?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.checkpoint(), &ck_path)?;
    writeln!(out, "step: {} of {}", trainer.step_count(), trainer.total_steps())?;
    writeln!(out, "checkpoint: {}", ck_path.display())?;
    Ok(ck_path)
}

fn pick_groups(m: &Manifest, requested: &[u64], default_n: usize) -> Result<Vec<u64>> {
    if requested.is_empty() {
        return Ok(m.groups().iter().take(default_n).map(|g| g.id).collect());
    }
    for &g in requested {
        m.group(g)?;
    }
    Ok(requested.to_vec())
}

pub fn sample_cmd(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    groups: &[u64],
    gamma: Option<f64>,
    out: &mut impl Write,
) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::resolve(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    check_pairing(&ck, &m)?;
    let dir = cfg.persist()?.join("samples");
    fs::create_dir_all(&dir)?;
    let gamma = gamma.unwrap_or(ck.config.gamma_train);
    let mut paths = Vec::new();
    for gid in pick_groups(&m, groups, cfg.sample.groups)? {
        let group = m.group(gid)?;
        let y = sample(&ck, group, gamma, sample_seed(cfg.sample.seed, gid))?;
        let (t, v) = alignment(&m, group, &y)?;
        let p = dir.join(format!("group_{gid}.ten"));
        save_tensor(&p, &y)?;
        writeln!(out, "group {gid}: s_text={t} s_visual={v} -> {}", p.display())?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn interpolate_cmd(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    groups: &[u64],
    gammas: &[f64],
    out: &mut impl Write,
) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    check_pairing(&ck, &m)?;
    let gammas = if gammas.is_empty() {
        cfg.sample.gammas.clone()
    } else {
        gammas.to_vec()
    };
    if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
        return Err(config_err(format!("gamma must be non-negative, got {g}")));
    }
    let dir = cfg.persist()?.join("interpolate");
    fs::create_dir_all(&dir)?;
    let series_path = dir.join("series.tsv");
    let mut series = BufWriter::new(File::create(&series_path)?);
    writeln!(series, "group\tgamma\ttext_align\tsubject_align")?;
    for gid in pick_groups(&m, groups, 1)? {
        let group = m.group(gid)?;
        for (k, (g, y)) in interpolate(&ck, group, &gammas, sample_seed(cfg.sample.seed, gid))?
            .into_iter()
            .enumerate()
        {
            let (t, v) = alignment(&m, group, &y)?;
            save_tensor(dir.join(format!("group_{gid}_{k}.ten")), &y)?;
            writeln!(series, "{gid}\t{g}\t{t}\t{v}")?;
            writeln!(out, "group {gid} gamma {g}: text_align={t} subject_align={v}")?;
        }
    }
    series.flush()?;
    Ok(series_path)
}

pub fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    split: Option<Split>,
    out: &mut impl Write,
) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    let (train, held) = split_manifest(&m, ck.config.seed, ck.config.holdout)?;
    let target = match split.unwrap_or(cfg.eval.split) {
        Split::HeldOut => held,
        Split::Train => train,
        Split::All => m,
    };
    let report = evaluate(
        &ck,
        &target,
        &EvalOptions {
            gamma: cfg.eval.gamma,
            n_draws: cfg.eval.n_draws,
            seed: cfg.eval.seed,
            max_groups: cfg.eval.max_groups,
        },
    )?;
    let dir = cfg.persist()?;
    fs::write(dir.join("report.txt"), format!("{report}\n"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    writeln!(out, "{report}")?;
    Ok(dir.join("report.txt"))
}

/// Returns whether every check passed.
pub fn verify_cmd(fault: Option<&str>, out: &mut impl Write) -> Result<bool> {
    let fault = fault
        .map(|n| Primitive::from_name(n).ok_or_else(|| config_err(format!("unknown primitive `{n}`"))))
        .transpose()?;
    inject_fault(fault);
    let mut lines = Vec::new();
    let report = verify::run_all(|c| lines.push(c.to_string()));
    inject_fault(None);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    if report.passed() {
        writeln!(out, "all {} checks passed", report.checks.len())?;
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        writeln!(out, "failed checks: {}", names.join(", "))?;
        if let Some(p) = report.culprit() {
            writeln!(out, "faulty primitive: {p}")?;
        }
    }
    Ok(report.passed())
}

/// Runs a parsed command; `Ok(false)` means verification failed.
pub fn run(cli: Cli, out: &mut impl Write) -> Result<bool> {
    match cli.command {
        Command::BuildDataset { common } => build_dataset(&common, out).map(|_| true),
        Command::Train {
            common,
            manifest,
            resume,
            max_steps,
        } => train(&common, &manifest, resume.as_deref(), max_steps, out).map(|_| true),
        Command::Sample {
            common,
            checkpoint,
            manifest,
            groups,
            gamma,
        } => sample_cmd(&common, &checkpoint, &manifest, &groups, gamma, out).map(|_| true),
        Command::Interpolate {
            common,
            checkpoint,
            manifest,
            groups,
            gammas,
        } => interpolate_cmd(&common, &checkpoint, &manifest, &groups, &gammas, out).map(|_| true),
        Command::Eval {
            common,
            checkpoint,
            manifest,
            split,
        } => eval_cmd(&common, &checkpoint, &manifest, split, out).map(|_| true),
        Command::Verify { inject_fault, .. } => verify_cmd(inject_fault.as_deref(), out),
    }
}
