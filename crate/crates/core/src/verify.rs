//! Self-check suite behind `prefdiff verify`.
//!
//! Every check is cheap and seeded. Primitive checks are ordered so each one
//! only relies on primitives checked before it; the first failing primitive
//! check therefore names the corrupted backward rule.

use std::fmt;

use crate::conditioning::{
    denoise_var, encode_text, freeze_reference, AdapterParams, Conditioning, DenoiserParams, ImageEmbedding,
    ModelConfig,
};
use crate::dataset::{
    build_manifest, load_manifest, rank_levels, save_manifest, Candidate, CandidateKind, DatasetConfig, ScoredCandidate,
};
use crate::error::Result;
use crate::numerics::random::{gaussian, rng};
use crate::numerics::{finite_diff_check, Bindings, Graph, ParamSet, Primitive, Tensor, Var};
use crate::preference::{
    dd_loss, dsd_loss, DsdConfig, Fusion, Objective, PreferenceBatch, PreferenceSample, SampleDraw,
};
use crate::schedule::{dm_loss_var, ScheduleSpec, WeightFn};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// The primitive a failing check implicates, if it isolates one.
    pub primitive: Option<Primitive>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// First primitive whose isolated gradient check failed.
    pub fn culprit(&self) -> Option<Primitive> {
        self.failures().find_map(|c| c.primitive)
    }
}

fn record(name: impl Into<String>, r: Result<(bool, String)>) -> CheckResult {
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.into(),
        pass,
        detail,
        primitive: None,
    }
}

type CheckFn = for<'g> fn(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>;

/// One scalar function per differentiable primitive; each uses only `sum`
/// and primitives listed before it.
const PRIMITIVE_CHECKS: [(Primitive, CheckFn); 14] = [
    (Primitive::Sum, |_, b| Ok(b.get("x")?.sum())),
    (Primitive::Add, |_, b| Ok(b.get("x")?.add(b.get("y")?)?.sum())),
    (Primitive::Sub, |_, b| Ok(b.get("x")?.sub(b.get("y")?)?.sum())),
    (Primitive::Scale, |_, b| Ok(b.get("x")?.scale(0.7).sum())),
    (Primitive::Reshape, |_, b| Ok(b.get("x")?.reshape(&[3, 2])?.sum())),
    (Primitive::Transpose, |_, b| Ok(b.get("x")?.t()?.sum())),
    (Primitive::Gather, |_, b| {
        Ok(b.get("x")?.gather(vec![0, 0, 3, 5].into(), &[4])?.sum())
    }),
    (Primitive::AddRow, |_, b| Ok(b.get("x")?.add_row(b.get("bias")?)?.sum())),
    (Primitive::Square, |_, b| Ok(b.get("x")?.square().sum())),
    (Primitive::Mul, |_, b| Ok(b.get("x")?.mul(b.get("y")?)?.sum())),
    (Primitive::Matmul, |_, b| Ok(b.get("x")?.matmul(b.get("w")?)?.sum())),
    (Primitive::Gelu, |_, b| Ok(b.get("x")?.gelu().sum())),
    (Primitive::Softplus, |_, b| Ok(b.get("x")?.softplus().sum())),
    (Primitive::SoftmaxRows, |_, b| {
        Ok(b.get("x")?.softmax_rows()?.square().sum())
    }),
];

fn primitive_params() -> Result<ParamSet> {
    let mut r = rng(0x9e1f);
    let mut p = ParamSet::new();
    p.insert("x", gaussian(&[2, 3], &mut r), false)?;
    p.insert("y", gaussian(&[2, 3], &mut r), false)?;
    p.insert("w", gaussian(&[3, 2], &mut r), false)?;
    p.insert("bias", gaussian(&[3], &mut r), false)?;
    Ok(p)
}

pub fn primitive_checks() -> Vec<CheckResult> {
    let params = match primitive_params() {
        Ok(p) => p,
        Err(e) => return vec![record("grad[primitives]", Err(e))],
    };
    PRIMITIVE_CHECKS
        .iter()
        .map(|&(p, f)| {
            let mut c = record(
                format!("grad[{p}]"),
                finite_diff_check(f, &params, 1e-5, 1e-6)
                    .map(|r| (r.pass, format!("max rel err {:.2e}", r.max_rel_err))),
            );
            if !c.pass {
                c.primitive = Some(p);
            }
            c
        })
        .collect()
}

/// Small random conditioned-denoiser fixture.
struct Fixture {
    cfg: ModelConfig,
    denoiser: DenoiserParams,
    batch: PreferenceBatch,
}

fn fixture(n: usize, seed: u64) -> Result<Fixture> {
    let cfg = ModelConfig::tiny();
    let denoiser = DenoiserParams::init(&cfg, seed)?;
    let mut r = rng(seed ^ 0xf1c5);
    let samples = (0..n)
        .map(|i| {
            PreferenceSample::new(
                encode_text(&[i % 4, (i + 1) % 4], 4, cfg.ctx_dim, seed)?,
                ImageEmbedding::new(gaussian(&[cfg.tokens(), cfg.clip_dim], &mut r))?,
                gaussian(&cfg.image_shape(), &mut r),
                gaussian(&cfg.image_shape(), &mut r),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture {
        cfg,
        denoiser,
        batch: PreferenceBatch::new(samples)?,
    })
}

/// Eq. 4 under subject fusion, as a function of the adapter.
fn dm_var<'g>(g: &'g Graph, b: &Bindings<'g>, f: &Fixture, theta: &AdapterParams, seed: u64) -> Result<Var<'g>> {
    let s = ScheduleSpec {
        steps: 10,
        ..Default::default()
    }
    .build()?;
    let d = f.denoiser.bind(g);
    let th = theta.vars_with(|n| b.get(n))?;
    let sample = &f.batch.samples()[0];
    let draw = SampleDraw::new(seed, sample.y0_w.shape(), s.steps());
    let xt = s.forward_diffuse(&sample.y0_w, draw.t, &draw.eps_w)?;
    let cond = Conditioning::with_image(g, &sample.c_p, &sample.c_i, &th, 1.0)?;
    let eps_hat = denoise_var(g.constant(xt), draw.t, &cond, &d, Some(&th))?;
    dm_loss_var(g.constant(draw.eps_w), eps_hat, draw.t, WeightFn::default(), &s)
}

/// Finite-difference checks of Eq. 4 and Eq. 12 against every adapter
/// parameter, over `seeds` seeds.
pub fn loss_gradient_checks(seeds: u64) -> Vec<CheckResult> {
    let dm = (0..seeds).map(|seed| -> Result<f64> {
        let f = fixture(1, seed)?;
        let theta = AdapterParams::random(&f.cfg, 100 + seed)?;
        Ok(finite_diff_check(|g, b| dm_var(g, b, &f, &theta, seed), theta.params(), 1e-5, 1e-4)?.max_rel_err)
    });
    let dsd = (0..seeds).map(|seed| -> Result<f64> {
        let f = fixture(2, seed)?;
        let theta = AdapterParams::random(&f.cfg, 200 + seed)?;
        let reference = AdapterParams::random(&f.cfg, 300 + seed)?;
        let s = ScheduleSpec {
            steps: 10,
            ..Default::default()
        }
        .build()?;
        let obj = Objective {
            denoiser: &f.denoiser,
            reference: &reference,
            schedule: &s,
            cfg: DsdConfig {
                beta: 0.05,
                ..Default::default()
            },
            fusion: Fusion::Subject { gamma: 1.0 },
        };
        Ok(finite_diff_check(|g, b| obj.loss_var(g, b, &f.batch, seed), theta.params(), 1e-3, 1e-4)?.max_rel_err)
    });
    let fold = |name: &str, it: &mut dyn Iterator<Item = Result<f64>>| {
        let r = it
            .collect::<Result<Vec<f64>>>()
            .map(|v| v.into_iter().fold(0.0, f64::max));
        record(
            name,
            r.map(|worst| (worst <= 1e-4, format!("{seeds} seeds, max rel err {worst:.2e}"))),
        )
    };
    vec![fold("grad[dm_loss]", &mut { dm }), fold("grad[dsd_loss]", &mut { dsd })]
}

/// Forward-diffuse with a recorded noise, reverse with the oracle
/// predictor, compare with `x0`.
pub fn ddim_roundtrip() -> CheckResult {
    record(
        "ddim_roundtrip",
        (|| {
            let mut worst: f64 = 0.0;
            for steps in [1, 10, 50] {
                let s = ScheduleSpec {
                    steps,
                    ..Default::default()
                }
                .build()?;
                let mut r = rng(0xdd1 + steps as u64);
                let x0 = gaussian(&[4, 4, 3], &mut r);
                let eps = gaussian(&[4, 4, 3], &mut r);
                let mut x = s.forward_diffuse(&x0, steps, &eps)?;
                for t in (1..=steps).rev() {
                    x = s.ddim_step(&x, &eps, t)?;
                }
                worst = worst.max(x.max_abs_diff(&x0)?);
            }
            Ok((worst <= 1e-9, format!("T in {{1,10,50}}, max |x0 err| {worst:.2e}")))
        })(),
    )
}

/// DSD at θ == ref with zero-initialised ICAM values is exactly ln 2.
pub fn ln2_identity(n: u64) -> CheckResult {
    record(
        "ln2_identity",
        (|| {
            let mut worst: f64 = 0.0;
            for seed in 0..n {
                let f = fixture(3, seed)?;
                let theta = AdapterParams::init(&f.cfg, seed)?;
                let reference = freeze_reference(&theta);
                let s = ScheduleSpec {
                    steps: 50,
                    ..Default::default()
                }
                .build()?;
                let l = dsd_loss(
                    &f.batch,
                    &theta,
                    &reference,
                    &f.denoiser,
                    &s,
                    DsdConfig::default(),
                    seed,
                    1.0,
                )?;
                worst = worst.max((l - std::f64::consts::LN_2).abs());
            }
            Ok((worst <= 1e-9, format!("{n} batches, max |loss - ln 2| {worst:.2e}")))
        })(),
    )
}

/// Eq. 8 equals Eq. 12 at γ = 0, bit for bit.
pub fn dd_dsd_relation(n: u64) -> CheckResult {
    record(
        "dd_equals_dsd_at_gamma0",
        (|| {
            for seed in 0..n {
                let f = fixture(2, seed)?;
                let theta = AdapterParams::random(&f.cfg, 400 + seed)?;
                let reference = AdapterParams::random(&f.cfg, 500 + seed)?;
                let s = ScheduleSpec {
                    steps: 10,
                    ..Default::default()
                }
                .build()?;
                let cfg = DsdConfig {
                    beta: 2.0,
                    ..Default::default()
                };
                let a = dd_loss(&f.batch, &theta, &reference, &f.denoiser, &s, cfg, seed)?;
                let b = dsd_loss(&f.batch, &theta, &reference, &f.denoiser, &s, cfg, seed, 0.0)?;
                if a.to_bits() != b.to_bits() {
                    return Ok((false, format!("seed {seed}: {a} vs {b}")));
                }
            }
            Ok((true, format!("{n} batches bit-identical")))
        })(),
    )
}

/// `rank_levels` against an independent full sort.
pub fn ranking_oracle(n: usize) -> CheckResult {
    record(
        "ranking_oracle",
        (|| {
            let mut r = rng(0x4a4c);
            let q = gaussian(&[n], &mut r);
            let scored: Vec<ScoredCandidate> = q
                .data()
                .iter()
                .enumerate()
                .map(|(i, &q)| ScoredCandidate {
                    candidate: Candidate {
                        id: i as u64,
                        group: 0,
                        kind: CandidateKind::External,
                        image: Tensor::zeros(&[1]),
                        prompt: vec![],
                        reference: Tensor::zeros(&[1]),
                    },
                    s_text: 0.0,
                    s_visual: 0.0,
                    q,
                    level: 0,
                })
                .collect();
            let ranked = rank_levels(scored, 5);
            let mut oracle: Vec<(f64, u64)> = q.data().iter().enumerate().map(|(i, &v)| (v, i as u64)).collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let chunk = n.div_ceil(5);
            for (pos, ((_, id), c)) in oracle.iter().zip(&ranked).enumerate() {
                let want = 5 - (pos / chunk) as u8;
                if c.id() != *id || c.level != want {
                    return Ok((false, format!("position {pos}: got id {} level {}", c.id(), c.level)));
                }
            }
            Ok((true, format!("{n} candidates")))
        })(),
    )
}

/// Save → load → save reproduces the manifest bytes.
pub fn manifest_roundtrip() -> CheckResult {
    record(
        "manifest_roundtrip",
        (|| {
            let cfg = DatasetConfig {
                instances: 12,
                ..Default::default()
            };
            let m = build_manifest(&cfg)?;
            let a = tempfile::tempdir()?;
            let b = tempfile::tempdir()?;
            let pa = save_manifest(&m, a.path())?;
            let back = load_manifest(&pa)?;
            let pb = save_manifest(&back, b.path())?;
            let same = back == m && std::fs::read(&pa)? == std::fs::read(&pb)?;
            Ok((same, format!("{} groups, {} pairs", m.groups().len(), m.pairs().len())))
        })(),
    )
}

/// Runs the whole suite; `on_check` sees each result as it completes.
pub fn run_all(mut on_check: impl FnMut(&CheckResult)) -> VerifyReport {
    let mut report = VerifyReport::default();
    let mut push = |c: CheckResult| {
        on_check(&c);
        report.checks.push(c);
    };
    for c in primitive_checks() {
        push(c);
    }
    for c in loss_gradient_checks(5) {
        push(c);
    }
    push(ddim_roundtrip());
    push(ln2_identity(20));
    push(dd_dsd_relation(10));
    push(ranking_oracle(1000));
    push(manifest_roundtrip());
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::inject_fault;

    #[test]
    fn clean_suite_passes() {
        let r = run_all(|_| {});
        for c in &r.checks {
            assert!(c.pass, "{c}");
        }
        assert_eq!(r.culprit(), None);
    }

    #[test]
    fn injected_fault_is_named() {
        for p in Primitive::ALL.into_iter().filter(|p| p.is_differentiable()) {
            inject_fault(Some(p));
            let checks = primitive_checks();
            inject_fault(None);
            let r = VerifyReport { checks };
            assert!(!r.passed(), "{p} fault went unnoticed");
            assert_eq!(r.culprit(), Some(p));
        }
    }
}
