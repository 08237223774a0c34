use std::f64::consts::LN_2;
use std::sync::OnceLock;

use prefdiff_core::conditioning::DenoiserParams;
use prefdiff_core::dataset::{build_manifest, DatasetConfig, Manifest};
use prefdiff_core::numerics::random::derive_seed;
use prefdiff_core::preference::PreferenceBatch;
use prefdiff_core::training::{
    evaluate, interpolate, load_checkpoint, preference_samples, pretrain_base, sample, sample_text_only,
    save_checkpoint, split_manifest, train, train_logged, warmup_lr, BaseConfig, Checkpoint, EvalOptions, StepLog,
    TrainConfig, Trainer,
};
use prefdiff_core::Error;

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        warmup_steps: 10,
        base: BaseConfig {
            steps: 300,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Fx {
    manifest: Manifest,
    base: DenoiserParams,
}

fn fx() -> &'static Fx {
    static F: OnceLock<Fx> = OnceLock::new();
    F.get_or_init(|| {
        let manifest = build_manifest(&DatasetConfig {
            instances: 48,
            ..Default::default()
        })
        .unwrap();
        let c = cfg();
        let base = pretrain_base(&c.base, &c.model, manifest.config(), &c.schedule.build().unwrap()).unwrap();
        Fx { manifest, base }
    })
}

fn trainer(c: &TrainConfig) -> Trainer {
    Trainer::new(c, &fx().manifest, fx().base.clone()).unwrap()
}

fn bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut v = Vec::new();
    prefdiff_core::training::write_checkpoint(&mut v, ck).unwrap();
    v
}

fn run(t: &mut Trainer, n: u64) -> Vec<StepLog> {
    let mut log = Vec::new();
    t.run_steps(n, |l| log.push(*l)).unwrap();
    log
}

#[test]
fn initial_adapter_gives_ln2_on_any_batch() {
    let t = trainer(&TrainConfig { epochs: 0, ..cfg() });
    assert_eq!(t.total_steps(), 0);
    let ck = t.checkpoint();
    assert_eq!(ck.step, 0);
    assert!(ck.theta.params().with_frozen(true).bit_eq(ck.reference.params()));
    let samples = preference_samples(&fx().manifest).unwrap();
    for (i, chunk) in samples.chunks(5).take(20).enumerate() {
        let batch = PreferenceBatch::new(chunk.to_vec()).unwrap();
        let l = t
            .objective()
            .loss(t.theta(), &batch, derive_seed(3, &[i as u64]))
            .unwrap();
        assert!((l - LN_2).abs() <= 1e-9, "batch {i}: {l}");
    }
}

#[test]
fn fixed_seed_is_deterministic() {
    let c = TrainConfig { epochs: 1, ..cfg() };
    let (mut a, mut b) = (trainer(&c), trainer(&c));
    let (la, lb) = (run(&mut a, 20), run(&mut b, 20));
    assert_eq!(la, lb);
    assert_eq!(bytes(&a.checkpoint()), bytes(&b.checkpoint()));
    let other = TrainConfig { seed: 1, ..c };
    let mut o = trainer(&other);
    run(&mut o, 20);
    assert!(!o.theta().params().bit_eq(a.theta().params()));
}

#[test]
fn base_denoiser_is_untouched_and_reference_frozen() {
    let mut t = trainer(&TrainConfig { epochs: 1, ..cfg() });
    let before = t.checkpoint();
    run(&mut t, u64::MAX);
    let after = t.checkpoint();
    assert!(after.step > 0);
    let enc = |p: &prefdiff_core::numerics::ParamSet| {
        p.iter()
            .flat_map(|(n, e)| {
                n.bytes()
                    .chain(e.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<u8>>()
    };
    assert_eq!(enc(before.denoiser.params()), enc(after.denoiser.params()));
    assert_eq!(enc(fx().base.params()), enc(after.denoiser.params()));
    assert!(after.reference.params().bit_eq(before.reference.params()));
    assert!(!after.theta.params().bit_eq(before.theta.params()));
}

#[test]
fn checkpoint_roundtrip_continues_bit_exactly() {
    let c = cfg();
    let mut straight = trainer(&c);
    run(&mut straight, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&straight.checkpoint(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(bytes(&loaded), bytes(&straight.checkpoint()));

    let mut resumed = Trainer::resume(&loaded, &fx().manifest).unwrap();
    let a = run(&mut straight, 10);
    let b = run(&mut resumed, 10);
    assert_eq!(a.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (x.step, x.lr.to_bits(), x.loss.to_bits()),
            (y.step, y.lr.to_bits(), y.loss.to_bits())
        );
    }
    assert_eq!(bytes(&straight.checkpoint()), bytes(&resumed.checkpoint()));
}

#[test]
fn checkpoint_errors() {
    let ck = trainer(&TrainConfig { epochs: 0, ..cfg() }).checkpoint();
    let good = bytes(&ck);
    let read = |b: &[u8]| prefdiff_core::training::read_checkpoint(&mut &b[..]);

    let mut future = good.clone();
    let (from, to) = (b"prefdiff-checkpoint/1", b"prefdiff-checkpoint/2");
    let pos = future.windows(from.len()).position(|w| w == from).unwrap();
    future[pos..pos + to.len()].copy_from_slice(to);
    assert!(matches!(read(&future), Err(Error::Schema(_))));
    assert!(matches!(read(b"NOTACKPT........"), Err(Error::Schema(_))));
    assert!(matches!(read(&good[..4]), Err(Error::Schema(_))));
    assert!(read(&good[..good.len() - 3]).is_err());

    let other = build_manifest(&DatasetConfig {
        instances: 48,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(Trainer::resume(&ck, &other), Err(Error::Integrity(_))));
}

#[test]
fn bad_inputs_are_reported() {
    let empty = fx().manifest.with_pairs(vec![]).unwrap();
    assert!(matches!(train(&cfg(), &empty), Err(Error::Config(_))));
    assert!(matches!(
        train(&TrainConfig { lr: 0.0, ..cfg() }, &fx().manifest),
        Err(Error::Config(_))
    ));

    let wild = TrainConfig {
        lr: 1e150,
        grad_clip: 0.0,
        warmup_steps: 0,
        ..cfg()
    };
    let mut t = trainer(&wild);
    match t.run(|_| {}) {
        Err(Error::Divergence { step, .. }) => assert!(step >= 1, "diverged at {step}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn log_follows_warmup_and_learning_signal_appears_by_epoch_5() {
    let c = cfg();
    let mut t = trainer(&c);
    let log = run(&mut t, u64::MAX);
    let spe = t.steps_per_epoch() as usize;
    assert_eq!(log.len(), spe * c.epochs);
    assert!((log[0].loss - LN_2).abs() <= 1e-9);
    for l in &log {
        assert_eq!(l.lr.to_bits(), warmup_lr(l.step, &c).to_bits());
    }
    let epoch5 = &log[4 * spe..5 * spe];
    let mean = epoch5.iter().map(|l| l.loss).sum::<f64>() / spe as f64;
    assert!(mean < LN_2, "epoch-5 mean loss {mean}");
}

#[test]
fn reference_checkpoint_has_chance_accuracy_and_gamma_zero_is_text_only() {
    let ck = trainer(&TrainConfig { epochs: 0, ..cfg() }).checkpoint();
    let (_, held) = split_manifest(&fx().manifest, ck.config.seed, ck.config.holdout).unwrap();
    let opts = EvalOptions {
        n_draws: 2,
        max_groups: Some(3),
        ..Default::default()
    };
    for m in [&held, &fx().manifest] {
        let r = evaluate(&ck, m, &opts).unwrap();
        assert_eq!(r.pref_accuracy, 0.5);
        assert!(r.text_align.is_finite() && r.subject_align.is_finite());
    }

    let group = &fx().manifest.groups()[1];
    let text_only = sample_text_only(&ck, group, 42).unwrap();
    let sweep = interpolate(&ck, group, &[0.0], 42).unwrap();
    assert_eq!(sweep.len(), 1);
    assert!(sweep[0].1.bit_eq(&text_only));
    assert!(sample(&ck, group, 0.7, 42)
        .unwrap()
        .bit_eq(&sample(&ck, group, 0.7, 42).unwrap()));
    assert!(interpolate(&ck, group, &[], 42).is_err());
    assert!(interpolate(&ck, group, &[-0.1], 42).is_err());
}

#[test]
fn train_logged_matches_trainer() {
    let c = TrainConfig { epochs: 1, ..cfg() };
    let mut seen = Vec::new();
    let ck = train_logged(&c, &fx().manifest, |l| seen.push(*l)).unwrap();
    let mut t = trainer(&c);
    assert_eq!(run(&mut t, u64::MAX), seen);
    assert_eq!(bytes(&ck), bytes(&t.checkpoint()));
}
