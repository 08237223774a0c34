use prefdiff_core::conditioning::{
    attention, denoise, denoise_text_only, encode_text, fuse, ipm, AdapterParams, DenoiserParams, ImageEmbedding,
    ModelConfig,
};
use prefdiff_core::numerics::random::{gaussian, rng};
use prefdiff_core::numerics::{matmul_nt, Tensor};
use prefdiff_core::preference::{DsdConfig, Fusion, Objective, PreferenceBatch, PreferenceSample};
use prefdiff_core::schedule::ScheduleSpec;
use proptest::prelude::*;

fn zero_value_projections(ap: &mut AdapterParams) {
    let names: Vec<String> = ap
        .params()
        .names()
        .filter(|n| n.ends_with(".wv"))
        .map(str::to_owned)
        .collect();
    assert_eq!(names.len(), ap.config().blocks);
    for n in names {
        ap.params_mut().trainable_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one_on_both_branches(seed in any::<u64>(), n_text in 1usize..6) {
        let cfg = ModelConfig::tiny();
        let dp = DenoiserParams::init(&cfg, seed).unwrap();
        let ap = AdapterParams::random(&cfg, seed ^ 1).unwrap();
        let mut r = rng(seed ^ 2);
        let q = gaussian(&[cfg.tokens(), cfg.attn_dim], &mut r).scale(3.0);
        let c_p = encode_text(&(0..n_text).map(|i| i % 4).collect::<Vec<_>>(), 4, cfg.ctx_dim, seed).unwrap();
        let c_i = ImageEmbedding::new(gaussian(&[cfg.tokens(), cfg.clip_dim], &mut r)).unwrap();
        let img_ctx = ipm(&c_i, &ap).unwrap();
        for b in 0..cfg.blocks {
            let (wk_text, _) = dp.text_projections(b).unwrap();
            let suffix = format!("icam{b}.wk");
            let wk_img = ap.params().iter().find(|(n, _)| n.ends_with(&suffix)).map(|(_, e)| &e.tensor).unwrap();
            for k in [matmul_nt(c_p.tokens(), wk_text).unwrap(), matmul_nt(&img_ctx, wk_img).unwrap()] {
                // With V = I the attention output is the weight matrix itself.
                let w = attention(&q, &k, &Tensor::eye(k.rows())).unwrap();
                for i in 0..w.rows() {
                    prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(w.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn fuse_is_affine_in_gamma(seed in any::<u64>(), g in prop::array::uniform3(0.0f64..2.0)) {
        prop_assume!((g[0] - g[1]).abs() > 1e-3);
        let cfg = ModelConfig::tiny();
        let dp = DenoiserParams::init(&cfg, seed).unwrap();
        let ap = AdapterParams::random(&cfg, seed ^ 1).unwrap();
        let mut r = rng(seed ^ 2);
        let q = gaussian(&[cfg.tokens(), cfg.attn_dim], &mut r);
        let c_p = encode_text(&[0, 1, 2], 4, cfg.ctx_dim, seed).unwrap();
        let c_i = gaussian(&[cfg.tokens(), cfg.ctx_dim], &mut r);
        let text = dp.text_projections(0).unwrap();
        let f = |gamma| fuse(&q, &c_p, &c_i, text, &ap, 0, gamma).unwrap();
        let (f0, f1, f2) = (f(g[0]), f(g[1]), f(g[2]));
        let ratio = (g[2] - g[0]) / (g[1] - g[0]);
        let predicted = f0.add(&f1.sub(&f0).unwrap().scale(ratio)).unwrap();
        prop_assert!(predicted.max_abs_diff(&f2).unwrap() <= 1e-12 * ratio.abs().max(1.0));
    }

    #[test]
    fn zero_value_projections_reduce_to_text_only(seed in any::<u64>(), t in 1usize..=50, gamma in 0.0f64..3.0) {
        let cfg = ModelConfig::tiny();
        let dp = DenoiserParams::init(&cfg, seed).unwrap();
        let mut ap = AdapterParams::random(&cfg, seed ^ 1).unwrap();
        zero_value_projections(&mut ap);
        let mut r = rng(seed ^ 2);
        let xt = gaussian(&cfg.image_shape(), &mut r);
        let c_p = encode_text(&[1, 3], 4, cfg.ctx_dim, seed).unwrap();
        let c_i = ImageEmbedding::new(gaussian(&[cfg.tokens(), cfg.clip_dim], &mut r)).unwrap();
        let with_adapter = denoise(&xt, &c_p, &c_i, t, &dp, &ap, gamma).unwrap();
        prop_assert!(with_adapter.bit_eq(&denoise_text_only(&xt, &c_p, t, &dp).unwrap()));
        // Fresh adapters are already in this state.
        let fresh = AdapterParams::init(&cfg, seed).unwrap();
        prop_assert!(denoise(&xt, &c_p, &c_i, t, &dp, &fresh, gamma).unwrap().bit_eq(&with_adapter));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradients_only_reach_the_adapter(seed in any::<u64>()) {
        let cfg = ModelConfig::tiny();
        let dp = DenoiserParams::init(&cfg, seed).unwrap();
        let theta = AdapterParams::random(&cfg, seed ^ 1).unwrap();
        let reference = AdapterParams::random(&cfg, seed ^ 3).unwrap();
        let mut r = rng(seed ^ 2);
        let sample = PreferenceSample::new(
            encode_text(&[0, 2], 4, cfg.ctx_dim, seed).unwrap(),
            ImageEmbedding::new(gaussian(&[cfg.tokens(), cfg.clip_dim], &mut r)).unwrap(),
            gaussian(&cfg.image_shape(), &mut r),
            gaussian(&cfg.image_shape(), &mut r),
        ).unwrap();
        let s = ScheduleSpec { steps: 10, ..Default::default() }.build().unwrap();
        let obj = Objective {
            denoiser: &dp,
            reference: &reference,
            schedule: &s,
            cfg: DsdConfig { beta: 0.1, ..Default::default() },
            fusion: Fusion::Subject { gamma: 1.0 },
        };
        let (_, grads) = obj.loss_and_grad(&theta, &PreferenceBatch::new(vec![sample]).unwrap(), seed).unwrap();
        let got: Vec<&str> = grads.keys().map(String::as_str).collect();
        let want: Vec<&str> = theta.params().names().collect();
        prop_assert_eq!(got, want);
        for n in dp.params().names() {
            prop_assert!(!grads.contains_key(n));
        }
    }
}
