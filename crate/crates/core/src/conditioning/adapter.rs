//! IPM (Eq. 9), ICAM (Eq. 10) and γ-weighted fusion (Eq. 11).

use super::{Activation, ImageEmbedding, ModelConfig, TextEmbedding};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, gaussian_scaled, rng};
use crate::numerics::{Graph, ParamSet, Tensor, Var};

pub(crate) const PREFIX: &str = "adapter.";

/// Trainable IPM-ICAM weights. Linear maps act on row vectors (`x·W`) except
/// the ICAM key/value maps, stored `[attn_dim × ctx_dim]` as in `c_i·W_kᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    cfg: ModelConfig,
    set: ParamSet,
}

pub(crate) fn icam_names(block: usize) -> (String, String) {
    (format!("{PREFIX}icam{block}.wk"), format!("{PREFIX}icam{block}.wv"))
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![
        (format!("{PREFIX}ipm.w1"), vec![cfg.clip_dim, cfg.ipm_hidden]),
        (format!("{PREFIX}ipm.b1"), vec![1, cfg.ipm_hidden]),
        (format!("{PREFIX}ipm.w2"), vec![cfg.ipm_hidden, cfg.ctx_dim]),
        (format!("{PREFIX}ipm.b2"), vec![1, cfg.ctx_dim]),
    ];
    for b in 0..cfg.blocks {
        let (k, vv) = icam_names(b);
        v.push((k, vec![cfg.attn_dim, cfg.ctx_dim]));
        v.push((vv, vec![cfg.attn_dim, cfg.ctx_dim]));
    }
    v
}

impl AdapterParams {
    /// Training initialization: seeded Gaussian IPM and ICAM keys, zero ICAM
    /// values, so the adapted model starts output-equal to the base.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true)
    }

    /// Every entry Gaussian, including ICAM values.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    fn build(cfg: &ModelConfig, seed: u64, zero_values: bool) -> Result<Self> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        for (i, (name, shape)) in expected_shapes(cfg).into_iter().enumerate() {
            let is_bias = name.contains(".b");
            let is_value = name.ends_with(".wv");
            let t = if is_bias || (is_value && zero_values) {
                Tensor::zeros(&shape)
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                gaussian_scaled(&shape, std, &mut rng(derive_seed(seed, &[i as u64])))
            };
            set.insert(name, t, false)?;
        }
        Ok(Self { cfg: *cfg, set })
    }

    /// Wraps an existing set after checking names and shapes.
    pub fn from_params(cfg: &ModelConfig, set: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = expected_shapes(cfg);
        if set.len() != expected.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter entries, found {}",
                expected.len(),
                set.len()
            )));
        }
        for (name, shape) in &expected {
            if set.get(name)?.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "adapter entry `{name}` has shape {:?}, expected {shape:?}",
                    set.get(name)?.shape()
                )));
            }
        }
        Ok(Self { cfg: *cfg, set })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn into_params(self) -> ParamSet {
        self.set
    }

    pub fn num_scalars(&self) -> usize {
        self.set.num_scalars()
    }

    pub fn is_frozen(&self) -> bool {
        self.set.iter().all(|(_, e)| e.frozen)
    }

    pub(crate) fn with_frozen(&self, frozen: bool) -> Self {
        Self {
            cfg: self.cfg,
            set: self.set.with_frozen(frozen),
        }
    }

    /// Binds as graph leaves, honouring each entry's frozen flag.
    pub fn bind<'g>(&self, g: &'g Graph) -> AdapterVars<'g> {
        let leaf = |name: &str| {
            let e = self.set.entry(name).expect("validated adapter entry");
            if e.frozen {
                g.constant(e.tensor.clone())
            } else {
                g.param(e.tensor.clone())
            }
        };
        self.vars_with(|n| Ok(leaf(n))).expect("validated adapter entry")
    }

    /// Builds the variable view through an arbitrary name lookup, e.g.
    /// [`crate::numerics::Bindings::get`].
    pub fn vars_with<'g>(&self, mut get: impl FnMut(&str) -> Result<Var<'g>>) -> Result<AdapterVars<'g>> {
        let mut icam = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let (k, v) = icam_names(b);
            icam.push((get(&k)?, get(&v)?));
        }
        Ok(AdapterVars {
            activation: self.cfg.ipm_activation,
            ipm_w1: get(&format!("{PREFIX}ipm.w1"))?,
            ipm_b1: get(&format!("{PREFIX}ipm.b1"))?,
            ipm_w2: get(&format!("{PREFIX}ipm.w2"))?,
            ipm_b2: get(&format!("{PREFIX}ipm.b2"))?,
            icam,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdapterVars<'g> {
    pub activation: Activation,
    pub ipm_w1: Var<'g>,
    pub ipm_b1: Var<'g>,
    pub ipm_w2: Var<'g>,
    pub ipm_b2: Var<'g>,
    /// `(W_k, W_v)` per attention block.
    pub icam: Vec<(Var<'g>, Var<'g>)>,
}

/// Eq. 9: affine, activation, affine, row-wise.
pub fn ipm_var<'g>(emb: Var<'g>, a: &AdapterVars<'g>) -> Result<Var<'g>> {
    let h = emb.matmul(a.ipm_w1)?.add_row(a.ipm_b1)?;
    let h = match a.activation {
        Activation::Gelu => h.gelu(),
        Activation::Identity => h,
    };
    h.matmul(a.ipm_w2)?.add_row(a.ipm_b2)
}

/// Scaled dot-product attention, `softmax(Q·Kᵀ/√d)·V` with `d` the key width.
pub fn attention_var<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    let d = k.value().cols();
    q.matmul(k.t()?)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax_rows()?
        .matmul(v)
}

/// Attention of queries `q` over context tokens `ctx` projected by
/// `K = ctx·W_kᵀ`, `V = ctx·W_vᵀ`.
pub(crate) fn cross_attention_var<'g>(q: Var<'g>, ctx: Var<'g>, wk: Var<'g>, wv: Var<'g>) -> Result<Var<'g>> {
    let k = ctx.matmul(wk.t()?)?;
    let v = ctx.matmul(wv.t()?)?;
    attention_var(q, k, v)
}

/// Eq. 10.
pub fn icam_var<'g>(q: Var<'g>, c_i: Var<'g>, wk: Var<'g>, wv: Var<'g>) -> Result<Var<'g>> {
    cross_attention_var(q, c_i, wk, wv)
}

/// Eq. 11: text attention plus γ·ICAM. `image` is `(c_i, W_k, W_v)`.
pub fn fuse_var<'g>(
    q: Var<'g>,
    c_p: Var<'g>,
    text: (Var<'g>, Var<'g>),
    image: Option<(Var<'g>, Var<'g>, Var<'g>)>,
    gamma: f64,
) -> Result<Var<'g>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("fusion weight γ must be ≥ 0, got {gamma}")));
    }
    let t = cross_attention_var(q, c_p, text.0, text.1)?;
    match image {
        Some((c_i, wk, wv)) => t.add(icam_var(q, c_i, wk, wv)?.scale(gamma)),
        None => Ok(t),
    }
}

pub(crate) fn with_consts(f: impl for<'g> FnOnce(&'g Graph) -> Result<Var<'g>>) -> Result<Tensor> {
    let g = Graph::new();
    let out = f(&g)?;
    let v = out.value();
    Ok((*v).clone())
}

/// Eq. 9 on plain tensors.
pub fn ipm(emb: &ImageEmbedding, p: &AdapterParams) -> Result<Tensor> {
    if emb.dim() != p.cfg.clip_dim {
        return Err(Error::shape(format!(
            "image embedding width {} does not match IPM input {}",
            emb.dim(),
            p.cfg.clip_dim
        )));
    }
    with_consts(|g| {
        let a = p.with_frozen(true).bind(g);
        ipm_var(g.constant(emb.tokens().clone()), &a)
    })
}

/// Plain scaled dot-product attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    with_consts(|g| attention_var(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())))
}

/// Eq. 10 on plain tensors.
pub fn icam(q: &Tensor, c_i: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    with_consts(|g| {
        icam_var(
            g.constant(q.clone()),
            g.constant(c_i.clone()),
            g.constant(wk.clone()),
            g.constant(wv.clone()),
        )
    })
}

/// Eq. 11 on plain tensors for attention block `block`: the text branch uses
/// the frozen text projections `text = (W_k^p, W_v^p)`, the image branch the
/// adapter's ICAM weights of that block.
pub fn fuse(
    q: &Tensor,
    c_p: &TextEmbedding,
    c_i: &Tensor,
    text: (&Tensor, &Tensor),
    p: &AdapterParams,
    block: usize,
    gamma: f64,
) -> Result<Tensor> {
    let (kn, vn) = icam_names(block);
    let (wk, wv) = (p.set.get(&kn)?, p.set.get(&vn)?);
    with_consts(|g| {
        fuse_var(
            g.constant(q.clone()),
            g.constant(c_p.tokens().clone()),
            (g.constant(text.0.clone()), g.constant(text.1.clone())),
            Some((g.constant(c_i.clone()), g.constant(wk.clone()), g.constant(wv.clone()))),
            gamma,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::gaussian;
    use crate::numerics::{finite_diff_check, matmul, matmul_nt, softmax_rows};

    fn g(shape: &[usize], seed: u64) -> Tensor {
        gaussian(shape, &mut rng(seed))
    }

    #[test]
    fn init_zeroes_values_only() {
        let cfg = ModelConfig::default();
        let a = AdapterParams::init(&cfg, 3).unwrap();
        for b in 0..cfg.blocks {
            let (k, v) = icam_names(b);
            assert!(a.params().get(&v).unwrap().data().iter().all(|&x| x == 0.0));
            assert!(a.params().get(&k).unwrap().norm() > 0.0);
        }
        assert!(!a.is_frozen());
        assert!(a.params().iter().all(|(_, e)| !e.frozen));
    }

    #[test]
    fn ipm_zero_and_identity() {
        let mut cfg = ModelConfig::tiny();
        let emb = ImageEmbedding::new(g(&[3, cfg.clip_dim], 1)).unwrap();
        let mut a = AdapterParams::random(&cfg, 0).unwrap();
        for n in ["ipm.w1", "ipm.b1", "ipm.w2", "ipm.b2"] {
            a.params_mut()
                .trainable_mut(&format!("{PREFIX}{n}"))
                .unwrap()
                .data_mut()
                .fill(0.0);
        }
        assert!(ipm(&emb, &a).unwrap().data().iter().all(|&x| x == 0.0));

        cfg.ctx_dim = cfg.clip_dim;
        cfg.ipm_hidden = cfg.clip_dim;
        cfg.ipm_activation = Activation::Identity;
        let mut set = AdapterParams::random(&cfg, 0).unwrap().into_params();
        *set.trainable_mut("adapter.ipm.w1").unwrap() = Tensor::eye(cfg.clip_dim);
        *set.trainable_mut("adapter.ipm.w2").unwrap() = Tensor::eye(cfg.clip_dim);
        set.trainable_mut("adapter.ipm.b1").unwrap().data_mut().fill(0.0);
        set.trainable_mut("adapter.ipm.b2").unwrap().data_mut().fill(0.0);
        let a = AdapterParams::from_params(&cfg, set).unwrap();
        assert!(ipm(&emb, &a).unwrap().bit_eq(emb.tokens()));
    }

    #[test]
    fn ipm_shape_mismatch() {
        let cfg = ModelConfig::tiny();
        let a = AdapterParams::random(&cfg, 0).unwrap();
        let emb = ImageEmbedding::new(g(&[2, cfg.clip_dim + 1], 1)).unwrap();
        assert!(matches!(ipm(&emb, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn ipm_gradient_check() {
        let cfg = ModelConfig::tiny();
        let a = AdapterParams::random(&cfg, 5).unwrap();
        let emb = g(&[3, cfg.clip_dim], 2);
        let target = g(&[3, cfg.ctx_dim], 3);
        let r = finite_diff_check(
            |gr, b| {
                let av = a.vars_with(|n| b.get(n))?;
                let y = ipm_var(gr.constant(emb.clone()), &av)?;
                Ok(y.sub(gr.constant(target.clone()))?.square().sum())
            },
            a.params(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn icam_examples() {
        let q = g(&[4, 3], 1);
        let wk = g(&[3, 5], 2);
        let wv = g(&[3, 5], 3);
        // Single key: every query receives the single value row.
        let ci = g(&[1, 5], 4);
        let out = icam(&q, &ci, &wk, &wv).unwrap();
        let v = matmul_nt(&ci, &wv).unwrap();
        for r in 0..4 {
            for (a, b) in out.row(r).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Two identical keys with distinct values via a value map that sees a
        // coordinate the key map ignores.
        let wk1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.0]]).unwrap();
        let wv1 = Tensor::eye(2);
        let ci2 = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, -4.0]]).unwrap();
        let q2 = g(&[3, 2], 5);
        let out = icam(&q2, &ci2, &wk1, &wv1).unwrap();
        for r in 0..3 {
            assert!((out.row(r)[0] - 1.0).abs() < 1e-12);
            assert!((out.row(r)[1] + 1.0).abs() < 1e-12);
        }
        // Zero value map → zero output.
        let out = icam(&q, &g(&[6, 5], 6), &wk, &Tensor::zeros(&[3, 5])).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn icam_matches_oracle() {
        let q = g(&[4, 3], 11);
        let ci = g(&[6, 5], 12);
        let wk = g(&[3, 5], 13);
        let wv = g(&[3, 5], 14);
        let k = matmul_nt(&ci, &wk).unwrap();
        let v = matmul_nt(&ci, &wv).unwrap();
        let s = matmul_nt(&q, &k).unwrap().scale(1.0 / 3f64.sqrt());
        let w = softmax_rows(&s).unwrap();
        for r in 0..4 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let expect = matmul(&w, &v).unwrap();
        assert!(icam(&q, &ci, &wk, &wv).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    fn fuse_setup() -> (Tensor, TextEmbedding, Tensor, Tensor, Tensor, AdapterParams) {
        let cfg = ModelConfig::tiny();
        let q = g(&[4, cfg.attn_dim], 21);
        let cp = super::super::encode_text(&[0, 1, 2], 5, cfg.ctx_dim, 22).unwrap();
        let ci = g(&[3, cfg.ctx_dim], 23);
        let tk = g(&[cfg.attn_dim, cfg.ctx_dim], 24);
        let tv = g(&[cfg.attn_dim, cfg.ctx_dim], 25);
        let a = AdapterParams::random(&cfg, 26).unwrap();
        (q, cp, ci, tk, tv, a)
    }

    #[test]
    fn fuse_gamma_zero_is_text_only() {
        let (q, cp, ci, tk, tv, a) = fuse_setup();
        let f0 = fuse(&q, &cp, &ci, (&tk, &tv), &a, 0, 0.0).unwrap();
        let text = icam(&q, cp.tokens(), &tk, &tv).unwrap();
        assert!(f0.bit_eq(&text));
    }

    #[test]
    fn fuse_is_affine_in_gamma() {
        let (q, cp, ci, tk, tv, a) = fuse_setup();
        let (wk, wv) = icam_names(1);
        let img = icam(&q, &ci, a.params().get(&wk).unwrap(), a.params().get(&wv).unwrap()).unwrap();
        let f = |gm| fuse(&q, &cp, &ci, (&tk, &tv), &a, 1, gm).unwrap();
        let (f1, f2, f3) = (f(0.2), f(0.7), f(1.5));
        let d12 = f1.sub(&f2).unwrap();
        assert!(d12.max_abs_diff(&img.scale(0.2 - 0.7)).unwrap() < 1e-12);
        // Three-point collinearity.
        let d13 = f3.sub(&f1).unwrap();
        assert!(d13.max_abs_diff(&f2.sub(&f1).unwrap().scale(1.3 / 0.5)).unwrap() < 1e-12);
    }

    #[test]
    fn fuse_text_zeroed_is_icam() {
        let (q, cp, ci, tk, _, a) = fuse_setup();
        let zero = Tensor::zeros(tk.shape());
        let f = fuse(&q, &cp, &ci, (&tk, &zero), &a, 0, 1.0).unwrap();
        let (wk, wv) = icam_names(0);
        let img = icam(&q, &ci, a.params().get(&wk).unwrap(), a.params().get(&wv).unwrap()).unwrap();
        assert!(f.max_abs_diff(&img).unwrap() < 1e-15);
    }

    #[test]
    fn negative_gamma_rejected() {
        let (q, cp, ci, tk, tv, a) = fuse_setup();
        assert!(matches!(
            fuse(&q, &cp, &ci, (&tk, &tv), &a, 0, -0.1),
            Err(Error::Config(_))
        ));
    }
}
