//! The toy ε-predictor: patch tokens, a sinusoidal timestep embedding, and
//! `blocks` stages of (residual MLP, fused cross-attention), followed by a
//! linear output head mapped back to image layout.

use std::rc::Rc;

use super::adapter::{fuse_var, ipm_var, with_consts, AdapterParams, AdapterVars};
use super::{ImageEmbedding, ModelConfig, TextEmbedding};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, gaussian_scaled, rng};
use crate::numerics::{Graph, ParamSet, Tensor, Var};

const PREFIX: &str = "denoiser.";

/// Flat indices such that `tokens[k] = image[index[k]]` for an `[H×W×C]`
/// image cut into `patch × patch` tokens (row-major patches, `(row, col,
/// channel)` inside a patch).
pub fn patch_permutation(h: usize, w: usize, c: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::shape(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for bi in 0..h / patch {
        for bj in 0..w / patch {
            for di in 0..patch {
                for dj in 0..patch {
                    let (i, j) = (bi * patch + di, bj * patch + dj);
                    out.extend((0..c).map(|ch| (i * w + j) * c + ch));
                }
            }
        }
    }
    Ok(out)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// `[1 × dim]` sinusoidal embedding: `sin(t·f_k)` then `cos(t·f_k)` with
/// `f_k = 10000^(−k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = (t as f64 * f).sin();
        v[half + k] = (t as f64 * f).cos();
    }
    Tensor::from_raw(vec![1, dim], v)
}

fn block_name(b: usize, leaf: &str) -> String {
    format!("{PREFIX}block{b}.{leaf}")
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (hd, m, a, c) = (cfg.hidden, cfg.mlp_hidden, cfg.attn_dim, cfg.ctx_dim);
    let mut v = vec![
        (format!("{PREFIX}in.w"), vec![cfg.token_dim(), hd]),
        (format!("{PREFIX}in.b"), vec![1, hd]),
        (format!("{PREFIX}time.w"), vec![hd, hd]),
        (format!("{PREFIX}time.b"), vec![1, hd]),
        (format!("{PREFIX}out.w"), vec![hd, cfg.token_dim()]),
        (format!("{PREFIX}out.b"), vec![1, cfg.token_dim()]),
    ];
    for b in 0..cfg.blocks {
        v.push((block_name(b, "mlp.w1"), vec![hd, m]));
        v.push((block_name(b, "mlp.b1"), vec![1, m]));
        v.push((block_name(b, "mlp.w2"), vec![m, hd]));
        v.push((block_name(b, "mlp.b2"), vec![1, hd]));
        v.push((block_name(b, "attn.wq"), vec![hd, a]));
        v.push((block_name(b, "attn.wk"), vec![a, c]));
        v.push((block_name(b, "attn.wv"), vec![a, c]));
        v.push((block_name(b, "attn.wo"), vec![a, hd]));
    }
    v
}

/// Backbone weights. Frozen unless explicitly unfrozen for base pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    cfg: ModelConfig,
    set: ParamSet,
}

impl DenoiserParams {
    /// Seeded Gaussian weights with std `1/√fan_in`, zero biases; frozen.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        for (i, (name, shape)) in expected_shapes(cfg).into_iter().enumerate() {
            let t = if name.rsplit('.').next().is_some_and(|l| l.starts_with('b')) {
                Tensor::zeros(&shape)
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                gaussian_scaled(&shape, std, &mut rng(derive_seed(seed, &[i as u64])))
            };
            set.insert(name, t, true)?;
        }
        Ok(Self { cfg: *cfg, set })
    }

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
                    "denoiser entry `{name}` has shape {:?}, expected {shape:?}",
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

    pub fn into_params(self) -> ParamSet {
        self.set
    }

    pub fn num_scalars(&self) -> usize {
        self.set.num_scalars()
    }

    /// Same weights with every entry's frozen flag set to `frozen`.
    pub fn with_frozen(&self, frozen: bool) -> Self {
        Self {
            cfg: self.cfg,
            set: self.set.with_frozen(frozen),
        }
    }

    /// Text projections `(W_k^p, W_v^p)` of attention block `b`.
    pub fn text_projections(&self, b: usize) -> Result<(&Tensor, &Tensor)> {
        Ok((
            self.set.get(&block_name(b, "attn.wk"))?,
            self.set.get(&block_name(b, "attn.wv"))?,
        ))
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> DenoiserVars<'g> {
        self.vars_with(|n| {
            let e = self.set.entry(n).ok_or_else(|| Error::UnknownParam(n.into()))?;
            Ok(if e.frozen {
                g.constant(e.tensor.clone())
            } else {
                g.param(e.tensor.clone())
            })
        })
        .expect("validated denoiser entry")
    }

    pub fn vars_with<'g>(&self, mut get: impl FnMut(&str) -> Result<Var<'g>>) -> Result<DenoiserVars<'g>> {
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let mut f = |leaf: &str| get(&block_name(b, leaf));
            blocks.push(BlockVars {
                w1: f("mlp.w1")?,
                b1: f("mlp.b1")?,
                w2: f("mlp.w2")?,
                b2: f("mlp.b2")?,
                wq: f("attn.wq")?,
                wk: f("attn.wk")?,
                wv: f("attn.wv")?,
                wo: f("attn.wo")?,
            });
        }
        Ok(DenoiserVars {
            cfg: self.cfg,
            w_in: get(&format!("{PREFIX}in.w"))?,
            b_in: get(&format!("{PREFIX}in.b"))?,
            w_time: get(&format!("{PREFIX}time.w"))?,
            b_time: get(&format!("{PREFIX}time.b"))?,
            w_out: get(&format!("{PREFIX}out.w"))?,
            b_out: get(&format!("{PREFIX}out.b"))?,
            blocks,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars<'g> {
    pub w1: Var<'g>,
    pub b1: Var<'g>,
    pub w2: Var<'g>,
    pub b2: Var<'g>,
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct DenoiserVars<'g> {
    pub cfg: ModelConfig,
    pub w_in: Var<'g>,
    pub b_in: Var<'g>,
    pub w_time: Var<'g>,
    pub b_time: Var<'g>,
    pub w_out: Var<'g>,
    pub b_out: Var<'g>,
    pub blocks: Vec<BlockVars<'g>>,
}

/// Conditioning inputs of one forward pass. `image` holds projected image
/// tokens (IPM output); `None` gives the text-only model.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'g> {
    pub text: Var<'g>,
    pub image: Option<Var<'g>>,
    pub gamma: f64,
}

impl<'g> Conditioning<'g> {
    pub fn text_only(text: Var<'g>) -> Self {
        Self {
            text,
            image: None,
            gamma: 0.0,
        }
    }

    /// Binds `c_p` and `IPM(c_i)` under adapter variables `a`.
    pub fn with_image(
        g: &'g Graph,
        c_p: &TextEmbedding,
        c_i: &ImageEmbedding,
        a: &AdapterVars<'g>,
        gamma: f64,
    ) -> Result<Self> {
        Ok(Self {
            text: g.constant(c_p.tokens().clone()),
            image: Some(ipm_var(g.constant(c_i.tokens().clone()), a)?),
            gamma,
        })
    }
}

/// ε̂ for noisy image `xt` at step `t`. With `cond.image` set, `adapter`
/// supplies the ICAM weights of each block.
pub fn denoise_var<'g>(
    xt: Var<'g>,
    t: usize,
    cond: &Conditioning<'g>,
    d: &DenoiserVars<'g>,
    adapter: Option<&AdapterVars<'g>>,
) -> Result<Var<'g>> {
    let cfg = &d.cfg;
    let shape = cfg.image_shape();
    if xt.shape() != shape {
        return Err(Error::shape(format!(
            "denoiser expects image {shape:?}, got {:?}",
            xt.shape()
        )));
    }
    if cond.text.value().cols() != cfg.ctx_dim {
        return Err(Error::shape(format!(
            "text tokens of width {}, denoiser expects {}",
            cond.text.value().cols(),
            cfg.ctx_dim
        )));
    }
    if cond.image.is_some() && adapter.is_none() {
        return Err(Error::Config("image conditioning without adapter weights".into()));
    }
    let g = xt.graph();
    let perm = patch_permutation(cfg.height, cfg.width, cfg.channels, cfg.patch)?;
    let inv: Rc<[usize]> = inverse(&perm).into();
    let tokens = xt.gather(perm.into(), &[cfg.tokens(), cfg.token_dim()])?;

    let temb = g
        .constant(timestep_embedding(t, cfg.hidden))
        .matmul(d.w_time)?
        .add_row(d.b_time)?
        .gelu();
    let mut h = tokens.matmul(d.w_in)?.add_row(d.b_in)?.add_row(temb)?;

    for (b, blk) in d.blocks.iter().enumerate() {
        let r = h
            .matmul(blk.w1)?
            .add_row(blk.b1)?
            .gelu()
            .matmul(blk.w2)?
            .add_row(blk.b2)?;
        h = h.add(r)?;
        let q = h.matmul(blk.wq)?;
        let image = match (cond.image, adapter) {
            (Some(ci), Some(a)) => {
                let (wk, wv) = a
                    .icam
                    .get(b)
                    .copied()
                    .ok_or_else(|| Error::shape(format!("adapter has no ICAM weights for block {b}")))?;
                Some((ci, wk, wv))
            }
            _ => None,
        };
        let f = fuse_var(q, cond.text, (blk.wk, blk.wv), image, cond.gamma)?;
        h = h.add(f.matmul(blk.wo)?)?;
    }
    let out = h.matmul(d.w_out)?.add_row(d.b_out)?;
    out.gather(inv, &shape)
}

/// ε_θ(xt, c_p, c_i, t) on plain tensors with fusion weight `gamma`.
pub fn denoise(
    xt: &Tensor,
    c_p: &TextEmbedding,
    c_i: &ImageEmbedding,
    t: usize,
    dp: &DenoiserParams,
    ap: &AdapterParams,
    gamma: f64,
) -> Result<Tensor> {
    if dp.config() != ap.config() {
        return Err(Error::Config("denoiser and adapter configs differ".into()));
    }
    let dp = dp.with_frozen(true);
    let ap = ap.with_frozen(true);
    with_consts(|g| {
        let d = dp.bind(g);
        let a = ap.bind(g);
        let cond = Conditioning::with_image(g, c_p, c_i, &a, gamma)?;
        denoise_var(g.constant(xt.clone()), t, &cond, &d, Some(&a))
    })
}

/// The base model with no image branch at all.
pub fn denoise_text_only(xt: &Tensor, c_p: &TextEmbedding, t: usize, dp: &DenoiserParams) -> Result<Tensor> {
    let dp = dp.with_frozen(true);
    with_consts(|g| {
        let d = dp.bind(g);
        let cond = Conditioning::text_only(g.constant(c_p.tokens().clone()));
        denoise_var(g.constant(xt.clone()), t, &cond, &d, None)
    })
}

/// Frozen deep copy of the adapter, used as ε_ref.
pub fn freeze_reference(ap: &AdapterParams) -> AdapterParams {
    ap.with_frozen(true)
}
