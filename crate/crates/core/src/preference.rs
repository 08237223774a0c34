//! Preference objectives: Bradley-Terry (Eq. 6), diffusion DPO (Eq. 8) and
//! Direct Subject Diffusion (Eq. 12), plus the implicit reward gap.
//!
//! Per-sample loss is `−log σ(−β·T·ω(λ_t)·inner) = softplus(β·T·ω·inner)`
//! with `inner` the four-term difference of squared noise errors returned by
//! [`dsd_inner`]. `T` is the step count of the noise schedule.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    denoise_var, AdapterParams, AdapterVars, Conditioning, DenoiserParams, DenoiserVars, ImageEmbedding, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, gaussian, rng};
use crate::numerics::{eval, softplus, value_and_grad, Bindings, Gradients, Graph, Tensor, Var};
use crate::schedule::{NoiseSchedule, WeightFn};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsdConfig {
    pub beta: f64,
    pub omega: WeightFn,
}

impl Default for DsdConfig {
    fn default() -> Self {
        Self {
            beta: 500.0,
            omega: WeightFn::default(),
        }
    }
}

impl DsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        let WeightFn::Constant { value } = self.omega;
        WeightFn::constant(value)?;
        Ok(())
    }

    /// `β·T·ω(λ_t)`.
    pub fn coefficient(&self, s: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(self.beta * s.steps() as f64 * self.omega.weight(s, t)?)
    }
}

/// Eq. 6: `−log σ(r_w − r_l)`.
pub fn bt_loss(r_w: f64, r_l: f64) -> f64 {
    softplus(r_l - r_w)
}

/// One `(p, i, y_0^w, y_0^l)` tuple. The image embedding is the raw encoder
/// output; the trainable IPM is applied inside the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSample {
    pub c_p: TextEmbedding,
    pub c_i: ImageEmbedding,
    pub y0_w: Tensor,
    pub y0_l: Tensor,
}

impl PreferenceSample {
    pub fn new(c_p: TextEmbedding, c_i: ImageEmbedding, y0_w: Tensor, y0_l: Tensor) -> Result<Self> {
        y0_w.same_shape(&y0_l)?;
        Ok(Self { c_p, c_i, y0_w, y0_l })
    }

    /// Winning and losing targets exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            y0_w: self.y0_l.clone(),
            y0_l: self.y0_w.clone(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceBatch {
    samples: Vec<PreferenceSample>,
}

impl PreferenceBatch {
    pub fn new(samples: Vec<PreferenceSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyPool("preference batch".into()));
        }
        let shape = samples[0].y0_w.shape().to_vec();
        if samples.iter().any(|s| s.y0_w.shape() != shape.as_slice()) {
            return Err(Error::shape("preference batch targets differ in shape"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-sample randomness: one timestep shared by both branches and
/// independent noises for each.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub t: usize,
    pub eps_w: Tensor,
    pub eps_l: Tensor,
}

impl SampleDraw {
    pub fn new(seed: u64, shape: &[usize], steps: usize) -> Self {
        let mut r = rng(seed);
        let t = r.random_range(1..=steps);
        let eps_w = gaussian(shape, &mut r);
        let eps_l = gaussian(shape, &mut r);
        Self { t, eps_w, eps_l }
    }

    /// Draw for item `index` of a batch evaluated under `seed`.
    pub fn for_item(seed: u64, index: usize, shape: &[usize], steps: usize) -> Self {
        Self::new(derive_seed(seed, &[index as u64]), shape, steps)
    }
}

/// The four-term inner argument of Eq. 12 for arbitrary θ and reference
/// predictors, each mapping a noisy target `y_t` to ε̂.
#[allow(clippy::too_many_arguments)]
pub fn dsd_inner_with<'g, P, R>(
    g: &'g Graph,
    mut theta: P,
    mut reference: R,
    y0_w: &Tensor,
    y0_l: &Tensor,
    draw: &SampleDraw,
    s: &NoiseSchedule,
) -> Result<Var<'g>>
where
    P: FnMut(Var<'g>) -> Result<Var<'g>>,
    R: FnMut(Var<'g>) -> Result<Var<'g>>,
{
    y0_w.same_shape(&draw.eps_w)?;
    y0_l.same_shape(&draw.eps_l)?;
    let yw = g.constant(s.forward_diffuse(y0_w, draw.t, &draw.eps_w)?);
    let yl = g.constant(s.forward_diffuse(y0_l, draw.t, &draw.eps_l)?);
    let ew = g.constant(draw.eps_w.clone());
    let el = g.constant(draw.eps_l.clone());
    let err = |eps: Var<'g>, pred: Var<'g>| -> Result<Var<'g>> { Ok(eps.sub(pred)?.square().sum()) };
    let theta_w = err(ew, theta(yw)?)?;
    let ref_w = err(ew, reference(yw)?)?;
    let theta_l = err(el, theta(yl)?)?;
    let ref_l = err(el, reference(yl)?)?;
    // Grouped so that exchanging the branches negates the result exactly.
    theta_w.sub(ref_w)?.sub(theta_l.sub(ref_l)?)
}

/// How the adapter enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    /// Eq. 12: text attention plus γ·ICAM over the projected reference image.
    Subject { gamma: f64 },
    /// Eq. 8: text-only conditioning.
    TextOnly,
}

/// Inner argument for one sample under the conditioned denoiser.
#[allow(clippy::too_many_arguments)]
fn sample_inner<'g>(
    g: &'g Graph,
    d: &DenoiserVars<'g>,
    theta: &AdapterVars<'g>,
    reference: &AdapterVars<'g>,
    sample: &PreferenceSample,
    draw: &SampleDraw,
    s: &NoiseSchedule,
    fusion: Fusion,
) -> Result<Var<'g>> {
    let t = draw.t;
    match fusion {
        Fusion::Subject { gamma } => {
            let ct = Conditioning::with_image(g, &sample.c_p, &sample.c_i, theta, gamma)?;
            let cr = Conditioning::with_image(g, &sample.c_p, &sample.c_i, reference, gamma)?;
            dsd_inner_with(
                g,
                |y| denoise_var(y, t, &ct, d, Some(theta)),
                |y| denoise_var(y, t, &cr, d, Some(reference)),
                &sample.y0_w,
                &sample.y0_l,
                draw,
                s,
            )
        }
        Fusion::TextOnly => {
            let c = Conditioning::text_only(g.constant(sample.c_p.tokens().clone()));
            dsd_inner_with(
                g,
                |y| denoise_var(y, t, &c, d, None),
                |y| denoise_var(y, t, &c, d, None),
                &sample.y0_w,
                &sample.y0_l,
                draw,
                s,
            )
        }
    }
}

/// Everything an objective needs besides the live adapter weights.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub denoiser: &'a DenoiserParams,
    pub reference: &'a AdapterParams,
    pub schedule: &'a NoiseSchedule,
    pub cfg: DsdConfig,
    pub fusion: Fusion,
}

impl<'a> Objective<'a> {
    /// Mean per-sample loss of `batch` as a graph function of the live
    /// adapter, whose entries are looked up in the bindings by name.
    pub fn loss_var<'g>(&self, g: &'g Graph, b: &Bindings<'g>, batch: &PreferenceBatch, seed: u64) -> Result<Var<'g>> {
        self.cfg.validate()?;
        let d = self.denoiser.with_frozen(true).bind(g);
        let reference = self.reference.with_frozen(true).bind(g);
        let theta = self.reference.vars_with(|n| b.get(n))?;
        let shape = batch.samples[0].y0_w.shape().to_vec();
        let mut total: Option<Var<'g>> = None;
        for (i, sample) in batch.samples.iter().enumerate() {
            let draw = SampleDraw::for_item(seed, i, &shape, self.schedule.steps());
            let inner = sample_inner(g, &d, &theta, &reference, sample, &draw, self.schedule, self.fusion)?;
            let term = inner
                .scale(self.cfg.coefficient(self.schedule, draw.t)?)
                .softplus()
                .sum();
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
    }

    pub fn loss(&self, theta: &AdapterParams, batch: &PreferenceBatch, seed: u64) -> Result<f64> {
        eval(|g, b| self.loss_var(g, b, batch, seed), theta.params())
    }

    pub fn loss_and_grad(&self, theta: &AdapterParams, batch: &PreferenceBatch, seed: u64) -> Result<(f64, Gradients)> {
        value_and_grad(|g, b| self.loss_var(g, b, batch, seed), theta.params())
    }

    /// Eq. 12 inner argument for a single sample and explicit draw.
    pub fn inner(&self, theta: &AdapterParams, sample: &PreferenceSample, draw: &SampleDraw) -> Result<f64> {
        let g = Graph::new();
        let d = self.denoiser.with_frozen(true).bind(&g);
        let th = theta.with_frozen(true).bind(&g);
        let rf = self.reference.with_frozen(true).bind(&g);
        sample_inner(&g, &d, &th, &rf, sample, draw, self.schedule, self.fusion)?.item()
    }
}

/// Eq. 12 inner argument under subject fusion with weight `gamma`.
#[allow(clippy::too_many_arguments)]
pub fn dsd_inner(
    theta: &AdapterParams,
    reference: &AdapterParams,
    denoiser: &DenoiserParams,
    sample: &PreferenceSample,
    draw: &SampleDraw,
    s: &NoiseSchedule,
    gamma: f64,
) -> Result<f64> {
    Objective {
        denoiser,
        reference,
        schedule: s,
        cfg: DsdConfig::default(),
        fusion: Fusion::Subject { gamma },
    }
    .inner(theta, sample, draw)
}

/// Eq. 12, averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn dsd_loss(
    batch: &PreferenceBatch,
    theta: &AdapterParams,
    reference: &AdapterParams,
    denoiser: &DenoiserParams,
    s: &NoiseSchedule,
    cfg: DsdConfig,
    seed: u64,
    gamma: f64,
) -> Result<f64> {
    Objective {
        denoiser,
        reference,
        schedule: s,
        cfg,
        fusion: Fusion::Subject { gamma },
    }
    .loss(theta, batch, seed)
}

/// Eq. 8: the same estimator with text-only conditioning.
pub fn dd_loss(
    batch: &PreferenceBatch,
    theta: &AdapterParams,
    reference: &AdapterParams,
    denoiser: &DenoiserParams,
    s: &NoiseSchedule,
    cfg: DsdConfig,
    seed: u64,
) -> Result<f64> {
    Objective {
        denoiser,
        reference,
        schedule: s,
        cfg,
        fusion: Fusion::TextOnly,
    }
    .loss(theta, batch, seed)
}

/// Monte-Carlo mean of `−β·T·ω·inner` over `n_draws` draws; positive when
/// the model prefers the winning target more than the reference does.
pub fn implicit_reward_gap(
    objective: &Objective<'_>,
    theta: &AdapterParams,
    sample: &PreferenceSample,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    let s = objective.schedule;
    let mut acc = 0.0;
    for k in 0..n_draws {
        let draw = SampleDraw::for_item(seed, k, sample.y0_w.shape(), s.steps());
        let inner = objective.inner(theta, sample, &draw)?;
        acc += -objective.cfg.coefficient(s, draw.t)? * inner;
    }
    Ok(acc / n_draws as f64)
}
