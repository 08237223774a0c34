//! Noise schedules, forward diffusion, deterministic DDIM and the
//! ε-prediction reconstruction loss.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. `alpha_bar[0]` is pinned to exactly 1
//! so the final DDIM step (t = 1) lands on a clean sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::random::{gaussian, rng};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
}

/// Parameters a schedule is rebuilt from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Constant => vec![beta_start; steps],
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        let prev = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(prev * a);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Index(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} outside 0..={}", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    /// Sample `x_t` directly from `x_0`: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// One Markov step `x_{t−1} → x_t`: `√(1−β_t)·x + √β_t·n`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let beta = self.beta(t)?;
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        x_prev.zip_map(noise, |x, n| a * x + b * n)
    }

    /// Deterministic DDIM update `x̂_t → x̂_{t−1}` from a noise estimate.
    pub fn ddim_step(&self, xt: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t)?;
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (s_prev, n_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        xt.zip_map(eps_hat, |x, e| s_prev * (x - n_t * e) / s_t + n_prev * e)
    }

    /// Runs the reverse process from seeded `x̂_T ~ N(0, I)` down to `x̂_0`.
    pub fn ddim_sample<P>(&self, mut predict: P, shape: &[usize], seed: u64) -> Result<Tensor>
    where
        P: FnMut(&Tensor, usize) -> Result<Tensor>,
    {
        let mut x = gaussian(shape, &mut rng(seed));
        for t in (1..=self.steps()).rev() {
            let eps_hat = predict(&x, t)?;
            x = self.ddim_step(&x, &eps_hat, t)?;
        }
        Ok(x)
    }
}

/// Timestep weighting `ω(λ_t)`; only the constant form is used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightFn {
    Constant { value: f64 },
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Constant { value: 1.0 }
    }
}

impl WeightFn {
    pub fn constant(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(WeightFn::Constant { value })
        } else {
            Err(Error::Config(format!("weight must be positive, got {value}")))
        }
    }

    pub fn at(&self, _snr: f64) -> f64 {
        match *self {
            WeightFn::Constant { value } => value,
        }
    }

    pub fn weight(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(self.at(schedule.snr(t)?))
    }
}

/// `ω(λ_t)·‖ε − ε̂‖²` on plain tensors.
pub fn dm_loss(eps: &Tensor, eps_hat: &Tensor, t: usize, w: WeightFn, schedule: &NoiseSchedule) -> Result<f64> {
    let d = eps.sub(eps_hat)?;
    Ok(w.weight(schedule, t)? * d.sum_squares())
}

/// Differentiable form of [`dm_loss`].
pub fn dm_loss_var<'g>(
    eps: Var<'g>,
    eps_hat: Var<'g>,
    t: usize,
    w: WeightFn,
    schedule: &NoiseSchedule,
) -> Result<Var<'g>> {
    let omega = w.weight(schedule, t)?;
    Ok(eps.sub(eps_hat)?.square().sum().scale(omega))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::{gaussian, rng};
    use crate::numerics::{finite_diff_check, grad, ParamSet};

    fn linear(steps: usize, lo: f64, hi: f64) -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, steps, lo, hi).unwrap()
    }

    #[test]
    fn constant_running_product() {
        let s = build_schedule(ScheduleKind::Constant, 10, 0.02, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - 0.98).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.9604).abs() < 1e-15);
    }

    #[test]
    fn linear_closed_form() {
        let s = linear(2, 0.1, 0.3);
        assert_eq!(s.beta(1).unwrap(), 0.1);
        assert_eq!(s.beta(2).unwrap(), 0.3);
        let ab = s.alpha_bars();
        assert_eq!(ab[0], 1.0);
        assert!((ab[1] - 0.9).abs() < 1e-15);
        assert!((ab[2] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn long_linear_schedule_decays() {
        let s = linear(1000, 1e-4, 0.02);
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        let last = s.alpha_bar(1000).unwrap();
        assert!((last - direct).abs() < 1e-15);
        assert!(last > 0.0 && last < 0.01);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (t, lo, hi) in [(0, 0.1, 0.2), (5, 0.0, 0.2), (5, 0.3, 0.2), (5, 0.1, 1.0)] {
            assert!(matches!(
                build_schedule(ScheduleKind::Linear, t, lo, hi),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = ScheduleSpec::default().build().unwrap();
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
            assert!(w[1] > 0.0 && w[1] <= 1.0);
        }
    }

    #[test]
    fn forward_diffuse_edge_cases() {
        let s = linear(10, 0.01, 0.2);
        let mut r = rng(1);
        let x0 = gaussian(&[2, 3], &mut r);
        let eps = gaussian(&[2, 3], &mut r);
        let ab = s.alpha_bar(4).unwrap();

        let no_noise = s.forward_diffuse(&x0, 4, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(no_noise.max_abs_diff(&x0.scale(ab.sqrt())).unwrap() < 1e-15);

        let from_zero = s.forward_diffuse(&Tensor::zeros(&[2, 3]), 4, &eps).unwrap();
        assert!(from_zero.max_abs_diff(&eps.scale((1.0 - ab).sqrt())).unwrap() < 1e-15);

        assert!(matches!(s.forward_diffuse(&x0, 0, &eps), Err(Error::Index(_))));
        assert!(matches!(s.forward_diffuse(&x0, 11, &eps), Err(Error::Index(_))));
    }

    #[test]
    fn forward_step_edge_cases() {
        let s = build_schedule(ScheduleKind::Constant, 3, 0.19, 0.19).unwrap();
        let x = Tensor::vector(&[1.0, -2.0]).unwrap();
        let y = s.forward_step(&x, 1, &Tensor::zeros(&[2])).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.9)).unwrap() < 1e-15);
        let n = Tensor::vector(&[0.5, 0.25]).unwrap();
        let y = s.forward_step(&Tensor::zeros(&[2]), 2, &n).unwrap();
        assert!(y.max_abs_diff(&n.scale(0.19f64.sqrt())).unwrap() < 1e-15);
    }

    #[test]
    fn ddim_first_step_inverts_forward() {
        let s = linear(10, 0.01, 0.2);
        let mut r = rng(2);
        let x0 = gaussian(&[4], &mut r);
        let eps = gaussian(&[4], &mut r);
        let x1 = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let back = s.ddim_step(&x1, &eps, 1).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
    }

    #[test]
    fn ddim_degenerate_equal_alpha_bar_is_identity() {
        // β tiny enough that ᾱ_{t−1} == ᾱ_t in f64 is not reachable, so
        // build the degenerate case by hand.
        let mut s = linear(2, 0.1, 0.2);
        s.alpha_bar[1] = s.alpha_bar[2];
        let x = Tensor::vector(&[0.3, -0.7]).unwrap();
        let out = s.ddim_step(&x, &Tensor::zeros(&[2]), 2).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn oracle_roundtrip_recovers_x0() {
        for steps in [1, 10, 50] {
            let s = ScheduleSpec {
                steps,
                ..ScheduleSpec::default()
            }
            .build()
            .unwrap();
            let mut r = rng(steps as u64);
            let x0 = gaussian(&[3, 4], &mut r);
            let eps = gaussian(&[3, 4], &mut r);
            let mut x = s.forward_diffuse(&x0, steps, &eps).unwrap();
            for t in (1..=steps).rev() {
                x = s.ddim_step(&x, &eps, t).unwrap();
            }
            assert!(x.max_abs_diff(&x0).unwrap() < 1e-9, "T={steps}");
        }
    }

    #[test]
    fn zero_predictor_single_step() {
        let s = linear(1, 0.3, 0.3);
        let x = s.ddim_sample(|x, _| Ok(Tensor::zeros(x.shape())), &[5], 9).unwrap();
        let xt = gaussian(&[5], &mut rng(9));
        let want = xt.scale(1.0 / s.alpha_bar(1).unwrap().sqrt());
        assert!(x.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn ddim_sample_is_bit_deterministic() {
        let s = linear(20, 1e-3, 0.1);
        let predict = |x: &Tensor, t: usize| Ok(x.scale(0.1 * t as f64).map(f64::sin));
        let a = s.ddim_sample(predict, &[2, 2], 42).unwrap();
        let b = s.ddim_sample(predict, &[2, 2], 42).unwrap();
        let c = s.ddim_sample(predict, &[2, 2], 43).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn dm_loss_values() {
        let s = linear(5, 0.01, 0.1);
        let w = WeightFn::default();
        let e = Tensor::vector(&[1.0, 0.0]).unwrap();
        assert_eq!(dm_loss(&e, &e, 3, w, &s).unwrap(), 0.0);
        assert_eq!(dm_loss(&e, &Tensor::zeros(&[2]), 3, w, &s).unwrap(), 1.0);
        assert!(dm_loss(&e, &Tensor::zeros(&[3]), 3, w, &s).is_err());
        assert!(WeightFn::constant(0.0).is_err());
    }

    #[test]
    fn dm_loss_gradient_closed_form_and_fd() {
        let s = linear(5, 0.01, 0.1);
        let w = WeightFn::constant(2.5).unwrap();
        let mut r = rng(11);
        let eps = gaussian(&[6], &mut r);
        let mut p = ParamSet::new();
        p.insert("eps_hat", gaussian(&[6], &mut r), false).unwrap();

        let f = crate::numerics::scalar_fn(|g, b| {
            let e = g.constant(eps.clone());
            dm_loss_var(e, b.get("eps_hat")?, 2, w, &s)
        });
        let g = grad(f, &p).unwrap();
        let hat = p.get("eps_hat").unwrap();
        let want = hat.sub(&eps).unwrap().scale(2.0 * 2.5);
        assert!(g["eps_hat"].max_abs_diff(&want).unwrap() < 1e-12);
        let report = finite_diff_check(f, &p, 1e-6, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
