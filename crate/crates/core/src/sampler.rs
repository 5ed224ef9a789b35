//! DDIM sampling with fixed or similarity-driven adaptive skips.
//!
//! Both loops start from `Ŷ_S ~ N(0, I)`, ask the denoiser for `P_s`, map it
//! into diffusion space with the label codec and take a DDIM step to
//! `s_next = max(s − Δ, 0)`. The adaptive loop compares successive latents
//! with the absolute cosine similarity and rescales `Δ` by `γ` when they are
//! almost parallel (`> θ_high`) or clearly diverging (`< θ_low`).

use crate::diffusion::{DiffusionSchedule, LabelCodec, ProbSequence};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::SeqTensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// What the adaptive controller compares between steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityTarget {
    /// Successive latents `Ŷ_s`, `Ŷ_{s−Δ}`.
    Latent,
    /// Successive decoded probabilities.
    Probs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub delta_init: usize,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    pub gamma: f64,
    pub theta_high: f64,
    pub theta_low: f64,
    pub delta_min: usize,
    pub delta_max: usize,
    pub similarity: SimilarityTarget,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::with_steps(1000)
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            delta_init: 40.min(steps.max(1)),
            eta: 0.0,
            gamma: 2.0,
            theta_high: 0.997,
            theta_low: 0.990,
            delta_min: 1,
            delta_max: (steps / 5).max(1),
            similarity: SimilarityTarget::Latent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.theta_low && self.theta_low <= self.theta_high && self.theta_high < 1.0) {
            return config_err("thresholds must satisfy 0 < θ_low ≤ θ_high < 1");
        }
        if !(self.delta_min >= 1
            && self.delta_min <= self.delta_init
            && self.delta_init <= self.delta_max
            && self.delta_max <= self.steps)
        {
            return config_err(format!(
                "need 1 ≤ Δ_min ({}) ≤ Δ_init ({}) ≤ Δ_max ({}) ≤ S ({})",
                self.delta_min, self.delta_init, self.delta_max, self.steps
            ));
        }
        if self.gamma <= 1.0 {
            return config_err("γ must exceed 1");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return config_err("η must lie in [0, 1]");
        }
        Ok(())
    }

    /// Skip length whose fixed schedule makes exactly `budget` denoiser calls.
    pub fn delta_for_budget(steps: usize, budget: usize) -> Result<usize> {
        if budget == 0 || budget > steps {
            return config_err(format!("budget {budget} outside 1..={steps}"));
        }
        let delta = steps.div_ceil(budget);
        if steps.div_ceil(delta) != budget {
            return config_err(format!("no fixed skip gives exactly {budget} calls over {steps} steps"));
        }
        Ok(delta)
    }
}

/// Anything that maps a latent at step `s` to per-frame class probabilities.
pub trait Denoiser {
    fn denoise(&mut self, latent: &SeqTensor, step: usize) -> Result<ProbSequence>;
}

impl<F> Denoiser for F
where
    F: FnMut(&SeqTensor, usize) -> Result<ProbSequence>,
{
    fn denoise(&mut self, latent: &SeqTensor, step: usize) -> Result<ProbSequence> {
        self(latent, step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub next_step: usize,
    pub delta: usize,
    pub similarity: f64,
    pub calls: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn calls(&self) -> usize {
        self.steps.last().map_or(0, |s| s.calls)
    }

    /// Visited steps including the terminal 0.
    pub fn visited(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.steps.iter().map(|s| s.step).collect();
        if let Some(last) = self.steps.last() {
            v.push(last.next_step);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub probs: ProbSequence,
    pub latent: SeqTensor,
    pub trajectory: Trajectory,
}

/// DDIM `σ_s` for stochasticity `eta`; zero whenever `eta` is zero or `ᾱ_next = 1`.
pub fn ddim_sigma(schedule: &DiffusionSchedule, s: usize, s_next: usize, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let (a, an) = (schedule.alpha_bar(s), schedule.alpha_bar(s_next));
    eta * ((1.0 - an) / (1.0 - a)).max(0.0).sqrt() * (1.0 - a / an).max(0.0).sqrt()
}

/// One DDIM update from `s` to `s_next` given the clean estimate `x0` in diffusion space.
///
/// `Ŷ_next = √ᾱ_next·x0 + √(1 − ᾱ_next − σ²)·(Ŷ_s − √ᾱ_s·x0)/√(1 − ᾱ_s) + σ·ε`
pub fn ddim_update(
    latent: &SeqTensor,
    x0: &SeqTensor,
    alpha: f64,
    alpha_next: f64,
    sigma: f64,
    noise: Option<&SeqTensor>,
) -> Result<SeqTensor> {
    if latent.shape() != x0.shape() {
        return dim_err("latent and estimate shapes differ");
    }
    let radicand = 1.0 - alpha_next - sigma * sigma;
    if radicand < -1e-12 {
        return config_err(format!(
            "σ² = {} exceeds 1 − ᾱ_next = {}",
            sigma * sigma,
            1.0 - alpha_next
        ));
    }
    let dir = radicand.max(0.0).sqrt();
    let (sa, san) = (alpha.sqrt(), alpha_next.sqrt());
    let denom = (1.0 - alpha).sqrt();
    let mut out = Vec::with_capacity(latent.len());
    for (i, (&y, &p)) in latent.data().iter().zip(x0.data()).enumerate() {
        let eps = if denom > 0.0 { (y - sa * p) / denom } else { 0.0 };
        let mut v = san * p + dir * eps;
        if sigma > 0.0 {
            v += sigma * noise.map_or(0.0, |n| n.data()[i]);
        }
        out.push(v);
    }
    SeqTensor::new(latent.shape().to_vec(), out)
}

/// DDIM step driven by decoder probabilities.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    latent: &SeqTensor,
    probs: &ProbSequence,
    s: usize,
    s_next: usize,
    schedule: &DiffusionSchedule,
    codec: &LabelCodec,
    sigma: f64,
    rng: &mut R,
) -> Result<SeqTensor> {
    if s_next >= s || s > schedule.steps() {
        return config_err(format!("invalid DDIM transition {s} -> {s_next}"));
    }
    let x0 = codec.encode(probs);
    let noise = if sigma > 0.0 {
        Some(SeqTensor::randn(latent.shape(), rng))
    } else {
        None
    };
    ddim_update(
        latent,
        &x0,
        schedule.alpha_bar(s),
        schedule.alpha_bar(s_next),
        sigma,
        noise.as_ref(),
    )
}

/// `|a·b| / (‖a‖‖b‖)` over flattened tensors; zero if either norm vanishes.
pub fn similarity(a: &SeqTensor, b: &SeqTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err("similarity inputs differ in shape");
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        log::warn!("similarity of a zero-norm sequence taken as 0");
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).abs().min(1.0))
}

/// Grow, keep or shrink `Δ` from the latest similarity, clamped to `[Δ_min, Δ_max]`.
pub fn adjust_delta(delta: usize, sim: f64, cfg: &SamplerConfig) -> usize {
    let next = if sim > cfg.theta_high {
        (delta as f64 * cfg.gamma).round() as usize
    } else if sim < cfg.theta_low {
        ((delta as f64 / cfg.gamma).round() as usize).max(1)
    } else {
        delta
    };
    next.clamp(cfg.delta_min, cfg.delta_max)
}

fn now_ms() -> f64 {
    #[cfg(not(target_arch = "wasm32"))]
    {
        use std::sync::OnceLock;
        use std::time::Instant;
        static START: OnceLock<Instant> = OnceLock::new();
        START.get_or_init(Instant::now).elapsed().as_secs_f64() * 1e3
    }
    #[cfg(target_arch = "wasm32")]
    {
        0.0
    }
}

fn initial_noise<R: Rng + ?Sized>(frames: usize, classes: usize, rng: &mut R) -> SeqTensor {
    let data = (0..frames * classes)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    SeqTensor::new(vec![frames, classes], data).expect("shape")
}

fn run<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &mut D,
    frames: usize,
    classes: usize,
    schedule: &DiffusionSchedule,
    codec: &LabelCodec,
    cfg: &SamplerConfig,
    adaptive: bool,
    rng: &mut R,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if cfg.steps != schedule.steps() {
        return config_err(format!(
            "sampler S = {} but schedule has {}",
            cfg.steps,
            schedule.steps()
        ));
    }
    let mut latent = initial_noise(frames, classes, rng);
    let mut s = cfg.steps;
    let mut delta = cfg.delta_init;
    let mut traj = Trajectory::default();
    let mut prev_probs: Option<SeqTensor> = None;
    let mut last = None;
    while s > 0 {
        let t0 = now_ms();
        let probs = denoiser.denoise(&latent, s)?;
        let used = delta.min(s);
        let s_next = s - used;
        let sigma = ddim_sigma(schedule, s, s_next, cfg.eta);
        let next = ddim_step(&latent, &probs, s, s_next, schedule, codec, sigma, rng)?;
        let sim = match cfg.similarity {
            SimilarityTarget::Latent => similarity(&latent, &next)?,
            SimilarityTarget::Probs => match &prev_probs {
                Some(p) => similarity(p, &probs)?,
                // nothing to compare on the first call
                None => cfg.theta_low,
            },
        };
        traj.steps.push(TrajectoryStep {
            step: s,
            next_step: s_next,
            delta: used,
            similarity: sim,
            calls: traj.steps.len() + 1,
            wall_ms: now_ms() - t0,
        });
        if adaptive {
            delta = adjust_delta(delta, sim, cfg);
        }
        if cfg.similarity == SimilarityTarget::Probs {
            prev_probs = Some((*probs).clone());
        }
        latent = next;
        s = s_next;
        last = Some(probs);
    }
    Ok(SampleOutput {
        probs: last.expect("at least one step"),
        latent,
        trajectory: traj,
    })
}

/// Fixed skip `Δ_init`: exactly `⌈S/Δ⌉` denoiser calls.
pub fn infer_fixed<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &mut D,
    frames: usize,
    classes: usize,
    schedule: &DiffusionSchedule,
    codec: &LabelCodec,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    run(denoiser, frames, classes, schedule, codec, cfg, false, rng)
}

/// Adaptive skip: `Δ` is rescaled after every committed step.
pub fn infer_adaptive<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &mut D,
    frames: usize,
    classes: usize,
    schedule: &DiffusionSchedule,
    codec: &LabelCodec,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    run(denoiser, frames, classes, schedule, codec, cfg, true, rng)
}
