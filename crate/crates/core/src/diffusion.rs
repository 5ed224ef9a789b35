//! Noise schedule, label codec, forward corruption and training losses.

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::SeqTensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::ops::Deref;

/// Probability floor used inside every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal coefficients `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_S`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule with offset 0.008.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return config_err(format!("schedule needs at least 2 steps, got {steps}"));
        }
        let f = |s: usize| {
            let u = (s as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar = (0..=steps).map(|s| if s == 0 { 1.0 } else { f(s) / f0 }).collect();
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Affine map between `{0, 1}` / probability space and diffusion space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCodec {
    pub scale: f64,
}

impl Default for LabelCodec {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl LabelCodec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return config_err("label scale must be positive");
        }
        Ok(Self { scale })
    }

    /// `0 ↦ −scale`, `1 ↦ +scale`, linearly in between.
    pub fn encode(&self, x: &SeqTensor) -> SeqTensor {
        let s = self.scale;
        x.map(|v| s * (2.0 * v - 1.0))
    }

    pub fn decode(&self, y: &SeqTensor) -> SeqTensor {
        let s = self.scale;
        y.map(|v| (v / s + 1.0) / 2.0)
    }

    pub fn encode_labels(&self, y0: &LabelSequence) -> SeqTensor {
        self.encode(&y0.one_hot())
    }
}

/// Per-frame class ids over a fixed class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    ids: Vec<usize>,
    num_classes: usize,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= num_classes) {
            return Err(Error::Invalid(format!("class id {bad} ≥ {num_classes}")));
        }
        Ok(Self { ids, num_classes })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn one_hot(&self) -> SeqTensor {
        let c = self.num_classes;
        let mut t = SeqTensor::zeros(&[self.ids.len(), c]);
        for (i, &k) in self.ids.iter().enumerate() {
            t.set(i, k, 1.0);
        }
        t
    }

    /// `B_i = 1` iff frames `i` and `i + 1` carry different labels.
    pub fn boundaries(&self) -> Vec<f64> {
        self.ids
            .windows(2)
            .map(|w| if w[0] != w[1] { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-frame class probabilities; rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSequence(SeqTensor);

impl ProbSequence {
    pub fn new(p: SeqTensor) -> Result<Self> {
        if !p.is_matrix() {
            return dim_err("probabilities must be [L, C]");
        }
        for t in 0..p.frames() {
            let row = p.row(t);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("row {t} is not a distribution (sum {sum})")));
            }
        }
        Ok(Self(p))
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0.argmax_rows()
    }

    pub fn into_inner(self) -> SeqTensor {
        self.0
    }
}

impl Deref for ProbSequence {
    type Target = SeqTensor;
    fn deref(&self) -> &SeqTensor {
        &self.0
    }
}

/// `Y_s = √ᾱ_s·Y_0 + √(1 − ᾱ_s)·ε`, for `1 ≤ s ≤ S`.
pub fn corrupt(y0: &SeqTensor, s: usize, schedule: &DiffusionSchedule, noise: &SeqTensor) -> Result<SeqTensor> {
    if s == 0 || s > schedule.steps() {
        return Err(Error::Invalid(format!("step {s} outside 1..={}", schedule.steps())));
    }
    corrupt_with_alpha(y0, schedule.alpha_bar(s), noise)
}

/// Forward corruption for an explicit `ᾱ`.
pub fn corrupt_with_alpha(y0: &SeqTensor, alpha_bar: f64, noise: &SeqTensor) -> Result<SeqTensor> {
    if y0.shape() != noise.shape() {
        return dim_err("noise shape differs from labels");
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = y0.data().iter().zip(noise.data()).map(|(y, e)| a * y + b * e).collect();
    SeqTensor::new(y0.shape().to_vec(), data)
}

fn check_pair(p: &SeqTensor, y0: &LabelSequence) -> Result<(usize, usize)> {
    if !p.is_matrix() || p.frames() != y0.len() || p.channels() != y0.num_classes() {
        return dim_err(format!(
            "probabilities {:?} vs labels [{}, {}]",
            p.shape(),
            y0.len(),
            y0.num_classes()
        ));
    }
    Ok((p.frames(), p.channels()))
}

/// `(1/LC) Σ −Y log P` with probabilities floored at [`PROB_CLAMP`].
pub fn loss_ce(p: &SeqTensor, y0: &LabelSequence) -> Result<f64> {
    let (l, c) = check_pair(p, y0)?;
    let s: f64 = y0
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &k)| -p.at(i, k).clamp(PROB_CLAMP, 1.0).ln())
        .sum();
    Ok(s / (l * c) as f64)
}

/// `(1/((L−1)C)) Σ (log P_i − log P_{i+1})²` with probabilities floored at
/// [`PROB_CLAMP`]; optional cap on each squared term.
pub fn loss_smooth(p: &SeqTensor, cap: Option<f64>) -> f64 {
    smooth_from_logs(&p.map(|v| v.max(PROB_CLAMP).ln()), cap)
}

fn smooth_from_logs(logp: &SeqTensor, cap: Option<f64>) -> f64 {
    let (l, c) = (logp.frames(), logp.channels());
    if l < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..l - 1 {
        for (a, b) in logp.row(i).iter().zip(logp.row(i + 1)) {
            let sq = (a - b) * (a - b);
            s += cap.map_or(sq, |m| sq.min(m));
        }
    }
    s / ((l - 1) * c) as f64
}

/// Gaussian smoothing of a boundary indicator.
///
/// The kernel has standard deviation `sigma`, support `±⌈4σ⌉` and a peak of 1,
/// so an isolated boundary keeps target 1; the result is clamped to `[0, 1]`.
pub fn smooth_boundaries(b: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return b.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = b.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                let j = i - d;
                if (0..n).contains(&j) {
                    acc += kernel[k] * b[j as usize];
                }
            }
            acc.clamp(0.0, 1.0)
        })
        .collect()
}

fn adjacent_products(p: &SeqTensor) -> Vec<f64> {
    (0..p.frames().saturating_sub(1))
        .map(|i| p.row(i).iter().zip(p.row(i + 1)).map(|(a, b)| a * b).sum())
        .collect()
}

/// Binary cross-entropy between smoothed boundary targets and `1 − P_i·P_{i+1}`.
pub fn loss_boundary(p: &SeqTensor, b_smooth: &[f64]) -> Result<f64> {
    let l = p.frames();
    if l < 2 {
        return Err(Error::Invalid("boundary loss needs at least 2 frames".into()));
    }
    if b_smooth.len() != l - 1 {
        return dim_err(format!("{} boundary targets for {l} frames", b_smooth.len()));
    }
    let q = adjacent_products(p);
    let s: f64 = q
        .iter()
        .zip(b_smooth)
        .map(|(&q, &b)| {
            let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -b * (1.0 - q).ln() - (1.0 - b) * q.ln()
        })
        .sum();
    Ok(s / (l - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub ce: f64,
    pub smooth: f64,
    pub boundary: f64,
    pub total: f64,
}

/// Unit-weight sum of the three losses.
pub fn loss_total(p: &SeqTensor, y0: &LabelSequence, b_smooth: &[f64]) -> Result<LossParts> {
    let ce = loss_ce(p, y0)?;
    let smooth = loss_smooth(p, None);
    let boundary = loss_boundary(p, b_smooth)?;
    Ok(LossParts {
        ce,
        smooth,
        boundary,
        total: ce + smooth + boundary,
    })
}

/// Per-term multipliers of the training objective; unit weights give the plain sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub smooth: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            smooth: 1.0,
            boundary: 1.0,
        }
    }
}

/// Losses and the gradient of their weighted sum with respect to log-probabilities.
///
/// `LossParts::total` is the weighted sum; the individual parts are unweighted.
///
/// Working in log space keeps the smoothness term's gradient finite when a
/// probability underflows. Clamps bound the loss value only: derivatives are
/// taken at the clamped point, so saturated terms keep pulling toward the target.
pub fn loss_total_grad_log(
    logp: &SeqTensor,
    y0: &LabelSequence,
    b_smooth: &[f64],
    smooth_cap: Option<f64>,
    weights: &LossWeights,
) -> Result<(LossParts, SeqTensor)> {
    let (l, c) = check_pair(logp, y0)?;
    if l < 2 {
        return Err(Error::Invalid("losses need at least 2 frames".into()));
    }
    if b_smooth.len() != l - 1 {
        return dim_err(format!("{} boundary targets for {l} frames", b_smooth.len()));
    }
    let p = logp.map(f64::exp);
    let mut grad = SeqTensor::zeros(&[l, c]);
    let floor = PROB_CLAMP.ln();

    let ce_norm = 1.0 / (l * c) as f64;
    let mut ce = 0.0;
    for (i, &k) in y0.ids().iter().enumerate() {
        ce -= logp.at(i, k).clamp(floor, 0.0);
        grad.set(i, k, grad.at(i, k) - weights.ce * ce_norm);
    }
    ce *= ce_norm;

    let sm_norm = 1.0 / ((l - 1) * c) as f64;
    let mut smooth = 0.0;
    for i in 0..l - 1 {
        for ch in 0..c {
            let (a, b) = (logp.at(i, ch), logp.at(i + 1, ch));
            let d = a.max(floor) - b.max(floor);
            let sq = d * d;
            match smooth_cap {
                Some(m) if sq > m => smooth += m,
                _ => {
                    smooth += sq;
                    let g = weights.smooth * 2.0 * d * sm_norm;
                    grad.set(i, ch, grad.at(i, ch) + g);
                    grad.set(i + 1, ch, grad.at(i + 1, ch) - g);
                }
            }
        }
    }
    smooth *= sm_norm;

    let bd_norm = 1.0 / (l - 1) as f64;
    let mut boundary = 0.0;
    for (i, (&q, &b)) in adjacent_products(&p).iter().zip(b_smooth).enumerate() {
        let qc = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        boundary += -b * (1.0 - qc).ln() - (1.0 - b) * qc.ln();
        let dq = weights.boundary * (b / (1.0 - qc) - (1.0 - b) / qc) * bd_norm;
        for ch in 0..c {
            let (pi, pn) = (p.at(i, ch), p.at(i + 1, ch));
            // d q / d log p = p_i · p_{i+1} for both neighbours
            let g = dq * pi * pn;
            grad.set(i, ch, grad.at(i, ch) + g);
            grad.set(i + 1, ch, grad.at(i + 1, ch) + g);
        }
    }
    boundary *= bd_norm;

    Ok((
        LossParts {
            ce,
            smooth,
            boundary,
            total: weights.ce * ce + weights.smooth * smooth + weights.boundary * boundary,
        },
        grad,
    ))
}

/// Gradient of [`loss_total`] with respect to the probabilities themselves.
pub fn loss_total_grad_probs(p: &SeqTensor, y0: &LabelSequence, b_smooth: &[f64]) -> Result<SeqTensor> {
    let logp = p.map(f64::ln);
    let (_, g) = loss_total_grad_log(&logp, y0, b_smooth, None, &LossWeights::default())?;
    let data = g.data().iter().zip(p.data()).map(|(g, p)| g / p).collect();
    SeqTensor::new(p.shape().to_vec(), data)
}
