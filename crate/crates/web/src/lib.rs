//! Browser bindings for three interactive views: the noise schedule, a
//! fixed-vs-adaptive sampling explorer and a metrics playground.
//!
//! Each export returns a JSON string so the page needs no generated type glue.
//! The plain functions behind the exports are usable and tested natively.

use diffseg::dataset::median_filter_labels;
use diffseg::diffusion::{DiffusionSchedule, LabelCodec, LabelSequence, ProbSequence};
use diffseg::metrics::{self, segments_from_labels, MetricReport, Segment};
use diffseg::sampler::{infer_adaptive, infer_fixed, SamplerConfig, SimilarityTarget, Trajectory};
use diffseg::{Result, SeqTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ScheduleCurve {
    pub alpha_bar: Vec<f64>,
    /// Cosine between consecutive latents of an exact denoiser at each skip size.
    pub skip_similarity: Vec<(usize, f64)>,
}

pub fn schedule_curve(steps: usize) -> Result<ScheduleCurve> {
    let s = DiffusionSchedule::cosine(steps)?;
    let angle = |t: usize| s.alpha_bar(t).sqrt().acos();
    let skip_similarity = [1, 5, 10, 20, 40, 80, 160]
        .into_iter()
        .filter(|&d| 2 * d <= steps)
        .map(|d| {
            let hi = (steps / 2 + d / 2).min(steps);
            (d, (angle(hi) - angle(hi - d)).cos())
        })
        .collect();
    Ok(ScheduleCurve {
        alpha_bar: s.values().to_vec(),
        skip_similarity,
    })
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct ExplorerParams {
    pub steps: usize,
    pub delta_init: usize,
    pub gamma: f64,
    pub theta_high: f64,
    pub theta_low: f64,
    pub delta_max: usize,
    pub frames: usize,
    pub classes: usize,
    /// Logit noise of the simulated denoiser at `s = S`; it shrinks linearly to zero at `s = 0`.
    pub confusion: f64,
    pub similarity: SimilarityTarget,
    pub seed: u64,
}

impl Default for ExplorerParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            delta_init: 40,
            gamma: 2.0,
            theta_high: 0.997,
            theta_low: 0.990,
            delta_max: 200,
            frames: 96,
            classes: 4,
            confusion: 2.0,
            similarity: SimilarityTarget::Latent,
            seed: 7,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SamplerRun {
    pub trajectory: Trajectory,
    pub labels: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct Exploration {
    pub truth: Vec<usize>,
    pub fixed: SamplerRun,
    pub adaptive: SamplerRun,
}

fn truth(frames: usize, classes: usize) -> Result<LabelSequence> {
    let seg = (frames / (2 * classes)).max(1);
    LabelSequence::new((0..frames).map(|t| (t / seg) % classes).collect(), classes)
}

/// Ground truth blurred by step-dependent logit noise drawn from a per-step stream.
fn simulated_denoiser(
    y: &LabelSequence,
    steps: usize,
    confusion: f64,
    seed: u64,
) -> impl FnMut(&SeqTensor, usize) -> Result<ProbSequence> + '_ {
    move |_, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let level = confusion * s as f64 / steps as f64;
        let mut logits = SeqTensor::randn(&[y.len(), y.num_classes()], &mut rng).map(|v| v * level);
        for (t, &c) in y.ids().iter().enumerate() {
            logits.set(t, c, logits.at(t, c) + 4.0);
        }
        for t in 0..logits.frames() {
            diffseg::autodiff::softmax_in_place(logits.row_mut(t));
        }
        ProbSequence::new(logits)
    }
}

pub fn explore(p: &ExplorerParams) -> Result<Exploration> {
    let cfg = SamplerConfig {
        delta_init: p.delta_init,
        gamma: p.gamma,
        theta_high: p.theta_high,
        theta_low: p.theta_low,
        delta_max: p.delta_max,
        similarity: p.similarity,
        ..SamplerConfig::with_steps(p.steps)
    };
    cfg.validate()?;
    let y = truth(p.frames, p.classes)?;
    let schedule = DiffusionSchedule::cosine(p.steps)?;
    let codec = LabelCodec::default();
    let run = |adaptive: bool| -> Result<SamplerRun> {
        let mut den = simulated_denoiser(&y, p.steps, p.confusion, p.seed);
        let mut noise = ChaCha8Rng::seed_from_u64(p.seed);
        let out = if adaptive {
            infer_adaptive(&mut den, p.frames, p.classes, &schedule, &codec, &cfg, &mut noise)?
        } else {
            infer_fixed(&mut den, p.frames, p.classes, &schedule, &codec, &cfg, &mut noise)?
        };
        let labels = out.probs.argmax();
        Ok(SamplerRun {
            accuracy: metrics::frame_accuracy(&labels, y.ids())?,
            labels,
            trajectory: out.trajectory,
        })
    };
    Ok(Exploration {
        truth: y.ids().to_vec(),
        fixed: run(false)?,
        adaptive: run(true)?,
    })
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    pub raw: MetricReport,
    pub filtered: MetricReport,
    pub filtered_labels: Vec<usize>,
    pub gt_segments: Vec<Segment>,
    pub pred_segments: Vec<Segment>,
}

/// Parses labels written as digits, optionally separated by commas or spaces.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let tokens: Vec<&str> = if text.contains([',', ' ']) {
        text.split([',', ' ']).filter(|t| !t.is_empty()).collect()
    } else {
        text.trim().split("").filter(|t| !t.is_empty()).collect()
    };
    tokens
        .iter()
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| diffseg::Error::Invalid(format!("bad label {t:?}")))
        })
        .collect()
}

pub fn metrics_view(pred: &str, gt: &str, median_window: usize) -> Result<MetricsView> {
    let (pred, gt) = (parse_labels(pred)?, parse_labels(gt)?);
    let filtered_labels = median_filter_labels(&pred, median_window)?;
    Ok(MetricsView {
        raw: metrics::report(&pred, &gt)?,
        filtered: metrics::report(&filtered_labels, &gt)?,
        gt_segments: segments_from_labels(&gt),
        pred_segments: segments_from_labels(&pred),
        filtered_labels,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve_js(steps: usize) -> std::result::Result<String, JsValue> {
    to_js(schedule_curve(steps))
}

/// Takes an `ExplorerParams` JSON document; omitted fields take their defaults.
#[wasm_bindgen(js_name = explore)]
pub fn explore_js(params: &str) -> std::result::Result<String, JsValue> {
    let mut base = serde_json::to_value(ExplorerParams::default()).expect("params serialize");
    let patch: serde_json::Value = serde_json::from_str(params).map_err(|e| JsValue::from_str(&e.to_string()))?;
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        b.extend(p.clone());
    }
    let p: ExplorerParams = serde_json::from_value(base).map_err(|e| JsValue::from_str(&e.to_string()))?;
    to_js(explore(&p))
}

#[wasm_bindgen(js_name = metricsView)]
pub fn metrics_view_js(pred: &str, gt: &str, median_window: usize) -> std::result::Result<String, JsValue> {
    to_js(metrics_view(pred, gt, median_window))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_curve_matches_core() {
        let c = schedule_curve(1000).unwrap();
        assert_eq!(c.alpha_bar.len(), 1001);
        assert_eq!(c.alpha_bar[0], 1.0);
        let sims: Vec<f64> = c.skip_similarity.iter().map(|s| s.1).collect();
        assert!(sims.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn explorer_adaptive_saves_calls_on_a_confident_denoiser() {
        let e = explore(&ExplorerParams::default()).unwrap();
        assert_eq!(e.fixed.trajectory.calls(), 25);
        assert!(e.adaptive.trajectory.calls() < 25);
        assert_eq!(e.fixed.accuracy, 100.0);
        assert_eq!(e.truth.len(), 96);
    }

    #[test]
    fn explorer_probability_similarity_reacts_to_confusion() {
        let calls = |confusion| {
            let p = ExplorerParams {
                confusion,
                similarity: SimilarityTarget::Probs,
                ..ExplorerParams::default()
            };
            explore(&p).unwrap().adaptive.trajectory.calls()
        };
        assert!(calls(0.0) <= calls(3.0));
    }

    #[test]
    fn explorer_rejects_bad_thresholds() {
        let p = ExplorerParams {
            theta_low: 0.9999,
            ..ExplorerParams::default()
        };
        assert!(explore(&p).is_err());
    }

    #[test]
    fn metrics_view_filters_spikes() {
        let v = metrics_view("0001000111", "0000000111", 3).unwrap();
        assert_eq!(v.filtered_labels, parse_labels("0,0,0,0,0,0,0,1,1,1").unwrap());
        assert_eq!(v.filtered.acc, 100.0);
        assert!(v.raw.edit < 100.0);
        assert_eq!(v.gt_segments.len(), 2);
        assert!(parse_labels("0,x").is_err());
    }
}
