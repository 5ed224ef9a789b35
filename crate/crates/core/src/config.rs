//! Flat run configuration shared by every command.

use crate::dataset::SyntheticGenConfig;
use crate::decoder::DecoderConfig;
use crate::diffusion::LossWeights;
use crate::encoder::TdpEncoderConfig;
use crate::error::{config_err, Result};
use crate::optim::AdamConfig;
use crate::sampler::{SamplerConfig, SimilarityTarget};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub hidden: usize,
    pub encoder_layers: usize,
    pub kernel: usize,
    pub pool_window: usize,
    pub ffn_expansion: usize,
    pub instance_norm: bool,
    pub decoder_blocks: usize,
    pub heads: usize,

    pub diffusion_steps: usize,
    pub label_scale: f64,
    pub boundary_sigma: f64,
    pub smooth_clamp: bool,
    pub mask_radius: usize,
    pub ce_weight: f64,
    pub smooth_weight: f64,
    pub boundary_weight: f64,

    pub lr: f64,
    pub train_steps: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub augment_train: bool,

    pub delta_init: usize,
    pub eta: f64,
    pub gamma: f64,
    pub theta_high: f64,
    pub theta_low: f64,
    pub delta_min: usize,
    pub delta_max: usize,
    pub similarity: SimilarityTarget,
    pub augment: bool,
    pub subsample_rate: usize,
    pub median_window: usize,

    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub blur_radius: usize,
    pub test_videos: usize,

    pub eval_split: String,
    pub bench_reps: usize,
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticGenConfig::default();
        Self {
            seed: 7,
            hidden: 64,
            encoder_layers: 8,
            kernel: 3,
            pool_window: 3,
            ffn_expansion: 2,
            instance_norm: true,
            decoder_blocks: 4,
            heads: 1,
            diffusion_steps: 1000,
            label_scale: 1.0,
            boundary_sigma: 1.0,
            smooth_clamp: false,
            mask_radius: 4,
            ce_weight: 1.0,
            smooth_weight: 1.0,
            boundary_weight: 1.0,
            lr: 5e-4,
            train_steps: 2000,
            log_every: 50,
            checkpoint_every: 500,
            augment_train: false,
            delta_init: 40,
            eta: 0.0,
            gamma: 2.0,
            theta_high: 0.997,
            theta_low: 0.990,
            delta_min: 1,
            delta_max: 200,
            similarity: SimilarityTarget::Latent,
            augment: false,
            subsample_rate: 4,
            median_window: 9,
            num_videos: data.num_videos,
            min_len: data.min_len,
            max_len: data.max_len,
            num_classes: data.num_classes,
            feature_dim: data.feature_dim,
            min_segment: data.min_segment,
            max_segment: data.max_segment,
            separation: data.separation,
            noise_std: data.noise_std,
            blur_radius: data.blur_radius,
            test_videos: data.test_videos,
            eval_split: "train".into(),
            bench_reps: 3,
            svg: true,
        }
    }
}

/// Squared-difference cap used when `smooth_clamp` is on.
pub const SMOOTH_CAP: f64 = 16.0;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder(&self, input_dim: usize) -> TdpEncoderConfig {
        let mut e = TdpEncoderConfig::new(input_dim, self.hidden, self.encoder_layers);
        e.window = self.kernel;
        e.pool_window = self.pool_window;
        e.ffn_expansion = self.ffn_expansion;
        e.instance_norm = self.instance_norm;
        e
    }

    pub fn decoder(&self, num_classes: usize) -> DecoderConfig {
        let mut d = DecoderConfig::new(self.hidden, num_classes, self.decoder_blocks);
        d.heads = self.heads;
        d.window = self.kernel;
        d.ffn_expansion = self.ffn_expansion;
        d
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.diffusion_steps,
            delta_init: self.delta_init,
            eta: self.eta,
            gamma: self.gamma,
            theta_high: self.theta_high,
            theta_low: self.theta_low,
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            similarity: self.similarity,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ce: self.ce_weight,
            smooth: self.smooth_weight,
            boundary: self.boundary_weight,
        }
    }

    pub fn smooth_cap(&self) -> Option<f64> {
        self.smooth_clamp.then_some(SMOOTH_CAP)
    }

    pub fn synthetic(&self) -> SyntheticGenConfig {
        SyntheticGenConfig {
            num_videos: self.num_videos,
            min_len: self.min_len,
            max_len: self.max_len,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            min_segment: self.min_segment,
            max_segment: self.max_segment,
            separation: self.separation,
            noise_std: self.noise_std,
            blur_radius: self.blur_radius,
            test_videos: self.test_videos,
            seed: self.seed,
        }
    }

    /// Copies sampling and post-processing settings, leaving architecture and training fields alone.
    pub fn with_inference_from(&self, other: &RunConfig) -> RunConfig {
        RunConfig {
            delta_init: other.delta_init,
            eta: other.eta,
            gamma: other.gamma,
            theta_high: other.theta_high,
            theta_low: other.theta_low,
            delta_min: other.delta_min,
            delta_max: other.delta_max,
            similarity: other.similarity,
            augment: other.augment,
            subsample_rate: other.subsample_rate,
            median_window: other.median_window,
            eval_split: other.eval_split.clone(),
            bench_reps: other.bench_reps,
            svg: other.svg,
            seed: other.seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder(self.feature_dim.max(1)).validate()?;
        self.decoder(self.num_classes.max(2)).validate()?;
        self.sampler().validate()?;
        self.synthetic().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err("learning rate must be positive");
        }
        if !(self.label_scale > 0.0 && self.label_scale.is_finite()) {
            return config_err("label scale must be positive");
        }
        if !(self.boundary_sigma >= 0.0 && self.boundary_sigma.is_finite()) {
            return config_err("boundary sigma must be non-negative");
        }
        let w = self.loss_weights();
        if ![w.ce, w.smooth, w.boundary].iter().all(|v| v.is_finite() && *v >= 0.0) || w.ce == 0.0 {
            return config_err("loss weights must be non-negative with a positive CE weight");
        }
        if self.log_every == 0 {
            return config_err("log_every must be positive");
        }
        if self.subsample_rate == 0 {
            return config_err("subsample rate must be positive");
        }
        if self.median_window.is_multiple_of(2) {
            return config_err("median window must be odd");
        }
        if self.bench_reps == 0 {
            return config_err("bench_reps must be positive");
        }
        if self.eval_split.is_empty() {
            return config_err("eval_split must be non-empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.sampler().delta_max, 200);
        assert_eq!(c.lr, 5e-4);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "lr": 1e-4, "similarity": "probs"}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.similarity, SimilarityTarget::Probs);
        assert_eq!(c.hidden, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"hiden": 32}"#).is_err());
        assert!(RunConfig::from_json(r#"{"theta_low": 0.9999}"#).is_err());
        assert!(RunConfig::from_json(r#"{"median_window": 4}"#).is_err());
        assert!(RunConfig::from_json(r#"{"kernel": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr": -1}"#).is_err());
    }
}
