//! Encoder, decoder and optimizer bundled for training and inference.

use crate::config::RunConfig;
use crate::dataset::{median_filter_labels, recombine, subsample_features};
use crate::decoder::Decoder;
use crate::diffusion::{
    corrupt, loss_total_grad_log, smooth_boundaries, DiffusionSchedule, LabelCodec, LabelSequence, LossParts,
    ProbSequence,
};
use crate::encoder::TdpEncoder;
use crate::error::{dim_err, Error, Result};
use crate::masking::{sample_random_mask, ConditionMask};
use crate::nn::{ParamStore, Session};
use crate::optim::{adam_step, AdamState};
use crate::sampler::{infer_adaptive, infer_fixed, Denoiser, SampleOutput, SamplerConfig, Trajectory};
use crate::tensor::SeqTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Fixed,
    Adaptive,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub store: ParamStore,
    pub encoder: TdpEncoder,
    pub decoder: Decoder,
    pub adam: AdamState,
    pub step: u64,
    pub schedule: DiffusionSchedule,
    pub codec: LabelCodec,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    pub calls: usize,
}

impl Model {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: RunConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = TdpEncoder::new(&mut store, "enc", cfg.encoder(input_dim), &mut rng)?;
        let decoder = Decoder::new(&mut store, "dec", cfg.decoder(num_classes), &mut rng)?;
        let adam = AdamState::new(store.tensors());
        let schedule = DiffusionSchedule::cosine(cfg.diffusion_steps)?;
        let codec = LabelCodec::new(cfg.label_scale)?;
        Ok(Self {
            cfg,
            input_dim,
            num_classes,
            store,
            encoder,
            decoder,
            adam,
            step: 0,
            schedule,
            codec,
        })
    }

    fn check_features(&self, features: &SeqTensor) -> Result<()> {
        if !features.is_matrix() || features.channels() != self.input_dim {
            return dim_err(format!(
                "expected [L, {}] features, got {:?}",
                self.input_dim,
                features.shape()
            ));
        }
        Ok(())
    }

    /// One optimizer step on a single video; parameters are untouched on error.
    pub fn training_step<R: Rng + ?Sized>(
        &mut self,
        features: &SeqTensor,
        y0: &LabelSequence,
        rng: &mut R,
    ) -> Result<LossParts> {
        self.check_features(features)?;
        if y0.len() != features.frames() || y0.num_classes() != self.num_classes {
            return dim_err("labels do not match features or class count");
        }
        let s = rng.random_range(1..=self.schedule.steps());
        let mask = sample_random_mask(y0, self.cfg.mask_radius, rng)?;
        let noise = SeqTensor::randn(&[y0.len(), self.num_classes], rng);
        let ys = corrupt(&self.codec.encode_labels(y0), s, &self.schedule, &noise)?;
        let bbar = smooth_boundaries(&y0.boundaries(), self.cfg.boundary_sigma);

        let mut sess = Session::new(&self.store, true);
        let f = sess.input(features.clone());
        let h = self.encoder.forward(&mut sess, f)?;
        let y = sess.input(ys);
        let logp = self.decoder.decode(&mut sess, y, s, h, &mask)?;
        let (parts, seed) = loss_total_grad_log(
            sess.value(logp),
            y0,
            &bbar,
            self.cfg.smooth_cap(),
            &self.cfg.loss_weights(),
        )?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} (s = {s}, mask {:?}): {parts:?}",
                self.step, mask.kind
            )));
        }
        let mut grads = sess.tape.backward(logp, seed)?;
        let grads = sess.param_grads(&mut grads);
        if let Some(i) = grads.iter().position(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {}",
                self.store.names()[i],
                self.step
            )));
        }
        adam_step(self.store.tensors_mut(), &grads, &mut self.adam, &self.cfg.adam())?;
        self.step += 1;
        Ok(parts)
    }

    /// Encoder features for conditioning, computed without gradients.
    pub fn encode(&self, features: &SeqTensor) -> Result<SeqTensor> {
        self.check_features(features)?;
        let mut sess = Session::new(&self.store, false);
        let f = sess.input(features.clone());
        let h = self.encoder.forward(&mut sess, f)?;
        Ok(sess.value(h).clone())
    }

    pub fn denoiser(&self, cond: SeqTensor) -> ModelDenoiser<'_> {
        let mask = ConditionMask::ones(cond.frames());
        ModelDenoiser {
            model: self,
            cond,
            mask,
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        features: &SeqTensor,
        kind: SamplerKind,
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<SampleOutput> {
        let cond = self.encode(features)?;
        let frames = cond.frames();
        let mut den = self.denoiser(cond);
        match kind {
            SamplerKind::Fixed => infer_fixed(
                &mut den,
                frames,
                self.num_classes,
                &self.schedule,
                &self.codec,
                sampler,
                rng,
            ),
            SamplerKind::Adaptive => infer_adaptive(
                &mut den,
                frames,
                self.num_classes,
                &self.schedule,
                &self.codec,
                sampler,
                rng,
            ),
        }
    }

    /// Frame labels for a video, optionally through the subsample, recombine and median-filter pipeline.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        features: &SeqTensor,
        kind: SamplerKind,
        sampler: &SamplerConfig,
        augment: bool,
        rng: &mut R,
    ) -> Result<Prediction> {
        if !augment {
            let out = self.sample(features, kind, sampler, rng)?;
            return Ok(Prediction {
                labels: out.probs.argmax(),
                calls: out.trajectory.calls(),
                trajectories: vec![out.trajectory],
            });
        }
        let rate = self.cfg.subsample_rate;
        let mut subs = Vec::with_capacity(rate);
        let mut trajectories = Vec::with_capacity(rate);
        for view in subsample_features(features, rate)? {
            if view.frames() == 0 {
                subs.push(Vec::new());
                continue;
            }
            let out = self.sample(&view, kind, sampler, rng)?;
            subs.push(out.probs.argmax());
            trajectories.push(out.trajectory);
        }
        let merged = recombine(&subs, features.frames(), rate)?;
        Ok(Prediction {
            labels: median_filter_labels(&merged, self.cfg.median_window)?,
            calls: trajectories.iter().map(Trajectory::calls).sum(),
            trajectories,
        })
    }
}

/// Decoder bound to fixed encoder features with the all-ones mask.
pub struct ModelDenoiser<'m> {
    model: &'m Model,
    cond: SeqTensor,
    mask: ConditionMask,
}

impl Denoiser for ModelDenoiser<'_> {
    fn denoise(&mut self, latent: &SeqTensor, step: usize) -> Result<ProbSequence> {
        self.model
            .decoder
            .decode_probs(&self.model.store, latent, step, &self.cond, &self.mask)
    }
}

/// Random subsampled view of a video, used when training-time augmentation is on.
pub fn training_view<R: Rng + ?Sized>(
    features: &SeqTensor,
    labels: &LabelSequence,
    rate: usize,
    rng: &mut R,
) -> Result<(SeqTensor, LabelSequence)> {
    let offset = rng.random_range(0..rate.min(features.frames()).max(1));
    let rows: Vec<usize> = (offset..features.frames()).step_by(rate.max(1)).collect();
    let ids = rows.iter().map(|&r| labels.ids()[r]).collect();
    Ok((
        features.select_rows(&rows),
        LabelSequence::new(ids, labels.num_classes())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerConfig;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            hidden: 16,
            encoder_layers: 2,
            decoder_blocks: 1,
            diffusion_steps: 100,
            delta_init: 10,
            delta_max: 20,
            lr: 3e-3,
            ..RunConfig::default()
        }
    }

    fn toy() -> (SeqTensor, LabelSequence) {
        let ids: Vec<usize> = (0..24).map(|t| (t / 8) % 3).collect();
        let y = LabelSequence::new(ids, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = SeqTensor::randn(&[24, 4], &mut rng).map(|v| 0.3 * v);
        for (t, &k) in y.ids().iter().enumerate() {
            f.set(t, k, f.at(t, k) + 2.0);
        }
        (f, y)
    }

    #[test]
    fn loss_is_finite_and_deterministic() {
        let (f, y) = toy();
        let run = || {
            let mut m = Model::new(tiny_config(), 4, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            (0..5)
                .map(|_| m.training_step(&f, &y, &mut rng).unwrap().total)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn two_hundred_steps_cut_the_loss() {
        let (f, y) = toy();
        let mut m = Model::new(tiny_config(), 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
        let probe = |m: &mut Model, rng: &mut ChaCha8Rng| {
            let snapshot = m.clone();
            let v: f64 = (0..16)
                .map(|_| m.training_step(&f, &y, rng).unwrap().total)
                .sum::<f64>()
                / 16.0;
            *m = snapshot;
            v
        };
        let before = probe(&mut m, &mut eval_rng.clone());
        for _ in 0..200 {
            m.training_step(&f, &y, &mut rng).unwrap();
        }
        let after = probe(&mut m, &mut eval_rng);
        assert!(after < 0.8 * before, "{before} -> {after}");
        assert_eq!(m.step, 200);
    }

    #[test]
    fn predict_shapes_and_augmentation() {
        let (f, _) = toy();
        let m = Model::new(tiny_config(), 4, 3).unwrap();
        let sampler = m.cfg.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = m.predict(&f, SamplerKind::Fixed, &sampler, false, &mut rng).unwrap();
        assert_eq!(p.labels.len(), 24);
        assert_eq!(p.calls, 10);
        let p = m.predict(&f, SamplerKind::Fixed, &sampler, true, &mut rng).unwrap();
        assert_eq!(p.labels.len(), 24);
        assert_eq!(p.trajectories.len(), 4);
        assert_eq!(p.calls, 40);
        let short = f.select_rows(&[0, 1]);
        assert_eq!(
            m.predict(&short, SamplerKind::Adaptive, &sampler, true, &mut rng)
                .unwrap()
                .labels
                .len(),
            2
        );
        assert!(m
            .predict(
                &f.select_rows(&[0]),
                SamplerKind::Fixed,
                &SamplerConfig::default(),
                false,
                &mut rng
            )
            .is_err());
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let m = Model::new(tiny_config(), 4, 3).unwrap();
        assert!(m.encode(&SeqTensor::zeros(&[5, 3])).is_err());
        assert!("fast".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn training_view_subsamples_consistently() {
        let (f, y) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (vf, vy) = training_view(&f, &y, 4, &mut rng).unwrap();
        assert_eq!(vf.frames(), vy.len());
        assert_eq!(vf.frames(), 6);
    }
}
