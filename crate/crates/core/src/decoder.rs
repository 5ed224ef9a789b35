//! Conditional denoising decoder.
//!
//! Input is the concatenation of the noisy label sequence and the masked
//! encoder features, projected to the hidden width and offset by a step
//! embedding. Each block runs a dilated separable convolution, cross-attention
//! from the hidden sequence to the masked features, and a feed-forward layer,
//! all pre-normalized with residuals. A pointwise head and log-softmax give
//! per-frame class log-probabilities.

use crate::autodiff::Var;
use crate::diffusion::ProbSequence;
use crate::error::{config_err, dim_err, Result};
use crate::masking::ConditionMask;
use crate::nn::{FeedForward, Norm, ParamStore, Pointwise, SeparableConv, Session};
use crate::tensor::SeqTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub num_classes: usize,
    pub num_blocks: usize,
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub window: usize,
    pub ffn_expansion: usize,
}

impl DecoderConfig {
    pub fn new(hidden: usize, num_classes: usize, num_blocks: usize) -> Self {
        Self {
            hidden,
            num_classes,
            num_blocks,
            dilations: (0..num_blocks).map(|i| 1usize << i.min(30)).collect(),
            heads: 1,
            window: 3,
            ffn_expansion: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_classes == 0 || self.num_blocks == 0 || self.ffn_expansion == 0 {
            return config_err("decoder dimensions must be positive");
        }
        if self.dilations.len() != self.num_blocks || self.dilations.contains(&0) {
            return config_err("decoder needs one positive dilation per block");
        }
        if self.window.is_multiple_of(2) {
            return config_err("decoder window must be odd");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return config_err(format!("{} heads do not divide hidden {}", self.heads, self.hidden));
        }
        Ok(())
    }
}

/// Interleaved `[sin(s·f_0), cos(s·f_0), sin(s·f_1), …]` at geometric frequencies.
pub fn sinusoidal(step: usize, dim: usize) -> Vec<f64> {
    let half = dim.div_ceil(2);
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        let a = step as f64 * freq;
        out.push(a.sin());
        if out.len() < dim {
            out.push(a.cos());
        }
    }
    out
}

/// Sinusoidal step code followed by a two-layer ReLU map.
#[derive(Clone, Debug)]
pub struct StepEmbedding {
    pub dim: usize,
    pub first: Pointwise,
    pub second: Pointwise,
}

impl StepEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            dim,
            first: Pointwise::new(store, &format!("{name}.first"), dim, dim, rng),
            second: Pointwise::new(store, &format!("{name}.second"), dim, dim, rng),
        }
    }

    /// `[1, H]` embedding of `step`.
    pub fn forward(&self, s: &mut Session, step: usize) -> Result<Var> {
        let code = s.input(SeqTensor::matrix(1, self.dim, sinusoidal(step, self.dim))?);
        let h = self.first.forward(s, code)?;
        let h = s.tape.relu(h);
        self.second.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv_norm: Norm,
    pub conv: SeparableConv,
    pub attn_norm: Norm,
    pub query: Pointwise,
    pub key: Pointwise,
    pub value: Pointwise,
    pub out: Pointwise,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl DecoderBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &DecoderConfig,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden;
        Self {
            conv_norm: Norm::new(store, &format!("{name}.conv_norm"), h, true),
            conv: SeparableConv::new(store, &format!("{name}.conv"), h, cfg.window, dilation, rng),
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), h, true),
            query: Pointwise::new(store, &format!("{name}.query"), h, h, rng),
            key: Pointwise::new(store, &format!("{name}.key"), h, h, rng),
            value: Pointwise::new(store, &format!("{name}.value"), h, h, rng),
            out: Pointwise::new(store, &format!("{name}.out"), h, h, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), h, cfg.ffn_expansion, true, rng),
            heads: cfg.heads,
        }
    }

    fn forward(&self, s: &mut Session, x: Var, cond: Var) -> Result<Var> {
        let z = self.conv_norm.forward(s, x)?;
        let c = self.conv.forward(s, z)?;
        let x = s.tape.add(x, c)?;

        let z = self.attn_norm.forward(s, x)?;
        let q = self.query.forward(s, z)?;
        let k = self.key.forward(s, cond)?;
        let v = self.value.forward(s, cond)?;
        let a = s.tape.attention(q, k, v, self.heads)?;
        let a = self.out.forward(s, a)?;
        let x = s.tape.add(x, a)?;

        self.ffn.forward(s, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub input: Pointwise,
    pub step: StepEmbedding,
    pub blocks: Vec<DecoderBlock>,
    pub head: Pointwise,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = Pointwise::new(
            store,
            &format!("{name}.input"),
            cfg.num_classes + cfg.hidden,
            cfg.hidden,
            rng,
        );
        let step = StepEmbedding::new(store, &format!("{name}.step"), cfg.hidden, rng);
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| DecoderBlock::new(store, &format!("{name}.block{i}"), &cfg, d, rng))
            .collect();
        let head = Pointwise::new(store, &format!("{name}.head"), cfg.hidden, cfg.num_classes, rng);
        Ok(Self {
            cfg,
            input,
            step,
            blocks,
            head,
        })
    }

    /// Log-probabilities `[L, C]` for noisy labels `ys` at diffusion step `step`,
    /// conditioned on `cond ⊙ mask`.
    pub fn decode(&self, s: &mut Session, ys: Var, step: usize, cond: Var, mask: &ConditionMask) -> Result<Var> {
        let (ysv, cv) = (s.value(ys), s.value(cond));
        if !ysv.is_matrix() || !cv.is_matrix() {
            return dim_err("decoder inputs must be [L, C] and [L, H]");
        }
        if ysv.frames() != cv.frames() {
            return dim_err(format!(
                "{} noisy frames vs {} condition frames",
                ysv.frames(),
                cv.frames()
            ));
        }
        if ysv.channels() != self.cfg.num_classes || cv.channels() != self.cfg.hidden {
            return dim_err(format!(
                "decoder expects [L, {}] labels and [L, {}] features, got {:?} and {:?}",
                self.cfg.num_classes,
                self.cfg.hidden,
                ysv.shape(),
                cv.shape()
            ));
        }
        let frames = ysv.frames();
        let cond = s.tape.frame_mask(cond, &mask.values)?;
        let joined = s.tape.concat_channels(ys, cond)?;
        let h = self.input.forward(s, joined)?;
        let e = self.step.forward(s, step)?;
        let e = s.tape.broadcast_time(e, frames)?;
        let mut h = s.tape.add(h, e)?;
        for block in &self.blocks {
            h = block.forward(s, h, cond)?;
        }
        let logits = self.head.forward(s, h)?;
        s.tape.log_softmax(logits)
    }

    /// Forward pass without gradients, returning probabilities.
    pub fn decode_probs(
        &self,
        store: &ParamStore,
        ys: &SeqTensor,
        step: usize,
        cond: &SeqTensor,
        mask: &ConditionMask,
    ) -> Result<ProbSequence> {
        let mut s = Session::new(store, false);
        let y = s.input(ys.clone());
        let c = s.input(cond.clone());
        let out = self.decode(&mut s, y, step, c, mask)?;
        ProbSequence::new(s.value(out).map(f64::exp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize, c: usize) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", DecoderConfig::new(h, c, 2), &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn raw_step_code_at_zero() {
        let code = sinusoidal(0, 6);
        assert_eq!(code, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn step_embeddings_never_collide() {
        let (store, dec) = setup(8, 3);
        let mut prev: Option<SeqTensor> = None;
        for step in 0..=1000 {
            let mut s = Session::new(&store, false);
            let e = dec.step.forward(&mut s, step).unwrap();
            let e = s.value(e).clone();
            assert_eq!(e.shape(), &[1, 8]);
            if let Some(p) = &prev {
                assert!(p.max_abs_diff(&e) > 0.0, "collision at {step}");
            }
            prev = Some(e);
        }
    }

    #[test]
    fn output_rows_are_distributions() {
        let (store, dec) = setup(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ys = SeqTensor::randn(&[10, 4], &mut rng);
        let cond = SeqTensor::randn(&[10, 8], &mut rng);
        let p = dec
            .decode_probs(&store, &ys, 500, &cond, &ConditionMask::ones(10))
            .unwrap();
        assert_eq!(p.shape(), &[10, 4]);
    }

    #[test]
    fn zero_mask_hides_the_condition() {
        let (store, dec) = setup(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ys = SeqTensor::randn(&[7, 3], &mut rng);
        let zeros = ConditionMask {
            kind: MaskKind::Zeros,
            values: vec![0.0; 7],
        };
        let a = dec
            .decode_probs(&store, &ys, 10, &SeqTensor::randn(&[7, 8], &mut rng), &zeros)
            .unwrap();
        let b = dec
            .decode_probs(&store, &ys, 10, &SeqTensor::randn(&[7, 8], &mut rng), &zeros)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (store, dec) = setup(8, 3);
        let r = dec.decode_probs(
            &store,
            &SeqTensor::zeros(&[5, 3]),
            1,
            &SeqTensor::zeros(&[6, 8]),
            &ConditionMask::ones(6),
        );
        assert!(r.is_err());
    }

    #[test]
    fn relabeling_permutes_outputs() {
        let (mut store, dec) = setup(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys = SeqTensor::randn(&[6, 3], &mut rng);
        let cond = SeqTensor::randn(&[6, 8], &mut rng);
        let mask = ConditionMask::ones(6);
        let base = dec.decode_probs(&store, &ys, 42, &cond, &mask).unwrap();

        let perm = [2usize, 0, 1];
        let mut ys_p = ys.clone();
        for t in 0..6 {
            for (new, &old) in perm.iter().enumerate() {
                ys_p.set(t, new, ys.at(t, old));
            }
        }
        let w_in = store.get(dec.input.weight).clone();
        let w_in_p = store.get_mut(dec.input.weight);
        for (new, &old) in perm.iter().enumerate() {
            w_in_p.row_mut(new).copy_from_slice(w_in.row(old));
        }
        let w_head = store.get(dec.head.weight).clone();
        let b_head = store.get(dec.head.bias).clone();
        for r in 0..8 {
            for (new, &old) in perm.iter().enumerate() {
                store.get_mut(dec.head.weight).set(r, new, w_head.at(r, old));
            }
        }
        for (new, &old) in perm.iter().enumerate() {
            store.get_mut(dec.head.bias).data_mut()[new] = b_head.data()[old];
        }
        let permuted = dec.decode_probs(&store, &ys_p, 42, &cond, &mask).unwrap();
        for t in 0..6 {
            for (new, &old) in perm.iter().enumerate() {
                assert!((permuted.at(t, new) - base.at(t, old)).abs() < 1e-12);
            }
        }
    }
}
