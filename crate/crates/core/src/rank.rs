//! Numeric-rank diagnostics comparing the TDP stack with plain self-attention.

use crate::autodiff::Tape;
use crate::encoder::{TdpEncoder, TdpEncoderConfig};
use crate::error::Result;
use crate::nn::{ParamStore, Session};
use crate::tensor::SeqTensor;
use nalgebra::DMatrix;
use rand::Rng;

/// Singular values of an `[L, C]` matrix, largest first.
pub fn singular_values(x: &SeqTensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(x.frames(), x.channels(), x.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numeric_rank(x: &SeqTensor, rel_tol: f64) -> usize {
    let s = singular_values(x);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

/// `layers` rounds of `X ← softmax(XW_q (XW_k)ᵀ/√H) XW_v` with random weights,
/// no residuals or feed-forward blocks.
pub fn attention_stack<R: Rng + ?Sized>(x: &SeqTensor, layers: usize, rng: &mut R) -> Result<SeqTensor> {
    let h = x.channels();
    let bound = 1.0 / (h as f64).sqrt();
    let mut cur = x.clone();
    for _ in 0..layers {
        let mut tape = Tape::new();
        let xv = tape.constant(cur);
        let mut proj = |tape: &mut Tape| -> Result<_> {
            let w = tape.constant(SeqTensor::uniform(&[h, h], bound, rng));
            tape.linear(xv, w, None)
        };
        let q = proj(&mut tape)?;
        let k = proj(&mut tape)?;
        let v = proj(&mut tape)?;
        let y = tape.attention(q, k, v, 1)?;
        cur = tape.value(y).clone();
    }
    Ok(cur)
}

/// Output of a freshly initialized `layers`-deep TDP stack applied to `x`.
pub fn tdp_stack<R: Rng + ?Sized>(x: &SeqTensor, layers: usize, rng: &mut R) -> Result<SeqTensor> {
    let h = x.channels();
    let mut store = ParamStore::new();
    let enc = TdpEncoder::new(&mut store, "diag", TdpEncoderConfig::new(h, h, layers), rng)?;
    let mut s = Session::new(&store, false);
    let xv = s.input(x.clone());
    let y = enc.forward_stack(&mut s, xv)?;
    Ok(s.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RankReport {
    pub frames: usize,
    pub channels: usize,
    pub layers: usize,
    pub input_rank: usize,
    pub tdp_rank: usize,
    pub attention_rank: usize,
}

pub const RANK_TOL: f64 = 1e-6;

/// Random `[frames, channels]` input pushed through both stacks.
pub fn rank_diagnostic<R: Rng + ?Sized>(
    frames: usize,
    channels: usize,
    layers: usize,
    rng: &mut R,
) -> Result<RankReport> {
    let x = SeqTensor::randn(&[frames, channels], rng);
    let tdp = tdp_stack(&x, layers, rng)?;
    let att = attention_stack(&x, layers, rng)?;
    Ok(RankReport {
        frames,
        channels,
        layers,
        input_rank: numeric_rank(&x, RANK_TOL),
        tdp_rank: numeric_rank(&tdp, RANK_TOL),
        attention_rank: numeric_rank(&att, RANK_TOL),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rank_of_known_matrices() {
        assert_eq!(numeric_rank(&SeqTensor::identity(5), 1e-6), 5);
        let ones = SeqTensor::filled(&[4, 3], 2.0);
        assert_eq!(numeric_rank(&ones, 1e-6), 1);
        assert_eq!(numeric_rank(&SeqTensor::zeros(&[3, 3]), 1e-6), 0);
    }

    #[test]
    fn attention_stack_loses_rank_faster() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let r = rank_diagnostic(16, 16, 4, &mut rng).unwrap();
        assert!(r.tdp_rank > 1);
        assert!(r.tdp_rank >= r.attention_rank, "{r:?}");
    }
}
