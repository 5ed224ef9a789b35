//! Frame-level conditional masks for encoder features.

use crate::diffusion::LabelSequence;
use crate::error::{dim_err, Error, Result};
use crate::metrics::segments_from_labels;
use crate::tensor::SeqTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Ones,
    Zeros,
    Boundary,
    Relation,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::Ones, MaskKind::Zeros, MaskKind::Boundary, MaskKind::Relation];

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }
}

/// One 0/1 value per frame, broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    pub kind: MaskKind,
    pub values: Vec<f64>,
}

impl ConditionMask {
    pub fn ones(frames: usize) -> Self {
        Self {
            kind: MaskKind::Ones,
            values: vec![1.0; frames],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Builds a mask of the given kind.
///
/// Boundary masks zero every frame within `radius` of a label change (the
/// change between frames `i` and `i + 1` zeroes `i + 1 − radius ..= i + radius`).
/// Relation masks zero one whole segment chosen uniformly.
pub fn sample_mask<R: Rng + ?Sized>(
    y0: &LabelSequence,
    kind: MaskKind,
    radius: usize,
    rng: &mut R,
) -> Result<ConditionMask> {
    let l = y0.len();
    if l == 0 {
        return Err(Error::Invalid("cannot mask an empty label sequence".into()));
    }
    let mut values = vec![1.0; l];
    match kind {
        MaskKind::Ones => {}
        MaskKind::Zeros => values.iter_mut().for_each(|v| *v = 0.0),
        MaskKind::Boundary => {
            for (i, b) in y0.boundaries().iter().enumerate() {
                if *b == 0.0 {
                    continue;
                }
                let lo = (i + 1).saturating_sub(radius);
                let hi = (i + radius).min(l - 1);
                for v in &mut values[lo..=hi] {
                    *v = 0.0;
                }
            }
        }
        MaskKind::Relation => {
            let segs = segments_from_labels(y0.ids());
            let seg = &segs[rng.random_range(0..segs.len())];
            for v in &mut values[seg.start..seg.end] {
                *v = 0.0;
            }
        }
    }
    Ok(ConditionMask { kind, values })
}

/// Draws the kind uniformly, then builds the mask.
pub fn sample_random_mask<R: Rng + ?Sized>(y0: &LabelSequence, radius: usize, rng: &mut R) -> Result<ConditionMask> {
    let kind = MaskKind::sample(rng);
    sample_mask(y0, kind, radius, rng)
}

/// `h ⊙ M`, with `M` broadcast over channels.
pub fn apply_mask(h: &SeqTensor, mask: &ConditionMask) -> Result<SeqTensor> {
    if !h.is_matrix() || h.frames() != mask.len() {
        return dim_err(format!("mask of {} frames vs features {:?}", mask.len(), h.shape()));
    }
    let mut out = h.clone();
    for (t, &m) in mask.values.iter().enumerate() {
        out.row_mut(t).iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}
