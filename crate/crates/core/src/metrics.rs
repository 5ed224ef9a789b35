//! Frame accuracy, segmental edit score and F1@τ.

use crate::error::{dim_err, Error, Result};
use serde::{Deserialize, Serialize};

/// Maximal run of one label over `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

pub fn segments_from_labels(labels: &[usize]) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match segs.last_mut() {
            Some(s) if s.label == l => s.end = t + 1,
            _ => segs.push(Segment {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    segs
}

pub fn labels_from_segments(segs: &[Segment]) -> Vec<usize> {
    segs.iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

fn check(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("empty label sequence".into()));
    }
    if pred.len() != gt.len() {
        return dim_err(format!("{} predicted frames vs {} ground truth", pred.len(), gt.len()));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score_segments(pred: &[Segment], gt: &[Segment]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("edit score of an empty segmentation".into()));
    }
    let p: Vec<usize> = pred.iter().map(|s| s.label).collect();
    let g: Vec<usize> = gt.iter().map(|s| s.label).collect();
    let d = levenshtein(&p, &g) as f64;
    Ok(100.0 * (1.0 - d / p.len().max(g.len()) as f64))
}

pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    edit_score_segments(&segments_from_labels(pred), &segments_from_labels(gt))
}

/// Segmental F1 with greedy one-to-one matching in prediction order.
pub fn f1_segments(pred: &[Segment], gt: &[Segment], tau: f64) -> f64 {
    let mut matched = vec![false; gt.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    for p in pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if g.label != p.label {
                continue;
            }
            let iou = p.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= tau && !matched[j] => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = matched.iter().filter(|m| !**m).count();
    // Harmonic mean of precision and recall in closed form: one rounding step.
    if tp == 0 {
        0.0
    } else {
        200.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn f1_at_k(pred: &[usize], gt: &[usize], tau: f64) -> Result<f64> {
    check(pred, gt)?;
    Ok(f1_segments(&segments_from_labels(pred), &segments_from_labels(gt), tau))
}

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub edit: f64,
    pub acc: f64,
    pub avg: f64,
}

impl MetricReport {
    pub fn from_parts(f1_10: f64, f1_25: f64, f1_50: f64, edit: f64, acc: f64) -> Self {
        Self {
            f1_10,
            f1_25,
            f1_50,
            edit,
            acc,
            avg: (f1_10 + f1_25 + f1_50 + edit + acc) / 5.0,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.f1_10, self.f1_25, self.f1_50, self.edit, self.acc, self.avg]
    }

    /// Column-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let m = acc.map(|a| a / n);
        Some(MetricReport {
            f1_10: m[0],
            f1_25: m[1],
            f1_50: m[2],
            edit: m[3],
            acc: m[4],
            avg: m[5],
        })
    }
}

pub fn report(pred: &[usize], gt: &[usize]) -> Result<MetricReport> {
    check(pred, gt)?;
    let ps = segments_from_labels(pred);
    let gs = segments_from_labels(gt);
    Ok(MetricReport::from_parts(
        f1_segments(&ps, &gs, F1_THRESHOLDS[0]),
        f1_segments(&ps, &gs, F1_THRESHOLDS[1]),
        f1_segments(&ps, &gs, F1_THRESHOLDS[2]),
        edit_score_segments(&ps, &gs)?,
        frame_accuracy(pred, gt)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> Vec<usize> {
        s.bytes().map(|b| (b - b'A') as usize).collect()
    }

    #[test]
    fn segments_tile_the_sequence() {
        let s = segments_from_labels(&seq("AAABB"));
        assert_eq!(
            s,
            vec![
                Segment {
                    label: 0,
                    start: 0,
                    end: 3
                },
                Segment {
                    label: 1,
                    start: 3,
                    end: 5
                }
            ]
        );
        assert_eq!(segments_from_labels(&[4]).len(), 1);
        let x = seq("ABBBCAAC");
        assert_eq!(labels_from_segments(&segments_from_labels(&x)), x);
    }

    #[test]
    fn accuracy() {
        assert_eq!(frame_accuracy(&seq("ABCD"), &seq("ABCD")).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&seq("ABAB"), &seq("ABBA")).unwrap(), 50.0);
        assert!(frame_accuracy(&seq("AB"), &seq("A")).is_err());
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_score(&seq("AABBC"), &seq("AABBC")).unwrap(), 100.0);
        let e = edit_score(&seq("AAACCC"), &seq("AABBCC")).unwrap();
        assert!((e - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-9);
        assert_eq!(edit_score(&seq("AAAA"), &seq("BBBB")).unwrap(), 0.0);
        assert!(edit_score(&[], &[]).is_err());
    }

    #[test]
    fn f1_examples() {
        let gt = [Segment {
            label: 0,
            start: 0,
            end: 100,
        }];
        let half = [Segment {
            label: 0,
            start: 0,
            end: 50,
        }];
        assert_eq!(f1_segments(&half, &gt, 0.5), 100.0);
        assert_eq!(f1_segments(&half, &gt, 0.25), 100.0);
        let split = [
            Segment {
                label: 0,
                start: 0,
                end: 50,
            },
            Segment {
                label: 0,
                start: 50,
                end: 100,
            },
        ];
        for tau in F1_THRESHOLDS {
            assert!((f1_segments(&split, &gt, tau) - 200.0 / 3.0).abs() < 1e-9);
        }
        let x = seq("AABBBCC");
        for tau in F1_THRESHOLDS {
            assert_eq!(f1_at_k(&x, &x, tau).unwrap(), 100.0);
        }
    }

    #[test]
    fn report_average() {
        let r = MetricReport::from_parts(90.0, 80.0, 70.0, 80.0, 80.0);
        assert_eq!(r.avg, 80.0);
        let x = seq("AABBBCC");
        let perfect = report(&x, &x).unwrap();
        assert!(perfect.values().iter().all(|&v| v == 100.0));
        let (p, g) = (seq("AABBACC"), seq("AABBBCC"));
        let r = report(&p, &g).unwrap();
        assert_eq!(r.acc, frame_accuracy(&p, &g).unwrap());
        assert_eq!(r.edit, edit_score(&p, &g).unwrap());
        assert_eq!(r.f1_25, f1_at_k(&p, &g, 0.25).unwrap());
    }
}
