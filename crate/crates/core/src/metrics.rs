//! Overlap metrics on binary masks and the summary statistics reported per
//! validation set.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary `h x w` mask, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return shape_err(format!("mask {h}x{w} needs {} values, got {}", h * w, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return contract_err(format!("mask value {v} is not binary"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Per-pixel argmax over the two class channels of `(N, 2, H, W)` logits.
/// Ties go to background.
pub fn binarize<T: Element>(logits: &Tensor<T>) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 2 {
        return shape_err(format!("binarize expects 2 class channels, got {c}"));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let bg = &logits.data()[2 * i * plane..][..plane];
            let fg = &logits.data()[(2 * i + 1) * plane..][..plane];
            Mask { h, w, data: bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect() }
        })
        .collect())
}

fn check_pair(pred: &Mask, truth: &Mask) {
    assert_eq!((pred.h, pred.w), (truth.h, truth.w), "mask shapes differ");
}

/// `(|A ∩ B|, |A|, |B|)`.
fn counts(pred: &Mask, truth: &Mask) -> (usize, usize, usize) {
    check_pair(pred, truth);
    let mut inter = 0;
    let (mut a, mut b) = (0, 0);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        inter += (p & t) as usize;
        a += p as usize;
        b += t as usize;
    }
    (inter, a, b)
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dsc(pred: &Mask, truth: &Mask) -> f64 {
    let (i, a, b) = counts(pred, truth);
    if a + b == 0 {
        return 1.0;
    }
    2.0 * i as f64 / (a + b) as f64
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou(pred: &Mask, truth: &Mask) -> f64 {
    let (i, a, b) = counts(pred, truth);
    if a + b == 0 {
        return 1.0;
    }
    i as f64 / (a + b - i) as f64
}

/// Foreground F1 from pixel precision and recall. Equal to [`dsc`] per pair;
/// kept as an independent cross-check.
pub fn pixel_f1(pred: &Mask, truth: &Mask) -> f64 {
    let (tp, a, b) = counts(pred, truth);
    if a + b == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / a as f64;
    let recall = tp as f64 / b as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 4-connected component labels (0 = background, 1..=count) and the count.
pub fn components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (y, x) = (k / w, k % w);
            let mut visit = |n: usize| {
                if mask.data[n] == 1 && labels[n] == 0 {
                    labels[n] = next;
                    stack.push(n);
                }
            };
            if y > 0 {
                visit(k - w);
            }
            if y + 1 < h {
                visit(k + w);
            }
            if x > 0 {
                visit(k - 1);
            }
            if x + 1 < w {
                visit(k + 1);
            }
        }
    }
    (labels, next as usize)
}

pub const OBJECT_IOU_THRESHOLD: f64 = 0.5;

/// Object-level detection F1: components are matched one-to-one greedily by
/// descending IoU; a match with IoU at or above `threshold` is a true
/// positive. 1 when neither mask has objects.
pub fn object_f1(pred: &Mask, truth: &Mask, threshold: f64) -> f64 {
    check_pair(pred, truth);
    let (lp, np) = components(pred);
    let (lt, nt) = components(truth);
    if np + nt == 0 {
        return 1.0;
    }
    let mut area_p = vec![0usize; np + 1];
    let mut area_t = vec![0usize; nt + 1];
    let mut overlap = std::collections::BTreeMap::<(u32, u32), usize>::new();
    for (&a, &b) in lp.iter().zip(&lt) {
        area_p[a as usize] += 1;
        area_t[b as usize] += 1;
        if a > 0 && b > 0 {
            *overlap.entry((a, b)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u32, u32)> = overlap
        .into_iter()
        .map(|((a, b), i)| (i as f64 / (area_p[a as usize] + area_t[b as usize] - i) as f64, a, b))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_p = vec![false; np + 1];
    let mut used_t = vec![false; nt + 1];
    let mut tp = 0usize;
    for (v, a, b) in pairs {
        if v < threshold {
            break;
        }
        if !used_p[a as usize] && !used_t[b as usize] {
            used_p[a as usize] = true;
            used_t[b as usize] = true;
            tp += 1;
        }
    }
    let (fp, fnn) = (np - tp, nt - tp);
    2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
}

/// All four per-image scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub dsc: f64,
    pub iou: f64,
    pub pixel_f1: f64,
    pub object_f1: f64,
}

pub fn score_pair(pred: &Mask, truth: &Mask) -> PairScores {
    PairScores {
        dsc: dsc(pred, truth),
        iou: iou(pred, truth),
        pixel_f1: pixel_f1(pred, truth),
        object_f1: object_f1(pred, truth, OBJECT_IOU_THRESHOLD),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub percentile_10: f64,
}

/// Linear interpolation between order statistics at rank `q * (n - 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(scores: &[f64]) -> Result<MetricSummary> {
    if scores.is_empty() {
        return contract_err("cannot summarize an empty score list");
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(MetricSummary {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile(&s, 0.5),
        max: s[s.len() - 1],
        percentile_10: quantile(&s, 0.1),
    })
}

/// Equal-width bin counts over `[0, 1]`; 1.0 lands in the last bin and
/// out-of-range values are clamped.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Vec<usize>> {
    if scores.is_empty() || bins == 0 {
        return contract_err("histogram needs scores and at least one bin");
    }
    let mut counts = vec![0; bins];
    for &v in scores {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}
